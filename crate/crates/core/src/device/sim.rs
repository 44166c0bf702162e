//! Discrete-event accelerator simulator on a virtual clock.
//!
//! Each core follows a piecewise-linear speed trajectory: constant between
//! switches, optionally ramping once a switch's latency has elapsed. An
//! iteration consumes a fixed cycle budget (jittered by the noise model) and
//! its duration is whatever it takes to integrate that budget under the
//! trajectory, so iterations straddling a switch get intermediate durations.
//!
//! Kernel traces are materialized lazily in `wait_for_completion`, after every
//! frequency change the host issued while the kernel was in flight is known.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    Accelerator, DeviceError, DeviceSpec, FrequencyMHz, FrequencyPair, IterationRecord,
    KernelTrace, SimScenario, ThrottleStatus,
};
use crate::timebase::{DeviceInstant, HostInstant, SyncExchange};

/// Ground truth for one frequency change the simulator applied.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSwitch {
    pub pair: FrequencyPair,
    pub dispatched_at: HostInstant,
    /// True device time of dispatch (unquantized).
    pub device_dispatch: f64,
    /// Sampled latency before per-core offsets, nanoseconds.
    pub latency_ns: f64,
    /// Per-core latency including per-core offsets.
    pub core_latencies: Vec<f64>,
    pub ramp_ns: f64,
    pub outlier: bool,
}

impl PlantedSwitch {
    /// Time after dispatch at which the slowest core has stopped changing speed.
    pub fn settled_latency(&self) -> f64 {
        self.core_latencies.iter().copied().fold(0.0, f64::max) + self.ramp_ns
    }

    /// Latency of the slowest core before any ramp.
    pub fn max_core_latency(&self) -> f64 {
        self.core_latencies.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
struct Transition {
    start: f64,
    from: f64,
    to: f64,
    ramp: f64,
}

impl Transition {
    fn speed_at(&self, t: f64) -> f64 {
        if self.ramp > 0.0 && t < self.start + self.ramp {
            self.from + (self.to - self.from) * (t - self.start) / self.ramp
        } else {
            self.to
        }
    }
}

/// Speed in cycles per nanosecond: `r(t) = rate + slope * (t - start)` on `[start, end)`.
#[derive(Debug, Clone, Copy)]
struct Piece {
    start: f64,
    end: f64,
    rate: f64,
    slope: f64,
}

/// Per-core speed trajectory, MHz.
#[derive(Debug, Clone)]
struct Schedule {
    initial: f64,
    transitions: Vec<Transition>,
}

impl Schedule {
    fn new(initial: f64) -> Self {
        Schedule {
            initial,
            transitions: Vec::new(),
        }
    }

    fn speed_at(&self, t: f64) -> f64 {
        match self.transitions.iter().rposition(|tr| tr.start <= t) {
            Some(k) => self.transitions[k].speed_at(t),
            None => self.initial,
        }
    }

    /// A later command supersedes any switch that has not started by `start`.
    fn push(&mut self, start: f64, to: f64, ramp: f64) {
        self.transitions.retain(|tr| tr.start <= start);
        let from = self.speed_at(start);
        self.transitions.push(Transition {
            start,
            from,
            to,
            ramp,
        });
    }

    fn prune_before(&mut self, t: f64) {
        if let Some(k) = self.transitions.iter().rposition(|tr| tr.start <= t) {
            if k > 0 {
                self.transitions.drain(..k);
            }
        }
    }

    /// Trajectory from `t0` on, with `[t0, wake_end)` forced to `idle`.
    fn pieces_from(&self, t0: f64, wake_end: f64, idle: f64) -> Vec<Piece> {
        const TO_RATE: f64 = 1e-3; // MHz -> cycles/ns
        let mut raw: Vec<Piece> = Vec::with_capacity(2 * self.transitions.len() + 2);
        let first_start = self.transitions.first().map_or(f64::INFINITY, |t| t.start);
        raw.push(Piece {
            start: f64::NEG_INFINITY,
            end: first_start,
            rate: self.initial,
            slope: 0.0,
        });
        for (k, tr) in self.transitions.iter().enumerate() {
            let next = self.transitions.get(k + 1).map_or(f64::INFINITY, |n| n.start);
            let ramp_end = (tr.start + tr.ramp).min(next);
            if tr.ramp > 0.0 && ramp_end > tr.start {
                raw.push(Piece {
                    start: tr.start,
                    end: ramp_end,
                    rate: tr.from,
                    slope: (tr.to - tr.from) / tr.ramp,
                });
            }
            let const_start = if tr.ramp > 0.0 { ramp_end } else { tr.start };
            if next > const_start {
                raw.push(Piece {
                    start: const_start,
                    end: next,
                    rate: tr.to,
                    slope: 0.0,
                });
            }
        }

        let cursor = wake_end.max(t0);
        let mut out = Vec::with_capacity(raw.len() + 1);
        if wake_end > t0 {
            out.push(Piece {
                start: t0,
                end: wake_end,
                rate: idle * TO_RATE,
                slope: 0.0,
            });
        }
        for p in raw {
            if p.end <= cursor {
                continue;
            }
            let start = p.start.max(cursor);
            let rate = if p.slope == 0.0 {
                p.rate
            } else {
                p.rate + p.slope * (start - p.start)
            };
            out.push(Piece {
                start,
                end: p.end,
                rate: rate * TO_RATE,
                slope: p.slope * TO_RATE,
            });
        }
        out
    }
}

/// Walks a trajectory, consuming cycle budgets.
struct Integrator<'a> {
    pieces: &'a [Piece],
    idx: usize,
    t: f64,
}

impl<'a> Integrator<'a> {
    fn new(pieces: &'a [Piece], t: f64) -> Self {
        Integrator { pieces, idx: 0, t }
    }

    /// Advances time until `cycles` have executed; returns the new time.
    fn run(&mut self, mut cycles: f64) -> f64 {
        loop {
            let p = self.pieces[self.idx];
            let r = p.rate + p.slope * (self.t - p.start);
            let span = p.end - self.t;
            let capacity = if span.is_infinite() {
                f64::INFINITY
            } else {
                r * span + 0.5 * p.slope * span * span
            };
            if cycles <= capacity || self.idx + 1 == self.pieces.len() {
                let dt = if p.slope == 0.0 {
                    cycles / r
                } else {
                    let disc = (r * r + 2.0 * p.slope * cycles).max(0.0);
                    2.0 * cycles / (r + disc.sqrt())
                };
                self.t += dt;
                return self.t;
            }
            cycles -= capacity;
            self.t = p.end;
            self.idx += 1;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingKernel {
    start: f64,
    iterations: u64,
    launch_frequency: FrequencyMHz,
    wake_end: f64,
}

/// Simulated accelerator driven by a [`SimScenario`].
#[derive(Debug, Clone)]
pub struct SimulatedAccelerator {
    scenario: SimScenario,
    rng: ChaCha8Rng,
    now: i64,
    commanded: FrequencyMHz,
    previous_commanded: Option<FrequencyMHz>,
    schedules: Vec<Schedule>,
    in_flight: Option<PendingKernel>,
    last_kernel_end: Option<f64>,
    planted: Vec<PlantedSwitch>,
}

impl SimulatedAccelerator {
    pub fn new(scenario: SimScenario) -> Self {
        let idle = scenario.spec.idle_frequency;
        let speed = scenario.speed_of(idle);
        let cores = scenario.spec.core_count as usize;
        SimulatedAccelerator {
            rng: ChaCha8Rng::seed_from_u64(scenario.rng_seed),
            now: 0,
            commanded: idle,
            previous_commanded: None,
            schedules: vec![Schedule::new(speed); cores],
            in_flight: None,
            last_kernel_end: None,
            planted: Vec::new(),
            scenario,
        }
    }

    pub fn scenario(&self) -> &SimScenario {
        &self.scenario
    }

    /// Every frequency change applied so far, in dispatch order.
    pub fn planted(&self) -> &[PlantedSwitch] {
        &self.planted
    }

    /// The planted switch dispatched closest to device time `t_s`.
    pub fn planted_near(&self, t_s: DeviceInstant) -> Option<&PlantedSwitch> {
        self.planted.iter().min_by(|a, b| {
            let da = (a.device_dispatch - t_s.0 as f64).abs();
            let db = (b.device_dispatch - t_s.0 as f64).abs();
            da.total_cmp(&db)
        })
    }

    pub fn commanded_frequency(&self) -> FrequencyMHz {
        self.commanded
    }

    /// Effective speed (MHz) of `core` at host-timeline time `t_ns`.
    pub fn effective_speed(&self, core: usize, t_ns: f64) -> f64 {
        self.schedules[core].speed_at(t_ns)
    }

    fn device_time(&self, true_ns: f64) -> DeviceInstant {
        let raw = (true_ns + self.scenario.clock_offset as f64).floor() as i64;
        DeviceInstant::quantized(raw, self.scenario.spec.timer_resolution)
    }

    fn link_sample(&mut self) -> i64 {
        let jitter = self.scenario.link_jitter;
        let extra = if jitter > 0 {
            self.rng.random_range(0..=jitter)
        } else {
            0
        };
        (self.scenario.link_delay + extra) as i64
    }

    fn core_offset(&self, core: usize) -> f64 {
        self.scenario
            .core_latency_offsets
            .get(core)
            .copied()
            .unwrap_or(0) as f64
    }

    fn sample_latency(&mut self, pair: FrequencyPair) -> (f64, f64, bool) {
        let mixture = self
            .scenario
            .latency_mixture(pair)
            .expect("validated scenario covers every pair")
            .to_vec();
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut chosen = &mixture[mixture.len() - 1];
        for c in &mixture {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let z: f64 = rand_distr::StandardNormal.sample(&mut self.rng);
        let mut latency = (chosen.mean + chosen.sigma * z).max(0.0);
        let outlier = self.rng.random_bool(self.scenario.outlier_probability);
        if outlier {
            latency *= self.scenario.outlier_scale;
        }
        let ramp = chosen.ramp.unwrap_or(self.scenario.transition_ramp) as f64;
        (latency, ramp, outlier)
    }

    fn start_kernel(&mut self, iterations: u64) -> Result<PendingKernel, DeviceError> {
        if self.in_flight.is_some() {
            return Err(DeviceError::LaunchFailed("a kernel is already in flight".into()));
        }
        if iterations == 0 {
            return Err(DeviceError::LaunchFailed("iteration count must be positive".into()));
        }
        let start = (self.now + self.scenario.link_delay as i64) as f64;
        let cold = match self.last_kernel_end {
            None => true,
            Some(end) => start - end > self.scenario.idle_timeout as f64,
        };
        let wake_end = if cold {
            start + self.scenario.wakeup_latency as f64
        } else {
            start
        };
        Ok(PendingKernel {
            start,
            iterations,
            launch_frequency: self.commanded,
            wake_end,
        })
    }

    fn finish_kernel(&mut self, end: f64) {
        self.last_kernel_end = Some(end);
        let ready = (end + self.scenario.link_delay as f64).ceil() as i64;
        self.now = self.now.max(ready);
        for s in &mut self.schedules {
            s.prune_before(end);
        }
    }

    fn materialize(&mut self, k: PendingKernel) -> KernelTrace {
        let idle = self.scenario.speed_of(self.scenario.spec.idle_frequency);
        let work = self.scenario.work_cycles_per_iteration as f64;
        let noise = Normal::new(0.0, self.scenario.noise_rel_sigma)
            .expect("validated noise sigma");
        let noisy = self.scenario.noise_rel_sigma > 0.0;
        let mut cores = Vec::with_capacity(self.schedules.len());
        let mut kernel_end = k.start;
        for core in 0..self.schedules.len() {
            let pieces = self.schedules[core].pieces_from(k.start, k.wake_end, idle);
            let mut integ = Integrator::new(&pieces, k.start);
            let mut records = Vec::with_capacity(k.iterations as usize);
            let mut t = k.start;
            for _ in 0..k.iterations {
                let factor = if noisy {
                    (1.0 + noise.sample(&mut self.rng)).max(0.05)
                } else {
                    1.0
                };
                let end = integ.run(work * factor);
                records.push(IterationRecord {
                    core_id: core as u32,
                    start: self.device_time(t),
                    end: self.device_time(end),
                });
                t = end;
            }
            kernel_end = kernel_end.max(t);
            cores.push(records);
        }
        self.finish_kernel(kernel_end);
        KernelTrace {
            launch_frequency: k.launch_frequency,
            cores,
        }
    }
}

impl Accelerator for SimulatedAccelerator {
    fn spec(&self) -> &DeviceSpec {
        &self.scenario.spec
    }

    fn host_now(&self) -> HostInstant {
        HostInstant(self.now)
    }

    fn sleep(&mut self, ns: u64) {
        self.now += ns as i64;
    }

    fn exchange_timestamps(&mut self) -> Result<SyncExchange, DeviceError> {
        if self.in_flight.is_some() {
            return Err(DeviceError::DeviceUnavailable(
                "timestamp exchange while a kernel is in flight".into(),
            ));
        }
        let t1 = self.now;
        let up = self.link_sample();
        let down = self.link_sample();
        let arrival = (t1 + up) as f64;
        let t2 = self.device_time(arrival);
        let t3 = t2;
        let t4 = t1 + up + down;
        self.now = t4;
        Ok(SyncExchange::new(t1, t2.0, t3.0, t4))
    }

    fn set_frequency(&mut self, f: FrequencyMHz) -> Result<(), DeviceError> {
        if !self.scenario.spec.supports(f) {
            return Err(DeviceError::UnsupportedFrequency(f));
        }
        if f == self.commanded {
            return Ok(());
        }
        let pair = FrequencyPair {
            init: self.commanded,
            target: f,
        };
        let (latency, ramp, outlier) = self.sample_latency(pair);
        let speed = self.scenario.speed_of(f);
        let dispatch = self.now as f64;
        let mut core_latencies = Vec::with_capacity(self.schedules.len());
        for core in 0..self.schedules.len() {
            let l = latency + self.core_offset(core);
            core_latencies.push(l);
            self.schedules[core].push(dispatch + l, speed, ramp);
        }
        self.planted.push(PlantedSwitch {
            pair,
            dispatched_at: HostInstant(self.now),
            device_dispatch: dispatch + self.scenario.clock_offset as f64,
            latency_ns: latency,
            core_latencies,
            ramp_ns: ramp,
            outlier,
        });
        self.previous_commanded = Some(self.commanded);
        self.commanded = f;
        Ok(())
    }

    fn launch_benchmark(&mut self, iterations_per_core: u64) -> Result<(), DeviceError> {
        let k = self.start_kernel(iterations_per_core)?;
        self.in_flight = Some(k);
        Ok(())
    }

    fn wait_for_completion(&mut self) -> Result<Option<KernelTrace>, DeviceError> {
        match self.in_flight.take() {
            None => Ok(None),
            Some(k) => Ok(Some(self.materialize(k))),
        }
    }

    fn read_throttle_status(&mut self) -> Result<ThrottleStatus, DeviceError> {
        let thermal = self
            .rng
            .random_bool(self.scenario.thermal_throttle_probability);
        let power = match self.previous_commanded {
            Some(prev) => self.scenario.power_throttle_pairs.contains(&FrequencyPair {
                init: prev,
                target: self.commanded,
            }),
            None => false,
        };
        Ok(ThrottleStatus { thermal, power })
    }

    /// Warm-up traces are never inspected, so only the kernel's end time is computed.
    fn run_warmup(&mut self, iterations_per_core: u64) -> Result<(), DeviceError> {
        let k = self.start_kernel(iterations_per_core)?;
        let idle = self.scenario.speed_of(self.scenario.spec.idle_frequency);
        let total = self.scenario.work_cycles_per_iteration as f64 * k.iterations as f64;
        let mut end = k.start;
        for s in &self.schedules {
            let pieces = s.pieces_from(k.start, k.wake_end, idle);
            end = end.max(Integrator::new(&pieces, k.start).run(total));
        }
        self.finish_kernel(end);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::LatencyComponent;

    fn scenario(freqs: &[u32], latency_ns: f64) -> SimScenario {
        SimScenario::uniform(freqs, 2, 50_000, latency_ns)
    }

    fn run_kernel(dev: &mut SimulatedAccelerator, n: u64) -> KernelTrace {
        dev.launch_benchmark(n).unwrap();
        dev.wait_for_completion().unwrap().unwrap()
    }

    #[test]
    fn zero_noise_constant_frequency_durations_exact() {
        let mut dev = SimulatedAccelerator::new(scenario(&[1000, 2000], 0.0));
        let trace = run_kernel(&mut dev, 100);
        assert_eq!(trace.iterations_per_core(), 100);
        assert!(trace.pooled_durations().iter().all(|&d| d == 50_000));
    }

    #[test]
    fn doubling_frequency_halves_duration() {
        let mut dev = SimulatedAccelerator::new(scenario(&[1000, 2000], 0.0));
        dev.set_frequency(FrequencyMHz(2000)).unwrap();
        let trace = run_kernel(&mut dev, 50);
        assert!(trace.pooled_durations().iter().all(|&d| d == 25_000));
    }

    #[test]
    fn same_frequency_is_noop() {
        let mut dev = SimulatedAccelerator::new(scenario(&[1000, 2000], 1e6));
        dev.set_frequency(FrequencyMHz(1000)).unwrap();
        assert!(dev.planted().is_empty());
        let trace = run_kernel(&mut dev, 20);
        assert!(trace.pooled_durations().iter().all(|&d| d == 50_000));
    }

    #[test]
    fn unsupported_frequency() {
        let mut dev = SimulatedAccelerator::new(scenario(&[1000, 2000], 0.0));
        assert_eq!(
            dev.set_frequency(FrequencyMHz(999)),
            Err(DeviceError::UnsupportedFrequency(FrequencyMHz(999)))
        );
    }

    #[test]
    fn planted_latency_takes_effect_after_sampled_delay() {
        let s = SimScenario::uniform(&[1260, 1350], 1, 50_000, 0.0)
            .with_latency(1350, 1260, vec![LatencyComponent::normal(1.0, 20e6, 0.1e6)]);
        let mut dev = SimulatedAccelerator::new(s);
        dev.set_frequency(FrequencyMHz(1350)).unwrap();
        dev.sleep(1_000_000);
        let t = dev.host_now().0 as f64;
        dev.set_frequency(FrequencyMHz(1260)).unwrap();
        let l = dev.planted()[1].latency_ns;
        assert!((l - 20e6).abs() < 1e6, "sampled {l}");
        assert_eq!(dev.effective_speed(0, t + l - 1.0), 1350.0);
        assert_eq!(dev.effective_speed(0, t + l), 1260.0);
    }

    #[test]
    fn trace_spanning_a_step_transition() {
        let s = scenario(&[1000, 2000], 1_000_000.0);
        let mut dev = SimulatedAccelerator::new(s);
        dev.launch_benchmark(100).unwrap();
        let t0 = dev.host_now().0 as f64;
        dev.set_frequency(FrequencyMHz(2000)).unwrap();
        let trace = dev.wait_for_completion().unwrap().unwrap();
        let switch = t0 + 1_000_000.0;
        for r in &trace.cores[0] {
            let (s, e) = (r.start.0 as f64, r.end.0 as f64);
            if e < switch - 1_000.0 {
                assert_eq!(r.duration(), 50_000);
            } else if s > switch + 1_000.0 {
                assert_eq!(r.duration(), 25_000);
            } else {
                assert!((25_000..=50_000).contains(&r.duration()));
            }
        }
    }

    #[test]
    fn ramp_produces_intermediate_durations() {
        let mut s = scenario(&[1000, 2000], 0.0);
        s.transition_ramp = 1_000_000;
        let mut dev = SimulatedAccelerator::new(s);
        dev.launch_benchmark(60).unwrap();
        dev.set_frequency(FrequencyMHz(2000)).unwrap();
        let trace = dev.wait_for_completion().unwrap().unwrap();
        let d = trace.cores[0].iter().map(|r| r.duration()).collect::<Vec<_>>();
        assert!(d.windows(2).all(|w| w[1] <= w[0] + 1_000));
        assert!(d.iter().any(|&x| x > 26_000 && x < 49_000));
        assert_eq!(*d.last().unwrap(), 25_000);
    }

    #[test]
    fn wakeup_holds_idle_frequency() {
        let mut s = scenario(&[500, 1000], 0.0);
        s.wakeup_latency = 1_000_000;
        let mut dev = SimulatedAccelerator::new(s);
        dev.set_frequency(FrequencyMHz(1000)).unwrap();
        let trace = run_kernel(&mut dev, 40);
        assert_eq!(trace.cores[0][0].duration(), 100_000);
        assert_eq!(trace.cores[0][39].duration(), 50_000);
        // Immediately relaunched: warm device, no wake-up.
        let trace = run_kernel(&mut dev, 5);
        assert_eq!(trace.cores[0][0].duration(), 50_000);
    }

    #[test]
    fn wait_accounts_kernel_time() {
        let mut dev = SimulatedAccelerator::new(scenario(&[1000, 2000], 0.0));
        assert_eq!(dev.wait_for_completion().unwrap(), None);
        let before = dev.host_now().0;
        let trace = run_kernel(&mut dev, 200);
        assert!(dev.host_now().0 - before >= 200 * 50_000);
        assert!(trace.cores.iter().all(|c| c.len() == 200));
    }

    #[test]
    fn throttle_flags() {
        let mut s = scenario(&[1000, 2000], 0.0);
        let mut dev = SimulatedAccelerator::new(s.clone());
        for _ in 0..10 {
            assert_eq!(dev.read_throttle_status().unwrap(), ThrottleStatus::default());
        }
        s.thermal_throttle_probability = 1.0;
        s.power_throttle_pairs.push(FrequencyPair::new(1000, 2000));
        let mut dev = SimulatedAccelerator::new(s);
        assert!(dev.read_throttle_status().unwrap().thermal);
        dev.set_frequency(FrequencyMHz(2000)).unwrap();
        let st = dev.read_throttle_status().unwrap();
        assert!(st.thermal && st.power);
        dev.set_frequency(FrequencyMHz(1000)).unwrap();
        assert!(!dev.read_throttle_status().unwrap().power);
    }

    #[test]
    fn deterministic_under_seed() {
        let mut s = scenario(&[1000, 2000], 1e6);
        s.noise_rel_sigma = 0.02;
        s.thermal_throttle_probability = 0.3;
        let run = |s: SimScenario| {
            let mut dev = SimulatedAccelerator::new(s);
            dev.launch_benchmark(500).unwrap();
            dev.set_frequency(FrequencyMHz(2000)).unwrap();
            let t = dev.wait_for_completion().unwrap().unwrap();
            let flags: Vec<_> = (0..20).map(|_| dev.read_throttle_status().unwrap()).collect();
            (t, flags)
        };
        assert_eq!(run(s.clone()), run(s));
    }

    #[test]
    fn second_launch_in_flight_fails() {
        let mut dev = SimulatedAccelerator::new(scenario(&[1000, 2000], 0.0));
        dev.launch_benchmark(10).unwrap();
        assert!(matches!(dev.launch_benchmark(10), Err(DeviceError::LaunchFailed(_))));
        assert!(matches!(dev.exchange_timestamps(), Err(DeviceError::DeviceUnavailable(_))));
    }

    #[test]
    fn warmup_fast_path_matches_traced_kernel_end() {
        let s = scenario(&[1000, 2000], 300_000.0);
        let mut a = SimulatedAccelerator::new(s.clone());
        let mut b = SimulatedAccelerator::new(s);
        for d in [&mut a, &mut b] {
            d.set_frequency(FrequencyMHz(2000)).unwrap();
        }
        a.run_warmup(500).unwrap();
        b.launch_benchmark(500).unwrap();
        b.wait_for_completion().unwrap();
        assert!((a.host_now().0 - b.host_now().0).abs() <= 1);
    }
}
