//! The three-phase switching-latency methodology.
//!
//! 1. **Baselines.** The workload runs under every benchmarked frequency; the
//!    last kernel's iteration durations, pooled over cores, give each
//!    frequency's mean and spread. Pairs whose mean difference is not
//!    statistically distinguishable are dropped.
//! 2. **Switch capture.** Per repetition: synchronize clocks, settle at the
//!    initial frequency, launch a long kernel, sleep through the delay period,
//!    timestamp and issue the target frequency change, wait.
//! 3. **Evaluation.** Per core, the first iteration after the request whose
//!    duration lies in the target's two-sigma band marks `t_e`, provided the
//!    rest of the core's iterations are statistically indistinguishable from
//!    the target baseline. The pair latency is the maximum `t_e - t_s` over
//!    accepted cores; if no core is accepted the repetition is retried.
//!
//! [`run_pair`] repeats phases two and three until the relative standard
//! error of the collected latencies drops below the threshold, checking it
//! every 25 measurements and the throttle reasons every 5 passes.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::device::{Accelerator, DeviceError, DeviceSpec, FrequencyMHz, IterationRecord};
use crate::stats::{
    self, diff_confidence_interval, excludes_zero, sample_stats, two_sigma_band, SampleStats,
    StatsError,
};
use crate::timebase::{host_to_device, synchronize_clocks, DeviceInstant, HostInstant};

pub use crate::device::FrequencyPair;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("no frequency pair has distinguishable baselines")]
    NoValidPairs,
    #[error("invalid frequency list: {0}")]
    InvalidFrequencies(String),
    #[error("no baseline for {0}")]
    MissingBaseline(FrequencyMHz),
}

/// Phase-one result for one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    /// Statistics used for detection; the spread is floored at the timer resolution.
    pub stats: SampleStats,
    /// Statistics as measured.
    pub raw: SampleStats,
    /// Durations of the last kernel, all cores.
    pub tail: Vec<i64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineTable {
    entries: BTreeMap<FrequencyMHz, Baseline>,
}

impl BaselineTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the baseline for `f` from last-kernel durations.
    pub fn insert_durations(
        &mut self,
        f: FrequencyMHz,
        durations: Vec<i64>,
        timer_resolution: u64,
    ) -> Result<(), StatsError> {
        let raw = sample_stats(&durations)?;
        let stats = raw.with_stddev_floor(timer_resolution as f64);
        self.entries.insert(
            f,
            Baseline {
                stats,
                raw,
                tail: durations,
            },
        );
        Ok(())
    }

    pub fn get(&self, f: FrequencyMHz) -> Option<&Baseline> {
        self.entries.get(&f)
    }

    fn require(&self, f: FrequencyMHz) -> Result<&Baseline, ProtocolError> {
        self.get(f).ok_or(ProtocolError::MissingBaseline(f))
    }

    pub fn frequencies(&self) -> impl Iterator<Item = FrequencyMHz> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FrequencyMHz, &Baseline)> + '_ {
        self.entries.iter().map(|(f, b)| (*f, b))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One switching-latency sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyMeasurement {
    pub pair: FrequencyPair,
    /// `t_e - t_s`, nanoseconds.
    pub latency: i64,
    pub t_s: DeviceInstant,
    pub t_e: DeviceInstant,
    /// Core that produced the maximum.
    pub core_id: u32,
    pub repeat_index: u64,
}

/// Threshold under which a post-switch mean counts as matching the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    /// Fraction of the target baseline mean.
    Relative(f64),
    /// Nanoseconds.
    Absolute(f64),
}

impl Tolerance {
    pub fn resolve(self, target_mean: f64) -> f64 {
        match self {
            Tolerance::Relative(frac) => frac * target_mean.abs(),
            Tolerance::Absolute(ns) => ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    /// Kernels per frequency in the wake-up series; the last is the reference.
    pub kernels: u32,
    pub iterations: u64,
    /// Capture window of the first latency probe, iterations.
    pub initial_capture_iterations: u64,
    /// Tenfold window extensions allowed per probe before giving up.
    pub max_escalations: u32,
    /// Pairs to probe; `None` picks low, middle and high levels.
    pub probe_pairs: Option<Vec<FrequencyPair>>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            kernels: 4,
            iterations: 2_000,
            initial_capture_iterations: 2_000,
            max_escalations: 3,
            probe_pairs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub rse_threshold: f64,
    pub min_measurements: usize,
    pub max_measurements: Option<usize>,
    /// Iterations run at the initial frequency before the change request.
    pub delay_iterations: u64,
    /// Iterations kept after the capture window for target identification;
    /// also the per-core length of the baseline kernel.
    pub tail_iterations: u64,
    pub latency_capture_iterations: u64,
    pub warmup_kernels: u32,
    pub warmup_iterations: u64,
    pub tolerance: Tolerance,
    pub rse_check_stride: usize,
    pub throttle_check_stride: usize,
    pub thermal_backoff_ns: u64,
    pub thermal_discard: usize,
    pub sync_rounds: u32,
    /// Retries of one repetition slot before the pair is aborted.
    pub max_retries: u32,
    /// Run workload calibration in [`run_session`] and overwrite the capture
    /// and warm-up lengths with its results.
    pub calibrate: bool,
    pub calibration: CalibrationConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            rse_threshold: 0.05,
            min_measurements: 0,
            max_measurements: None,
            delay_iterations: 500,
            tail_iterations: 500,
            latency_capture_iterations: 4_000,
            warmup_kernels: 1,
            warmup_iterations: 2_000,
            tolerance: Tolerance::Relative(0.01),
            rse_check_stride: 25,
            throttle_check_stride: 5,
            thermal_backoff_ns: 10_000_000_000,
            thermal_discard: 5,
            sync_rounds: 64,
            max_retries: 10,
            calibrate: true,
            calibration: CalibrationConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn kernel_iterations(&self) -> u64 {
        self.delay_iterations + self.latency_capture_iterations + self.tail_iterations
    }
}

/// Outcome of one phase-two/three repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchOutcome {
    Measured(LatencyMeasurement),
    /// No core produced an accepted transition; the repetition must be redone.
    Retry { cores_in_band: u32 },
}

/// First index `>= from` whose duration is strictly inside the target's
/// two-sigma band, provided the records from there on match the target mean.
///
/// Returns `Err(true)` when an in-band record was found but rejected, and
/// `Err(false)` when none was found.
fn first_stable_index(
    records: &[IterationRecord],
    from: usize,
    target: &SampleStats,
    tol: f64,
) -> Result<usize, bool> {
    let band = two_sigma_band(target);
    let hit = records[from.min(records.len())..]
        .iter()
        .position(|r| band.strictly_contains(r.duration() as f64))
        .map(|k| k + from)
        .ok_or(false)?;
    let rest: Vec<i64> = records[hit..].iter().map(IterationRecord::duration).collect();
    let Ok(tail) = sample_stats(&rest) else {
        return Err(true);
    };
    let ci = diff_confidence_interval(&tail, target);
    if !excludes_zero(&ci) || (tail.mean - target.mean).abs() < tol {
        Ok(hit)
    } else {
        Err(true)
    }
}

/// Phase three for one core: the end timestamp of the first accepted
/// target-frequency iteration at or after `t_s`.
pub fn evaluate_core(
    records: &[IterationRecord],
    t_s: DeviceInstant,
    target: &SampleStats,
    tol: f64,
) -> Option<DeviceInstant> {
    let from = records.partition_point(|r| r.start < t_s);
    first_stable_index(records, from, target, tol)
        .ok()
        .map(|i| records[i].end)
}

/// One full switching-latency repetition for `pair`.
pub fn measure_switch_once<A: Accelerator + ?Sized>(
    device: &mut A,
    pair: FrequencyPair,
    baselines: &BaselineTable,
    config: &SessionConfig,
) -> Result<SwitchOutcome, ProtocolError> {
    let init = baselines.require(pair.init)?;
    let target = baselines.require(pair.target)?;
    let tol = config.tolerance.resolve(target.stats.mean);

    let sync = synchronize_clocks(device, config.sync_rounds)?;
    device.set_frequency(pair.init)?;
    for _ in 0..config.warmup_kernels {
        device.run_warmup(config.warmup_iterations)?;
    }
    device.launch_benchmark(config.kernel_iterations())?;
    let delay = (config.delay_iterations as f64 * init.stats.mean).round().max(0.0) as u64;
    device.sleep(delay);
    let t_s = host_to_device(device.host_now(), &sync);
    device.set_frequency(pair.target)?;
    let trace = device
        .wait_for_completion()?
        .ok_or_else(|| DeviceError::LaunchFailed("no trace after launch".into()))?;

    let mut best: Option<(i64, DeviceInstant, u32)> = None;
    let mut in_band = 0u32;
    for (core, records) in trace.cores.iter().enumerate() {
        let from = records.partition_point(|r| r.start < t_s);
        match first_stable_index(records, from, &target.stats, tol) {
            Ok(i) => {
                let t_e = records[i].end;
                let latency = t_e.0 - t_s.0;
                in_band += 1;
                if best.is_none_or(|(l, _, _)| latency > l) {
                    best = Some((latency, t_e, core as u32));
                }
            }
            Err(found) => in_band += found as u32,
        }
    }
    Ok(match best {
        Some((latency, t_e, core_id)) => SwitchOutcome::Measured(LatencyMeasurement {
            pair,
            latency,
            t_s,
            t_e,
            core_id,
            repeat_index: 0,
        }),
        None => SwitchOutcome::Retry {
            cores_in_band: in_band,
        },
    })
}

/// Phase one: per-frequency baselines from the last kernel.
pub fn measure_baselines<A: Accelerator + ?Sized>(
    device: &mut A,
    frequencies: &[FrequencyMHz],
    config: &SessionConfig,
) -> Result<BaselineTable, ProtocolError> {
    if frequencies.is_empty() {
        return Err(ProtocolError::InvalidFrequencies("empty".into()));
    }
    let resolution = device.spec().timer_resolution;
    let mut table = BaselineTable::new();
    for &f in frequencies {
        device.set_frequency(f)?;
        for _ in 0..config.warmup_kernels {
            device.run_warmup(config.warmup_iterations)?;
        }
        device.launch_benchmark(config.tail_iterations.max(2))?;
        let trace = device
            .wait_for_completion()?
            .ok_or_else(|| DeviceError::LaunchFailed("no trace after launch".into()))?;
        table.insert_durations(f, trace.pooled_durations(), resolution)?;
    }
    Ok(table)
}

/// Splits all ordered pairs of the table into (distinguishable, excluded).
pub fn partition_pairs(baselines: &BaselineTable) -> (Vec<FrequencyPair>, Vec<FrequencyPair>) {
    let mut valid = Vec::new();
    let mut excluded = Vec::new();
    for (a, ba) in baselines.iter() {
        for (b, bb) in baselines.iter() {
            if a == b {
                continue;
            }
            let pair = FrequencyPair { init: a, target: b };
            if excludes_zero(&diff_confidence_interval(&ba.stats, &bb.stats)) {
                valid.push(pair);
            } else {
                excluded.push(pair);
            }
        }
    }
    (valid, excluded)
}

/// Ordered pairs whose baseline means differ significantly.
pub fn select_valid_pairs(baselines: &BaselineTable) -> Result<Vec<FrequencyPair>, ProtocolError> {
    let (valid, _) = partition_pairs(baselines);
    if valid.is_empty() {
        Err(ProtocolError::NoValidPairs)
    } else {
        Ok(valid)
    }
}

/// Iterations needed to cover ten times `longest_latency_ns`.
pub fn capture_iterations_for(longest_latency_ns: f64, iteration_ns: f64) -> u64 {
    let x = 10.0 * longest_latency_ns / iteration_ns;
    (x - 1e-9).ceil().max(1.0) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub pair: FrequencyPair,
    /// Capture attempts made, including the successful one.
    pub attempts: u32,
    pub capture_iterations: u64,
    pub latency_ns: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub wakeup_iterations: u64,
    pub latency_capture_iterations: u64,
    pub longest_latency_ns: i64,
    /// Shortest last-kernel mean iteration duration among the calibrated frequencies.
    pub shortest_iteration_ns: f64,
    pub probes: Vec<ProbeResult>,
}

/// Low/high/middle probe pairs drawn from `frequencies`.
pub fn default_probe_pairs(frequencies: &[FrequencyMHz]) -> Vec<FrequencyPair> {
    let mut f = frequencies.to_vec();
    f.sort();
    f.dedup();
    match f.len() {
        0 | 1 => Vec::new(),
        2 => vec![
            FrequencyPair { init: f[0], target: f[1] },
            FrequencyPair { init: f[1], target: f[0] },
        ],
        n => {
            let (lo, mid, hi) = (f[0], f[n / 2], f[n - 1]);
            vec![
                FrequencyPair { init: lo, target: hi },
                FrequencyPair { init: hi, target: mid },
                FrequencyPair { init: mid, target: lo },
            ]
        }
    }
}

/// Sizes the workload: wake-up iterations and the latency capture window.
pub fn calibrate_workload<A: Accelerator + ?Sized>(
    device: &mut A,
    frequencies: &[FrequencyMHz],
    probe_pairs: &[FrequencyPair],
    config: &SessionConfig,
) -> Result<Calibration, ProtocolError> {
    let cal = &config.calibration;
    let kernels = cal.kernels.max(2) as usize;
    let resolution = device.spec().timer_resolution;
    let mut mini = BaselineTable::new();
    let mut wakeup = 0u64;

    for &f in frequencies {
        device.set_frequency(f)?;
        let mut traces = Vec::with_capacity(kernels);
        for _ in 0..kernels {
            device.launch_benchmark(cal.iterations.max(2))?;
            traces.push(
                device
                    .wait_for_completion()?
                    .ok_or_else(|| DeviceError::LaunchFailed("no trace after launch".into()))?,
            );
        }
        let reference = traces.last().expect("kernels >= 2");
        mini.insert_durations(f, reference.pooled_durations(), resolution)?;
        let stats = mini.require(f)?.stats;
        let tol = config.tolerance.resolve(stats.mean);

        let mut settled = (kernels as u64 - 1) * cal.iterations;
        for (k, trace) in traces[..kernels - 1].iter().enumerate() {
            let per_core: Option<Vec<usize>> = trace
                .cores
                .iter()
                .map(|c| first_stable_index(c, 0, &stats, tol).ok())
                .collect();
            if let Some(idx) = per_core {
                settled = k as u64 * cal.iterations
                    + idx.into_iter().max().unwrap_or(0) as u64;
                break;
            }
        }
        wakeup = wakeup.max(settled);
    }

    let shortest = mini
        .iter()
        .map(|(_, b)| b.stats.mean)
        .fold(f64::INFINITY, f64::min);

    let mut probes = Vec::with_capacity(probe_pairs.len());
    for &pair in probe_pairs {
        if mini.get(pair.init).is_none() || mini.get(pair.target).is_none() {
            return Err(ProtocolError::InvalidFrequencies(format!(
                "probe pair {pair} uses a frequency outside the calibrated set"
            )));
        }
        let mut capture = cal.initial_capture_iterations.max(1);
        let mut attempts = 0u32;
        let latency = loop {
            attempts += 1;
            let probe_config = SessionConfig {
                latency_capture_iterations: capture,
                warmup_iterations: config.warmup_iterations.max(wakeup + capture),
                ..config.clone()
            };
            match measure_switch_once(device, pair, &mini, &probe_config)? {
                SwitchOutcome::Measured(m) => break m.latency,
                SwitchOutcome::Retry { .. } if attempts > cal.max_escalations => {
                    return Err(ProtocolError::CalibrationFailed(format!(
                        "pair {pair}: switch not captured with {capture} iterations after {} tenfold extensions",
                        cal.max_escalations
                    )));
                }
                SwitchOutcome::Retry { .. } => capture = capture.saturating_mul(10),
            }
        };
        probes.push(ProbeResult {
            pair,
            attempts,
            capture_iterations: capture,
            latency_ns: latency,
        });
    }

    let longest = probes.iter().map(|p| p.latency_ns).max().unwrap_or(0);
    let capture = if probes.is_empty() {
        config.latency_capture_iterations
    } else {
        capture_iterations_for(longest as f64, shortest)
    };
    Ok(Calibration {
        wakeup_iterations: wakeup,
        latency_capture_iterations: capture,
        longest_latency_ns: longest,
        shortest_iteration_ns: shortest,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairStatus {
    Completed,
    /// Power throttling was reported; measurements so far are kept.
    SkippedPowerThrottle,
    Aborted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThermalEvent {
    /// Pass count at which the throttle was observed.
    pub pass: usize,
    pub discarded: usize,
    pub backoff_start: HostInstant,
    pub backoff_end: HostInstant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RseCheck {
    pub measurements: usize,
    pub rse: f64,
}

/// All repetitions of one frequency pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRun {
    pub pair: FrequencyPair,
    pub measurements: Vec<LatencyMeasurement>,
    pub status: PairStatus,
    pub passes: usize,
    pub retries: u32,
    pub thermal_events: Vec<ThermalEvent>,
    pub rse_checks: Vec<RseCheck>,
}

impl PairRun {
    pub fn latencies(&self) -> Vec<i64> {
        self.measurements.iter().map(|m| m.latency).collect()
    }

    pub fn final_rse(&self) -> Option<f64> {
        self.rse_checks.last().map(|c| c.rse)
    }
}

fn latency_rse(latencies: &[i64]) -> Result<f64, StatsError> {
    match stats::relative_standard_error(latencies) {
        // Non-negative latencies with zero mean are all zero.
        Err(StatsError::ZeroMean) => Ok(0.0),
        other => other,
    }
}

/// Repeats the switch measurement for `pair` under RSE and throttle control.
pub fn run_pair<A: Accelerator + ?Sized>(
    device: &mut A,
    pair: FrequencyPair,
    baselines: &BaselineTable,
    config: &SessionConfig,
) -> Result<PairRun, ProtocolError> {
    let mut run = PairRun {
        pair,
        measurements: Vec::new(),
        status: PairStatus::Completed,
        passes: 0,
        retries: 0,
        thermal_events: Vec::new(),
        rse_checks: Vec::new(),
    };
    let throttle_stride = config.throttle_check_stride.max(1);
    let rse_stride = config.rse_check_stride.max(1);
    let mut next_index = 0u64;

    loop {
        if config
            .max_measurements
            .is_some_and(|max| run.measurements.len() >= max)
        {
            break;
        }

        let mut slot_retries = 0u32;
        let mut measurement = loop {
            match measure_switch_once(device, pair, baselines, config)? {
                SwitchOutcome::Measured(m) => break m,
                SwitchOutcome::Retry { cores_in_band } => {
                    run.retries += 1;
                    slot_retries += 1;
                    if slot_retries > config.max_retries {
                        run.status = PairStatus::Aborted(format!(
                            "repetition {next_index}: no accepted transition after {} retries \
                             ({cores_in_band} cores reached the target band on the last attempt)",
                            config.max_retries
                        ));
                        return Ok(run);
                    }
                }
            }
        };
        measurement.repeat_index = next_index;
        next_index += 1;
        run.measurements.push(measurement);
        run.passes += 1;

        if run.passes.is_multiple_of(throttle_stride) {
            let status = device.read_throttle_status()?;
            if status.power {
                run.status = PairStatus::SkippedPowerThrottle;
                return Ok(run);
            }
            if status.thermal {
                let keep = run.measurements.len().saturating_sub(config.thermal_discard);
                let discarded = run.measurements.len() - keep;
                run.measurements.truncate(keep);
                let backoff_start = device.host_now();
                device.sleep(config.thermal_backoff_ns);
                run.thermal_events.push(ThermalEvent {
                    pass: run.passes,
                    discarded,
                    backoff_start,
                    backoff_end: device.host_now(),
                });
            }
        }

        let n = run.measurements.len();
        if n >= 2 && n >= config.min_measurements && n.is_multiple_of(rse_stride) {
            let rse = latency_rse(&run.latencies())?;
            run.rse_checks.push(RseCheck {
                measurements: n,
                rse,
            });
            if rse < config.rse_threshold {
                break;
            }
        }
    }
    Ok(run)
}

/// Everything a session produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    pub device: DeviceSpec,
    /// The configuration after calibration results were applied.
    pub config: SessionConfig,
    pub calibration: Option<Calibration>,
    pub baselines: BaselineTable,
    pub valid_pairs: Vec<FrequencyPair>,
    pub excluded_pairs: Vec<FrequencyPair>,
    pub runs: Vec<PairRun>,
}

/// Calibrate, measure baselines, select pairs and measure every valid pair.
///
/// `on_pair` is called after each pair finishes, before the next starts.
pub fn run_session<A: Accelerator + ?Sized>(
    device: &mut A,
    frequencies: &[FrequencyMHz],
    config: &SessionConfig,
    mut on_pair: impl FnMut(&PairRun),
) -> Result<SessionDataset, ProtocolError> {
    let mut freqs = frequencies.to_vec();
    freqs.sort();
    freqs.dedup();
    if freqs.len() < 2 {
        return Err(ProtocolError::InvalidFrequencies(
            "at least two distinct frequencies are required".into(),
        ));
    }
    if let Some(f) = freqs.iter().find(|f| !device.spec().supports(**f)) {
        return Err(DeviceError::UnsupportedFrequency(*f).into());
    }

    let mut config = config.clone();
    let calibration = if config.calibrate {
        let probes = config
            .calibration
            .probe_pairs
            .clone()
            .unwrap_or_else(|| default_probe_pairs(&freqs));
        let cal = calibrate_workload(device, &freqs, &probes, &config)?;
        config.latency_capture_iterations = cal.latency_capture_iterations;
        config.warmup_iterations = config
            .warmup_iterations
            .max(cal.wakeup_iterations + cal.latency_capture_iterations / 2);
        Some(cal)
    } else {
        None
    };

    let baselines = measure_baselines(device, &freqs, &config)?;
    let (valid, excluded) = partition_pairs(&baselines);
    if valid.is_empty() {
        return Err(ProtocolError::NoValidPairs);
    }
    let mut runs = Vec::with_capacity(valid.len());
    for &pair in &valid {
        let run = run_pair(device, pair, &baselines, &config)?;
        on_pair(&run);
        runs.push(run);
    }
    Ok(SessionDataset {
        device: device.spec().clone(),
        config,
        calibration,
        baselines,
        valid_pairs: valid,
        excluded_pairs: excluded,
        runs,
    })
}
