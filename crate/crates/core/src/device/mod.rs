//! The accelerator interface the protocol drives, and a simulated accelerator
//! with planted ground truth.
//!
//! A real backend (NVML clocks plus a CUDA timer kernel) would implement
//! [`Accelerator`]; the crate ships only [`SimulatedAccelerator`], whose
//! frequency trajectories, switching latencies, throttling and outliers are
//! drawn from a [`SimScenario`] and logged so tests can compare what the
//! protocol measured against what actually happened.

mod scenario;
mod sim;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timebase::{DeviceInstant, HostInstant, SyncExchange};

pub use scenario::{
    bundled_scenario, load_scenario, parse_scenario_file, LatencyComponent, LatencyEntry,
    ScenarioError, ScenarioFile, SimScenario, ThroughputAlias, BUNDLED_SCENARIOS,
};
pub use sim::{PlantedSwitch, SimulatedAccelerator};

/// Streaming-multiprocessor clock, MHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrequencyMHz(pub u32);

impl FrequencyMHz {
    pub fn mhz(self) -> u32 {
        self.0
    }
}

impl fmt::Display for FrequencyMHz {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}MHz", self.0)
    }
}

/// An ordered (initial, target) frequency pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrequencyPair {
    pub init: FrequencyMHz,
    pub target: FrequencyMHz,
}

impl FrequencyPair {
    pub fn new(init: u32, target: u32) -> Self {
        FrequencyPair {
            init: FrequencyMHz(init),
            target: FrequencyMHz(target),
        }
    }

    pub fn reversed(self) -> Self {
        FrequencyPair {
            init: self.target,
            target: self.init,
        }
    }

    pub fn is_increasing(self) -> bool {
        self.init < self.target
    }
}

impl fmt::Display for FrequencyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.init.0, self.target.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    #[serde(default)]
    pub index: u32,
    pub core_count: u32,
    pub supported_frequencies: Vec<FrequencyMHz>,
    pub idle_frequency: FrequencyMHz,
    /// Device timer granularity, nanoseconds.
    pub timer_resolution: u64,
}

impl DeviceSpec {
    pub fn supports(&self, f: FrequencyMHz) -> bool {
        self.supported_frequencies.binary_search(&f).is_ok()
    }
}

/// One workload iteration on one core, bracketed by device-timer reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationRecord {
    pub core_id: u32,
    pub start: DeviceInstant,
    pub end: DeviceInstant,
}

impl IterationRecord {
    pub fn duration(&self) -> i64 {
        self.end.0 - self.start.0
    }
}

/// Per-core iteration records of one benchmark kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelTrace {
    pub launch_frequency: FrequencyMHz,
    pub cores: Vec<Vec<IterationRecord>>,
}

impl KernelTrace {
    pub fn iterations_per_core(&self) -> usize {
        self.cores.first().map_or(0, Vec::len)
    }

    /// Durations of every core's records, core by core.
    pub fn pooled_durations(&self) -> Vec<i64> {
        self.cores
            .iter()
            .flat_map(|c| c.iter().map(IterationRecord::duration))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ThrottleStatus {
    pub thermal: bool,
    pub power: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("frequency {0} is not supported by the device")]
    UnsupportedFrequency(FrequencyMHz),
    #[error("device unavailable: {0}")]
    DeviceUnavailable(String),
    #[error("kernel launch failed: {0}")]
    LaunchFailed(String),
    #[error("clock went backwards: {0}")]
    NonMonotonicClock(String),
}

/// What the measurement protocol needs from an accelerator and its host.
///
/// Host time and host sleeps go through the trait so a simulated device can
/// run on a virtual clock.
pub trait Accelerator {
    fn spec(&self) -> &DeviceSpec;

    /// Current host clock reading.
    fn host_now(&self) -> HostInstant;

    /// Host-side sleep.
    fn sleep(&mut self, ns: u64);

    /// One request/reply timestamp exchange with the device timer.
    fn exchange_timestamps(&mut self) -> Result<SyncExchange, DeviceError>;

    /// Dispatches a frequency change; returns once the request is sent, not applied.
    fn set_frequency(&mut self, f: FrequencyMHz) -> Result<(), DeviceError>;

    /// Starts the timestamped workload asynchronously.
    fn launch_benchmark(&mut self, iterations_per_core: u64) -> Result<(), DeviceError>;

    /// Blocks until the in-flight kernel finishes and returns its trace;
    /// `None` when nothing was in flight.
    fn wait_for_completion(&mut self) -> Result<Option<KernelTrace>, DeviceError>;

    fn read_throttle_status(&mut self) -> Result<ThrottleStatus, DeviceError>;

    /// Runs an untimed workload to completion (warm-up). The trace is discarded.
    fn run_warmup(&mut self, iterations_per_core: u64) -> Result<(), DeviceError> {
        self.launch_benchmark(iterations_per_core)?;
        self.wait_for_completion()?;
        Ok(())
    }
}
