//! Measurement of accelerator frequency-switching latency.
//!
//! The crate pairs a statistical measurement protocol with a discrete-event
//! simulated accelerator so that every step can be checked against planted
//! ground truth:
//!
//! - [`timebase`] aligns host and device clocks from timestamp exchanges.
//! - [`device`] defines the [`device::Accelerator`] interface and the
//!   scenario-driven [`device::SimulatedAccelerator`].
//! - [`stats`] holds the sample statistics behind every protocol decision.
//! - [`protocol`] runs calibration, baselines, switch capture and evaluation.
//! - [`outliers`] filters latency samples with adaptive 1-D DBSCAN.
//! - [`report`] writes and reads pair CSVs and produces summaries, heatmaps,
//!   direction groups and cross-device ranges.
//! - [`cli`] implements the `latbench` command.

pub mod cli;
pub mod device;
pub mod outliers;
pub mod protocol;
pub mod report;
pub mod stats;
pub mod timebase;

/// Guide chapters, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/clock-sync.md")]
    mod clock_sync {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/outliers.md")]
    mod outliers {}
    #[doc = include_str!("../../../book/src/reporting.md")]
    mod reporting {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
