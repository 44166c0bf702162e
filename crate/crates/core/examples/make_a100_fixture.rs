//! Regenerates `fixtures/a100_extremes/`: six pair datasets whose inlier
//! extremes are reference A100 best-case and worst-case latencies,
//! each with one far outlier the filter must remove.
//!
//! Run with `cargo run --example make_a100_fixture [output_dir]`.

use std::path::{Path, PathBuf};

use latbench::device::FrequencyPair;
use latbench::protocol::LatencyMeasurement;
use latbench::report::write_pair_csv;
use latbench::timebase::DeviceInstant;

pub const HOSTNAME: &str = "a100";
pub const INLIERS_PER_PAIR: i64 = 60;

/// (init, target, minimum ns, maximum ns).
pub const PAIRS: [(u32, u32, i64, i64); 6] = [
    (1350, 1260, 4_900_000, 7_413_000),
    (1125, 795, 4_950_000, 22_716_000),
    (1215, 1125, 4_435_000, 15_000_000),
    (840, 705, 5_976_000, 16_000_000),
    (705, 840, 4_881_000, 16_500_000),
    (795, 1215, 4_900_000, 16_193_000),
];

pub fn pair_measurements(init: u32, target: u32, min: i64, max: i64) -> Vec<LatencyMeasurement> {
    let pair = FrequencyPair::new(init, target);
    let span = max - min;
    let mut latencies: Vec<i64> = (0..INLIERS_PER_PAIR)
        .map(|i| min + span * i / (INLIERS_PER_PAIR - 1))
        .collect();
    // Interleave so repeat order is not sorted by value.
    latencies.sort_by_key(|l| (l / 1_000) % 7);
    latencies.insert(INLIERS_PER_PAIR as usize / 2, max + 5 * span);
    latencies
        .into_iter()
        .enumerate()
        .map(|(i, latency)| {
            let t_s = 1_000_000_000 * (i as i64 + 1);
            LatencyMeasurement {
                pair,
                latency,
                t_s: DeviceInstant(t_s),
                t_e: DeviceInstant(t_s + latency),
                core_id: (i % 4) as u32,
                repeat_index: i as u64,
            }
        })
        .collect()
}

pub fn write_fixture(dir: &Path) -> Vec<PathBuf> {
    PAIRS
        .iter()
        .map(|&(a, b, lo, hi)| {
            write_pair_csv(&pair_measurements(a, b, lo, hi), HOSTNAME, 0, dir)
                .expect("fixture directory is writable")
        })
        .collect()
}

#[allow(dead_code)]
fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/a100_extremes"));
    for p in write_fixture(&dir) {
        println!("{}", p.display());
    }
}
