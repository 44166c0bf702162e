//! The committed A100 fixture is exactly what the generator produces, and
//! its analysis yields the reference best-case and worst-case extremes.

#[path = "../examples/make_a100_fixture.rs"]
mod generator;

use std::fs;
use std::path::{Path, PathBuf};

use latbench::device::FrequencyPair;
use latbench::outliers::{FilterStatus, DEFAULT_MULT};
use latbench::report::{analyze, read_dataset_dir};

fn committed() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/a100_extremes")
}

#[test]
fn committed_fixture_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let written = generator::write_fixture(tmp.path());
    assert_eq!(written.len(), generator::PAIRS.len());
    for path in written {
        let name = path.file_name().unwrap();
        let fresh = fs::read(&path).unwrap();
        let stored = fs::read(committed().join(name)).unwrap();
        assert_eq!(fresh, stored, "{} is stale", name.to_string_lossy());
    }
}

#[test]
fn every_planted_outlier_is_removed() {
    let files = read_dataset_dir(&committed()).unwrap();
    let analysis = analyze(&files, DEFAULT_MULT).unwrap();
    for f in &analysis.filtered {
        assert_eq!(f.clustering.status, FilterStatus::Converged, "{}", f.file.file_name());
        assert_eq!(f.clustering.n_outliers(), 1, "{}", f.file.file_name());
    }
    let device = &analysis.devices[0];
    for &(a, b, lo, hi) in &generator::PAIRS {
        let s = device.get(FrequencyPair::new(a, b)).unwrap();
        assert_eq!((s.min, s.max), (lo, hi));
        assert_eq!(s.n, generator::INLIERS_PER_PAIR as usize + 1);
    }
}

#[test]
fn extremes_name_the_witnessing_transitions() {
    let files = read_dataset_dir(&committed()).unwrap();
    let device = &analyze(&files, DEFAULT_MULT).unwrap().devices[0];
    assert_eq!(device.worst.min, 7_413_000);
    assert_eq!(device.worst.min_pair, FrequencyPair::new(1350, 1260));
    assert_eq!(device.worst.max, 22_716_000);
    assert_eq!(device.worst.max_pair, FrequencyPair::new(1125, 795));
    assert_eq!(device.best.min, 4_435_000);
    assert_eq!(device.best.min_pair, FrequencyPair::new(1215, 1125));
    assert_eq!(device.best.max, 5_976_000);
    assert_eq!(device.best.max_pair, FrequencyPair::new(840, 705));
}
