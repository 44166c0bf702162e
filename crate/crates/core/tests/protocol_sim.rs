//! Measurement sessions on the simulator, carried through to the analysis
//! products.

use latbench::device::{FrequencyMHz, FrequencyPair, LatencyComponent, SimScenario, SimulatedAccelerator};
use latbench::outliers::DEFAULT_MULT;
use latbench::protocol::{capture_iterations_for, run_session, PairStatus, SessionConfig};
use latbench::report::{
    analyze, cross_device_ranges, filter_pair, heatmap, pair_scatter, summarize, PairDatasetFile,
    PairRow, Statistic,
};

fn freqs(f: &[u32]) -> Vec<FrequencyMHz> {
    f.iter().copied().map(FrequencyMHz).collect()
}

fn two_level_scenario(seed: u64) -> SimScenario {
    let mut s = SimScenario::uniform(&[1000, 2000], 2, 100_000, 1e6)
        .with_latency(1000, 2000, vec![LatencyComponent::fixed(8e6)])
        .with_latency(2000, 1000, vec![LatencyComponent::fixed(3e6)]);
    s.noise_rel_sigma = 0.01;
    s.rng_seed = seed;
    s
}

fn dataset(pair: FrequencyPair, host: &str, latencies: &[i64]) -> PairDatasetFile {
    PairDatasetFile {
        pair,
        hostname: host.into(),
        device_index: 0,
        rows: latencies
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let t_s = 1_000_000_000 * (i as i64 + 1);
                PairRow {
                    repeat_index: i as u64,
                    latency_ns: l,
                    t_s_ns: t_s,
                    t_e_ns: t_s + l,
                    core_id: 0,
                    outlier: None,
                }
            })
            .collect(),
    }
}

#[test]
fn session_heatmap_recovers_planted_step_latencies() {
    let scenario = two_level_scenario(11);
    let mut device = SimulatedAccelerator::new(scenario.clone());
    let config = SessionConfig {
        min_measurements: 30,
        max_measurements: Some(30),
        ..SessionConfig::default()
    };
    let data = run_session(&mut device, &freqs(&[1000, 2000]), &config, |_| {}).unwrap();
    assert_eq!(data.valid_pairs.len(), 2);
    let files: Vec<PairDatasetFile> = data
        .runs
        .iter()
        .map(|r| {
            assert_eq!(r.status, PairStatus::Completed);
            PairDatasetFile::from_measurements(&r.measurements, "sim", 0).unwrap()
        })
        .collect();
    let analysis = analyze(&files, DEFAULT_MULT).unwrap();
    let min = heatmap(&analysis.devices[0], Statistic::Min);
    for (pair, planted) in [(FrequencyPair::new(1000, 2000), 8e6), (FrequencyPair::new(2000, 1000), 3e6)] {
        let iteration = scenario.nominal_iteration_ns(pair.target);
        let got = min.get(pair).unwrap() as f64;
        // Detection lags the switch by at most the in-flight iteration plus
        // one to confirm, and never precedes it by more than clock error.
        assert!(got > planted - 0.2 * iteration, "{pair}: {got} vs {planted}");
        assert!(got < planted + 3.0 * iteration, "{pair}: {got} vs {planted}");
    }
}

#[test]
fn calibration_sizes_capture_from_the_longest_probe() {
    let scenario = two_level_scenario(5);
    let mut device = SimulatedAccelerator::new(scenario.clone());
    let config = SessionConfig {
        min_measurements: 2,
        max_measurements: Some(2),
        ..SessionConfig::default()
    };
    let data = run_session(&mut device, &freqs(&[1000, 2000]), &config, |_| {}).unwrap();
    let cal = data.calibration.expect("calibration enabled by default");
    assert!((cal.longest_latency_ns as f64 - 8e6).abs() < 3.0 * scenario.nominal_iteration_ns(FrequencyMHz(2000)));
    assert_eq!(
        cal.latency_capture_iterations,
        capture_iterations_for(cal.longest_latency_ns as f64, cal.shortest_iteration_ns)
    );
    assert_eq!(data.config.latency_capture_iterations, cal.latency_capture_iterations);
    assert!(data.config.warmup_iterations >= cal.wakeup_iterations + cal.latency_capture_iterations / 2);
}

#[test]
fn cross_device_ranges_equal_constructed_offsets() {
    let pairs = [FrequencyPair::new(900, 1400), FrequencyPair::new(1400, 900)];
    let spread: Vec<i64> = (0..60).map(|i| 1_000 * (i % 10)).collect();
    let device = |host: &str, offset: i64| {
        let filtered: Vec<_> = pairs
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let base = 4_000_000 + 2_000_000 * k as i64 + offset;
                let ls: Vec<i64> = spread.iter().map(|s| base + s).collect();
                filter_pair(&dataset(p, host, &ls), DEFAULT_MULT)
            })
            .collect();
        summarize(&filtered).unwrap()
    };
    let devices = [device("a", 0), device("b", 250_000), device("c", 1_000_000)];
    let (min, max) = cross_device_ranges(&devices).unwrap();
    for p in pairs {
        assert_eq!(min.get(p), Some(1_000_000));
        assert_eq!(max.get(p), Some(1_000_000));
    }
}

#[test]
fn five_component_mixture_yields_five_scatter_clusters() {
    let latencies: Vec<i64> = (0..300)
        .map(|i| 5_000_000 + 3_000_000 * (i % 5) + 2_000 * ((i * 7) % 13))
        .collect();
    let f = filter_pair(&dataset(FrequencyPair::new(705, 1410), "h", &latencies), DEFAULT_MULT);
    let labels: std::collections::BTreeSet<i64> = pair_scatter(&f).iter().map(|r| r.label.as_i64()).collect();
    assert_eq!(labels, (0..5).collect());
    assert!(f.silhouette.unwrap() > 0.9);
}

#[test]
fn mostly_unimodal_suite_reports_single_cluster_fraction() {
    let mut filtered = Vec::new();
    let freqs = [600u32, 800, 1000, 1200, 1400];
    let mut k = 0;
    for &a in &freqs {
        for &b in freqs.iter().filter(|&&b| b != a) {
            // Three of the twenty pairs get a second mode.
            let bimodal = k % 7 == 3;
            let ls: Vec<i64> = (0..120)
                .map(|i| {
                    let mode = if bimodal && i % 2 == 1 { 9_000_000 } else { 0 };
                    3_000_000 + mode + 1_500 * ((i * 11) % 17)
                })
                .collect();
            filtered.push(filter_pair(&dataset(FrequencyPair::new(a, b), "h", &ls), DEFAULT_MULT));
            k += 1;
        }
    }
    let summary = summarize(&filtered).unwrap();
    assert_eq!(summary.pairs.len(), 20);
    assert!((summary.single_cluster_fraction() - 0.85).abs() < 1e-12);
}
