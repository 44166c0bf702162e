//! End-to-end runs of the `bench` and `analyze` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use latbench::cli::{run_with_seed, EXIT_INPUT, EXIT_NO_VALID_PAIRS, EXIT_OK};
use latbench::device::FrequencyPair;
use latbench::protocol::LatencyMeasurement;
use latbench::report::{pair_file_name, write_pair_csv};
use latbench::timebase::DeviceInstant;

fn cli(args: &[&str], seed: Option<&str>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with_seed(
        std::iter::once("latbench").chain(args.iter().copied()),
        seed,
        &mut out,
        &mut err,
    );
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn bench(out: &Path, seed: &str) {
    let (code, stdout, stderr) = cli(
        &["bench", "--freqs", "1350,1260,795", "--out", out.to_str().unwrap(), "--hostname", "node01"],
        Some(seed),
    );
    assert_eq!(code, EXIT_OK, "stdout:\n{stdout}\nstderr:\n{stderr}");
}

#[test]
fn bench_writes_one_file_per_directed_pair() {
    let tmp = tempfile::tempdir().unwrap();
    bench(tmp.path(), "1588");
    let names: Vec<String> = contents(tmp.path()).into_keys().collect();
    let freqs = [795, 1260, 1350];
    let mut expected: Vec<String> = freqs
        .iter()
        .flat_map(|&a| freqs.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
        .map(|(a, b)| pair_file_name(FrequencyPair::new(a, b), "node01", 0))
        .collect();
    expected.sort();
    assert_eq!(names, expected);
}

#[test]
fn analyze_is_idempotent_on_its_own_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (raw, first, second) = (tmp.path().join("raw"), tmp.path().join("a1"), tmp.path().join("a2"));
    bench(&raw, "7");
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    assert_eq!(cli(&["analyze", "--input", &s(&raw), "--out", &s(&first)], None).0, EXIT_OK);
    assert_eq!(cli(&["analyze", "--input", &s(&first), "--out", &s(&second)], None).0, EXIT_OK);
    assert_eq!(contents(&first), contents(&second));
}

#[test]
fn seed_override_changes_the_measurements() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    bench(&a, "1");
    bench(&b, "2");
    let (ca, cb) = (contents(&a), contents(&b));
    assert_eq!(ca.keys().collect::<Vec<_>>(), cb.keys().collect::<Vec<_>>());
    assert_ne!(ca, cb);
}

#[test]
fn small_datasets_are_reported_but_left_unfiltered() {
    let tmp = tempfile::tempdir().unwrap();
    let (raw, out) = (tmp.path().join("raw"), tmp.path().join("out"));
    for (pair, n) in [(FrequencyPair::new(1000, 1500), 30), (FrequencyPair::new(1500, 1000), 80)] {
        let rows: Vec<LatencyMeasurement> = (0..n)
            .map(|i| LatencyMeasurement {
                pair,
                latency: 5_000_000 + 1_000 * (i % 9),
                t_s: DeviceInstant(1_000_000_000 * (i + 1)),
                t_e: DeviceInstant(1_000_000_000 * (i + 1) + 5_000_000),
                core_id: 0,
                repeat_index: i as u64,
            })
            .collect();
        write_pair_csv(&rows, "h", 0, &raw).unwrap();
    }
    let (code, _, stderr) =
        cli(&["analyze", "--input", raw.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code, EXIT_OK);
    assert!(stderr.contains("swlat_1000MHz_to_1500MHz_h_gpu0.csv: 30 rows, outlier filtering skipped"), "{stderr}");
    assert!(!stderr.contains("1500MHz_to_1000MHz_h_gpu0.csv: 80"), "{stderr}");
    let summary = fs::read_to_string(out.join("summary_h_gpu0.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("1000,1500,30,0,1,skipped")), "{summary}");
}

#[test]
fn scenario_file_without_distinguishable_pairs_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/a100_like.toml"))
        .unwrap()
        .replacen(
            "[device.spec]",
            "throughput_aliases = [{ frequency = 1350, runs_at = 1260 }]\n\n[device.spec]",
            1,
        );
    let path = tmp.path().join("aliased.toml");
    fs::write(&path, text).unwrap();
    let out = tmp.path().join("out");
    let (code, _, stderr) = cli(
        &["bench", "--freqs", "1350,1260", "--scenario", path.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code, EXIT_NO_VALID_PAIRS, "{stderr}");
}

#[test]
fn analyze_of_an_empty_directory_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let (code, _, stderr) =
        cli(&["analyze", "--input", tmp.path().to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code, EXIT_INPUT, "{stderr}");
}
