//! The `latbench` command line.
//!
//! ```text
//! latbench bench   --freqs 1350,1260,795 [--scenario a100_like] [--out results]
//!                  [--device-index 0] [--rse 0.05] [--min-measurements N]
//!                  [--max-measurements N] [--hostname NAME]
//! latbench analyze --input results [--out analysis] [--mult 0.15]
//! ```
//!
//! Exit codes: 0 success; 1 argument error; 2 scenario or input-file error;
//! 3 no frequency pair with distinguishable baselines; 4 measurement failure
//! (no pair completed, calibration failure, output I/O).
//!
//! `LATBENCH_SEED` overrides the scenario's random seed.

use std::cell::RefCell;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::device::{load_scenario, Accelerator, DeviceError, FrequencyMHz, SimulatedAccelerator};
use crate::outliers::DEFAULT_MULT;
use crate::protocol::{run_session, PairRun, PairStatus, ProtocolError, SessionConfig};
use crate::report::{self, format_ms, sanitize_hostname, ReportError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NO_VALID_PAIRS: i32 = 3;
pub const EXIT_FAILED: i32 = 4;

pub const SEED_ENV: &str = "LATBENCH_SEED";

#[derive(Debug, Parser)]
#[command(name = "latbench", version, about = "Frequency-switching latency measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Measure switching latencies on a scenario-backed simulated device.
    Bench(BenchArgs),
    /// Filter outliers and build summaries from pair CSV files.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Comma-separated list of benchmarked frequencies, MHz.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub freqs: Vec<u32>,
    /// Device block to use from the scenario file.
    #[arg(long, default_value_t = 0)]
    pub device_index: u32,
    /// Relative standard error at which a pair stops.
    #[arg(long, default_value_t = 0.05)]
    pub rse: f64,
    /// Measurements per pair before the RSE check may stop it.
    #[arg(long, visible_alias = "min")]
    pub min_measurements: Option<usize>,
    /// Hard cap on measurements per pair.
    #[arg(long, visible_alias = "max")]
    pub max_measurements: Option<usize>,
    /// Bundled scenario name or path to a scenario file.
    #[arg(long, default_value = "a100_like")]
    pub scenario: String,
    /// Directory for the per-pair CSV files.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Host name used in output file names.
    #[arg(long)]
    pub hostname: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Directory containing swlat_*.csv files.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for summaries, tables and plots.
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
    /// Neighborhood radius as a fraction of the 5-95 % quantile range.
    #[arg(long, default_value_t = DEFAULT_MULT)]
    pub mult: f64,
}

/// Entry point used by the binary: reads `LATBENCH_SEED` from the environment.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let seed = std::env::var(SEED_ENV).ok();
    run_with_seed(args, seed.as_deref(), stdout, stderr)
}

/// [`run`] with the seed override passed explicitly.
pub fn run_with_seed<I, T>(
    args: I,
    seed: Option<&str>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    match cli.command {
        Command::Bench(a) => cmd_bench(&a, seed, stdout, stderr),
        Command::Analyze(a) => cmd_analyze(&a, stdout, stderr),
    }
}

fn default_hostname() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .filter(|h| !h.trim().is_empty())
        .or_else(|| {
            std::fs::read_to_string("/etc/hostname")
                .ok()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
        })
        .unwrap_or_else(|| "localhost".into())
}

fn describe(run: &PairRun) -> String {
    let rse = run
        .final_rse()
        .map_or_else(|| "n/a".to_string(), |r| format!("{r:.4}"));
    let status = match &run.status {
        PairStatus::Completed => "completed".to_string(),
        PairStatus::SkippedPowerThrottle => "skipped: power throttling".to_string(),
        PairStatus::Aborted(why) => format!("aborted: {why}"),
    };
    let thermal = if run.thermal_events.is_empty() {
        String::new()
    } else {
        format!(", {} thermal back-offs", run.thermal_events.len())
    };
    format!(
        "pair {}: {} measurements, rse {rse}, {} retries{thermal}, {status}",
        run.pair,
        run.measurements.len(),
        run.retries
    )
}

pub fn cmd_bench(
    args: &BenchArgs,
    seed: Option<&str>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let mut freqs = args.freqs.clone();
    freqs.sort();
    freqs.dedup();
    if freqs.len() < 2 {
        let _ = writeln!(stderr, "error: --freqs needs at least two distinct frequencies");
        return EXIT_USAGE;
    }
    if !(args.rse > 0.0 && args.rse < 1.0) {
        let _ = writeln!(stderr, "error: --rse must lie strictly between 0 and 1");
        return EXIT_USAGE;
    }
    if let (Some(lo), Some(hi)) = (args.min_measurements, args.max_measurements) {
        if lo > hi {
            let _ = writeln!(stderr, "error: --min-measurements exceeds --max-measurements");
            return EXIT_USAGE;
        }
    }
    let seed = match seed.map(str::parse::<u64>) {
        None => None,
        Some(Ok(s)) => Some(s),
        Some(Err(_)) => {
            let _ = writeln!(stderr, "error: {SEED_ENV} must be an unsigned integer");
            return EXIT_USAGE;
        }
    };
    let mut scenario = match load_scenario(&args.scenario, args.device_index) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_INPUT;
        }
    };
    if let Some(s) = seed {
        scenario.rng_seed = s;
    }
    let freqs: Vec<FrequencyMHz> = freqs.into_iter().map(FrequencyMHz).collect();
    if let Some(f) = freqs.iter().find(|f| !scenario.spec.supports(**f)) {
        let _ = writeln!(
            stderr,
            "error: {f} is not supported by {} (supported: {})",
            scenario.spec.name,
            scenario
                .spec
                .supported_frequencies
                .iter()
                .map(|f| f.0.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        return EXIT_USAGE;
    }
    let hostname = sanitize_hostname(&args.hostname.clone().unwrap_or_else(default_hostname));
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        let _ = writeln!(stderr, "error: {}: {e}", args.out.display());
        return EXIT_FAILED;
    }

    let config = SessionConfig {
        rse_threshold: args.rse,
        min_measurements: args.min_measurements.unwrap_or(0),
        max_measurements: args.max_measurements,
        ..SessionConfig::default()
    };
    let mut device = SimulatedAccelerator::new(scenario);
    let device_index = device.spec().index;
    let _ = writeln!(
        stdout,
        "device {} (gpu{device_index}), host {hostname}, frequencies {}",
        device.spec().name,
        freqs.iter().map(|f| f.0.to_string()).collect::<Vec<_>>().join(",")
    );

    let out_dir: &Path = &args.out;
    let write_error: RefCell<Option<ReportError>> = RefCell::new(None);
    let progress: RefCell<Vec<String>> = RefCell::new(Vec::new());
    let result = run_session(&mut device, &freqs, &config, |run| {
        progress.borrow_mut().push(describe(run));
        if run.measurements.is_empty() || write_error.borrow().is_some() {
            return;
        }
        if let Err(e) = report::write_pair_csv(&run.measurements, &hostname, device_index, out_dir) {
            *write_error.borrow_mut() = Some(e);
        }
    });
    for line in progress.into_inner() {
        let _ = writeln!(stdout, "{line}");
    }
    let dataset = match result {
        Ok(d) => d,
        Err(ProtocolError::NoValidPairs) => {
            let _ = writeln!(stderr, "error: no frequency pair has distinguishable baselines");
            return EXIT_NO_VALID_PAIRS;
        }
        Err(ProtocolError::Device(DeviceError::UnsupportedFrequency(f))) => {
            let _ = writeln!(stderr, "error: {f} is not supported by the device");
            return EXIT_USAGE;
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_FAILED;
        }
    };
    if let Some(e) = write_error.into_inner() {
        let _ = writeln!(stderr, "error: {e}");
        return EXIT_FAILED;
    }
    if let Some(c) = &dataset.calibration {
        let _ = writeln!(
            stdout,
            "calibration: wake-up {} iterations, capture {} iterations (longest probe {} ms)",
            c.wakeup_iterations,
            c.latency_capture_iterations,
            format_ms(c.longest_latency_ns as f64)
        );
    }
    for p in &dataset.excluded_pairs {
        let _ = writeln!(stdout, "pair {p}: excluded, baselines not distinguishable");
    }
    let completed = dataset
        .runs
        .iter()
        .filter(|r| r.status == PairStatus::Completed)
        .count();
    let _ = writeln!(
        stdout,
        "{completed} of {} pairs completed, output in {}",
        dataset.runs.len(),
        out_dir.display()
    );
    if completed == 0 {
        EXIT_FAILED
    } else {
        EXIT_OK
    }
}

pub fn cmd_analyze(args: &AnalyzeArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    if !(args.mult > 0.0 && args.mult.is_finite()) {
        let _ = writeln!(stderr, "error: --mult must be positive");
        return EXIT_USAGE;
    }
    let files = match report::read_dataset_dir(&args.input) {
        Ok(f) => f,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_INPUT;
        }
    };
    if files.is_empty() {
        let _ = writeln!(stderr, "error: no swlat_*.csv files in {}", args.input.display());
        return EXIT_INPUT;
    }
    let analysis = match report::analyze(&files, args.mult) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_INPUT;
        }
    };
    for w in &analysis.warnings {
        let _ = writeln!(stderr, "warning: {w}");
    }
    if let Err(e) = report::write_analysis(&analysis, &args.out) {
        let _ = writeln!(stderr, "error: {e}");
        return EXIT_FAILED;
    }
    for d in &analysis.devices {
        let _ = writeln!(stdout, "{} gpu{}: {} pairs", d.hostname, d.device_index, d.pairs.len());
        for (name, g) in [("worst", &d.worst), ("best", &d.best)] {
            let _ = writeln!(
                stdout,
                "  {name}-case: min {} ms ({}), mean {} ms, max {} ms ({})",
                format_ms(g.min as f64),
                g.min_pair,
                format_ms(g.mean),
                format_ms(g.max as f64),
                g.max_pair
            );
        }
    }
    let _ = writeln!(stdout, "analysis written to {}", args.out.display());
    EXIT_OK
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with_seed(
            std::iter::once("latbench").chain(args.iter().copied()),
            None,
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn help_and_version_succeed() {
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
        assert_eq!(run_args(&["--version"]).0, EXIT_OK);
    }

    #[test]
    fn argument_errors() {
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
        assert_eq!(run_args(&["bench"]).0, EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run_args(&["bench", "--freqs", "1350", "--out", out]).0, EXIT_USAGE);
        assert_eq!(run_args(&["bench", "--freqs", "1350,1350", "--out", out]).0, EXIT_USAGE);
        assert_eq!(run_args(&["bench", "--freqs", "1350,999", "--out", out]).0, EXIT_USAGE);
        assert_eq!(run_args(&["bench", "--freqs", "1350,795", "--rse", "0", "--out", out]).0, EXIT_USAGE);
        assert_eq!(run_args(&["bench", "--freqs", "x,1", "--out", out]).0, EXIT_USAGE);
    }

    #[test]
    fn scenario_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let (code, _, err) = run_args(&["bench", "--freqs", "1350,795", "--scenario", "/nonexistent.toml", "--out", out]);
        assert_eq!(code, EXIT_INPUT, "{err}");
        let (code, _, _) = run_args(&["bench", "--freqs", "1350,795", "--device-index", "7", "--out", out]);
        assert_eq!(code, EXIT_INPUT);
    }

    #[test]
    fn analyze_reports_missing_and_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().to_str().unwrap();
        assert_eq!(run_args(&["analyze", "--input", p, "--out", p]).0, EXIT_INPUT);
        std::fs::write(
            dir.path().join("swlat_1MHz_to_2MHz_h_gpu0.csv"),
            "# latbench-format v1\n# init_mhz=1 target_mhz=2 hostname=h device_index=0\nrepeat_index,latency_ns,t_s_ns,t_e_ns,core_id,outlier\n0,1,2\n",
        )
        .unwrap();
        let (code, _, err) = run_args(&["analyze", "--input", p, "--out", p]);
        assert_eq!(code, EXIT_INPUT);
        assert!(err.contains("swlat_1MHz_to_2MHz_h_gpu0.csv:4"), "{err}");
    }
}
