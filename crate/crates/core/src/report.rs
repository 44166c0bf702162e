//! Dataset persistence and analysis artifacts.
//!
//! Every file starts with the version line `# latbench-format v1`. Durations
//! are stored as integer nanoseconds; tables present milliseconds with three
//! decimals, rounded from whole microseconds.
//!
//! Per-pair measurement files are named
//! `swlat_<init>MHz_to_<target>MHz_<hostname>_gpu<index>.csv` and repeat the
//! same fields in a header comment, which is authoritative when reading.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::device::{FrequencyMHz, FrequencyPair};
use crate::outliers::{
    adaptive_outlier_filter, silhouette_score, ClusteredDataset, FilterStatus, Label,
};
use crate::protocol::LatencyMeasurement;
use crate::timebase::DeviceInstant;

pub const FORMAT_HEADER: &str = "# latbench-format v1";
pub const PAIR_COLUMNS: &str = "repeat_index,latency_ns,t_s_ns,t_e_ns,core_id,outlier";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no measurements to write")]
    EmptyMeasurements,
    #[error("measurements belong to more than one frequency pair")]
    MixedPairs,
    #[error("hostname {0:?} must be non-empty and use only letters, digits, '.' and '-'")]
    InvalidHostname(String),
    #[error("no datasets to summarize")]
    NoDatasets,
    #[error("frequency axes differ between devices: {0}")]
    AxisMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Milliseconds with three decimals, from nanoseconds rounded to the microsecond.
pub fn format_ms(ns: f64) -> String {
    let us = (ns / 1_000.0).round() as i64;
    let sign = if us < 0 { "-" } else { "" };
    let us = us.unsigned_abs();
    format!("{sign}{}.{:03}", us / 1_000, us % 1_000)
}

/// Replaces characters the file-name template cannot carry with `-`.
pub fn sanitize_hostname(raw: &str) -> String {
    let s: String = raw
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' })
        .collect();
    if s.is_empty() {
        "localhost".into()
    } else {
        s
    }
}

fn check_hostname(h: &str) -> Result<(), ReportError> {
    if !h.is_empty() && h.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-') {
        Ok(())
    } else {
        Err(ReportError::InvalidHostname(h.into()))
    }
}

fn device_suffix(hostname: &str, device_index: u32) -> String {
    format!("{hostname}_gpu{device_index}")
}

pub fn pair_file_name(pair: FrequencyPair, hostname: &str, device_index: u32) -> String {
    format!(
        "swlat_{}MHz_to_{}MHz_{}.csv",
        pair.init.0,
        pair.target.0,
        device_suffix(hostname, device_index)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRow {
    pub repeat_index: u64,
    pub latency_ns: i64,
    pub t_s_ns: i64,
    pub t_e_ns: i64,
    pub core_id: u32,
    /// Set by analysis; `None` in freshly measured files.
    pub outlier: Option<bool>,
}

/// Contents of one per-pair measurement file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairDatasetFile {
    pub pair: FrequencyPair,
    pub hostname: String,
    pub device_index: u32,
    pub rows: Vec<PairRow>,
}

impl PairDatasetFile {
    pub fn from_measurements(
        measurements: &[LatencyMeasurement],
        hostname: &str,
        device_index: u32,
    ) -> Result<Self, ReportError> {
        let first = measurements.first().ok_or(ReportError::EmptyMeasurements)?;
        if measurements.iter().any(|m| m.pair != first.pair) {
            return Err(ReportError::MixedPairs);
        }
        check_hostname(hostname)?;
        let mut rows: Vec<PairRow> = measurements
            .iter()
            .map(|m| PairRow {
                repeat_index: m.repeat_index,
                latency_ns: m.latency,
                t_s_ns: m.t_s.0,
                t_e_ns: m.t_e.0,
                core_id: m.core_id,
                outlier: None,
            })
            .collect();
        rows.sort_by_key(|r| r.repeat_index);
        Ok(PairDatasetFile {
            pair: first.pair,
            hostname: hostname.into(),
            device_index,
            rows,
        })
    }

    pub fn to_measurements(&self) -> Vec<LatencyMeasurement> {
        self.rows
            .iter()
            .map(|r| LatencyMeasurement {
                pair: self.pair,
                latency: r.latency_ns,
                t_s: DeviceInstant(r.t_s_ns),
                t_e: DeviceInstant(r.t_e_ns),
                core_id: r.core_id,
                repeat_index: r.repeat_index,
            })
            .collect()
    }

    pub fn file_name(&self) -> String {
        pair_file_name(self.pair, &self.hostname, self.device_index)
    }

    pub fn latencies(&self) -> Vec<i64> {
        self.rows.iter().map(|r| r.latency_ns).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = writeln!(
            s,
            "# init_mhz={} target_mhz={} hostname={} device_index={}",
            self.pair.init.0, self.pair.target.0, self.hostname, self.device_index
        );
        let _ = writeln!(s, "{PAIR_COLUMNS}");
        for r in &self.rows {
            let flag = match r.outlier {
                None => "",
                Some(false) => "0",
                Some(true) => "1",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.repeat_index, r.latency_ns, r.t_s_ns, r.t_e_ns, r.core_id, flag
            );
        }
        s
    }

    /// Parses file contents; `path` is used for diagnostics and the name check.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ReportError> {
        let bad = |line: usize, message: String| ReportError::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == FORMAT_HEADER => {}
            _ => return Err(bad(1, format!("expected `{FORMAT_HEADER}`"))),
        }
        let (_, meta) = lines
            .next()
            .ok_or_else(|| bad(2, "missing metadata line".into()))?;
        let fields = parse_meta(meta).map_err(|m| bad(2, m))?;
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| bad(2, format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<u32, ReportError> {
            get(k)?
                .parse()
                .map_err(|_| bad(2, format!("`{k}` is not an unsigned integer")))
        };
        let pair = FrequencyPair::new(num("init_mhz")?, num("target_mhz")?);
        let hostname = get("hostname")?;
        let device_index = num("device_index")?;
        match lines.next() {
            Some((_, l)) if l.trim_end() == PAIR_COLUMNS => {}
            _ => return Err(bad(3, format!("expected column header `{PAIR_COLUMNS}`"))),
        }
        let mut rows = Vec::new();
        for (no, line) in lines {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad(no, format!("expected 6 fields, found {}", cols.len())));
            }
            fn field<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, String> {
                s.trim().parse().map_err(|_| format!("invalid {name} {s:?}"))
            }
            let row = (|| -> Result<PairRow, String> {
                Ok(PairRow {
                    repeat_index: field(cols[0], "repeat_index")?,
                    latency_ns: field(cols[1], "latency_ns")?,
                    t_s_ns: field(cols[2], "t_s_ns")?,
                    t_e_ns: field(cols[3], "t_e_ns")?,
                    core_id: field(cols[4], "core_id")?,
                    outlier: match cols[5].trim() {
                        "" => None,
                        "0" => Some(false),
                        "1" => Some(true),
                        other => return Err(format!("invalid outlier flag {other:?}")),
                    },
                })
            })()
            .map_err(|m| bad(no, m))?;
            if rows
                .last()
                .is_some_and(|p: &PairRow| p.repeat_index >= row.repeat_index)
            {
                return Err(bad(no, "repeat_index must increase".into()));
            }
            rows.push(row);
        }
        let file = PairDatasetFile {
            pair,
            hostname,
            device_index,
            rows,
        };
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if name != file.file_name() {
                return Err(bad(
                    2,
                    format!("file name does not match header (expected {})", file.file_name()),
                ));
            }
        }
        Ok(file)
    }
}

fn parse_meta(line: &str) -> Result<BTreeMap<String, String>, String> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| "metadata line must start with `#`".to_string())?;
    body.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("expected key=value, found {kv:?}"))
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn write_dataset(file: &PairDatasetFile, output_dir: &Path) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let path = output_dir.join(file.file_name());
    write_file(&path, &file.render())?;
    Ok(path)
}

/// Writes one pair's measurements in the per-pair CSV format.
pub fn write_pair_csv(
    measurements: &[LatencyMeasurement],
    hostname: &str,
    device_index: u32,
    output_dir: &Path,
) -> Result<PathBuf, ReportError> {
    let file = PairDatasetFile::from_measurements(measurements, hostname, device_index)?;
    write_dataset(&file, output_dir)
}

pub fn read_pair_csv(path: &Path) -> Result<PairDatasetFile, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    PairDatasetFile::parse(&text, path)
}

/// Reads every `swlat_*.csv` in `dir`, ordered by device then pair.
pub fn read_dataset_dir(dir: &Path) -> Result<Vec<PairDatasetFile>, ReportError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("swlat_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    let mut files = paths
        .iter()
        .map(|p| read_pair_csv(p))
        .collect::<Result<Vec<_>, _>>()?;
    files.sort_by(|a, b| {
        (&a.hostname, a.device_index, a.pair).cmp(&(&b.hostname, b.device_index, b.pair))
    });
    Ok(files)
}

/// A pair dataset after outlier filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredPair {
    /// The dataset with outlier flags filled in.
    pub file: PairDatasetFile,
    pub clustering: ClusteredDataset,
    pub silhouette: Option<f64>,
}

pub fn filter_pair(file: &PairDatasetFile, mult: f64) -> FilteredPair {
    let values: Vec<f64> = file.rows.iter().map(|r| r.latency_ns as f64).collect();
    let clustering = adaptive_outlier_filter(&values, mult);
    let silhouette = silhouette_score(&clustering.values, &clustering.labels).ok();
    let mut file = file.clone();
    for (row, label) in file.rows.iter_mut().zip(&clustering.labels) {
        row.outlier = Some(label.is_noise());
    }
    FilteredPair {
        file,
        clustering,
        silhouette,
    }
}

/// Per-pair statistics over non-outlier latencies.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSummary {
    pub pair: FrequencyPair,
    /// Best case: the smallest inlier latency, ns.
    pub min: i64,
    pub mean: f64,
    /// Worst case: the largest inlier latency, ns.
    pub max: i64,
    pub n: usize,
    pub n_outliers: usize,
    pub n_clusters: usize,
    pub silhouette: Option<f64>,
    pub filter: FilterStatus,
}

/// Extremes of one per-pair statistic across a device's pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalCase {
    pub min: i64,
    pub min_pair: FrequencyPair,
    /// Mean over pairs of the per-pair statistic.
    pub mean: f64,
    pub max: i64,
    pub max_pair: FrequencyPair,
}

impl GlobalCase {
    fn over(items: impl Iterator<Item = (FrequencyPair, i64)>) -> Option<Self> {
        let items: Vec<_> = items.collect();
        let (min_pair, min) = *items.iter().min_by_key(|(p, v)| (*v, *p))?;
        let (max_pair, max) = *items.iter().max_by_key(|(p, v)| (*v, std::cmp::Reverse(*p)))?;
        let mean = items.iter().map(|(_, v)| *v as f64).sum::<f64>() / items.len() as f64;
        Some(GlobalCase {
            min,
            min_pair,
            mean,
            max,
            max_pair,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSummary {
    pub hostname: String,
    pub device_index: u32,
    pub pairs: Vec<PairSummary>,
    /// Over per-pair maxima.
    pub worst: GlobalCase,
    /// Over per-pair minima.
    pub best: GlobalCase,
}

impl DeviceSummary {
    pub fn single_cluster_fraction(&self) -> f64 {
        let single = self.pairs.iter().filter(|p| p.n_clusters == 1).count();
        single as f64 / self.pairs.len() as f64
    }

    pub fn get(&self, pair: FrequencyPair) -> Option<&PairSummary> {
        self.pairs.iter().find(|p| p.pair == pair)
    }

    pub fn axis(&self) -> Vec<FrequencyMHz> {
        let set: BTreeSet<FrequencyMHz> = self
            .pairs
            .iter()
            .flat_map(|p| [p.pair.init, p.pair.target])
            .collect();
        set.into_iter().collect()
    }
}

pub fn summarize_pair(f: &FilteredPair) -> PairSummary {
    let mut inliers: Vec<i64> = f
        .file
        .rows
        .iter()
        .filter(|r| r.outlier != Some(true))
        .map(|r| r.latency_ns)
        .collect();
    if inliers.is_empty() {
        // Everything flagged: fall back to the raw sample rather than report nothing.
        inliers = f.file.latencies();
    }
    let min = *inliers.iter().min().expect("datasets are non-empty");
    let max = *inliers.iter().max().expect("datasets are non-empty");
    let mean = inliers.iter().map(|v| *v as f64).sum::<f64>() / inliers.len() as f64;
    PairSummary {
        pair: f.file.pair,
        min,
        mean: mean.clamp(min as f64, max as f64),
        max,
        n: f.file.rows.len(),
        n_outliers: f.clustering.n_outliers(),
        n_clusters: f.clustering.n_clusters(),
        silhouette: f.silhouette,
        filter: f.clustering.status,
    }
}

/// Summary of one device's filtered pair datasets.
pub fn summarize(datasets: &[FilteredPair]) -> Result<DeviceSummary, ReportError> {
    let first = datasets.first().ok_or(ReportError::NoDatasets)?;
    let mut pairs: Vec<PairSummary> = datasets.iter().map(summarize_pair).collect();
    pairs.sort_by_key(|p| p.pair);
    let worst = GlobalCase::over(pairs.iter().map(|p| (p.pair, p.max))).expect("non-empty");
    let best = GlobalCase::over(pairs.iter().map(|p| (p.pair, p.min))).expect("non-empty");
    Ok(DeviceSummary {
        hostname: first.file.hostname.clone(),
        device_index: first.file.device_index,
        pairs,
        worst,
        best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    Min,
    Max,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::Min => "min",
            Statistic::Max => "max",
        }
    }

    fn of(self, p: &PairSummary) -> i64 {
        match self {
            Statistic::Min => p.min,
            Statistic::Max => p.max,
        }
    }
}

/// Initial frequencies in rows, targets in columns; nanoseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapMatrix {
    pub axis: Vec<FrequencyMHz>,
    pub cells: Vec<Vec<Option<i64>>>,
}

impl HeatmapMatrix {
    fn empty(axis: Vec<FrequencyMHz>) -> Self {
        let n = axis.len();
        HeatmapMatrix {
            axis,
            cells: vec![vec![None; n]; n],
        }
    }

    fn index(&self, f: FrequencyMHz) -> Option<usize> {
        self.axis.binary_search(&f).ok()
    }

    pub fn get(&self, pair: FrequencyPair) -> Option<i64> {
        let (r, c) = (self.index(pair.init)?, self.index(pair.target)?);
        self.cells[r][c]
    }

    fn set(&mut self, pair: FrequencyPair, v: i64) {
        if let (Some(r), Some(c)) = (self.index(pair.init), self.index(pair.target)) {
            if r != c {
                self.cells[r][c] = Some(v);
            }
        }
    }

    pub fn values(&self) -> impl Iterator<Item = i64> + '_ {
        self.cells.iter().flatten().filter_map(|c| *c)
    }

    pub fn to_csv(&self, description: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = writeln!(s, "# {description} unit=ns rows=init_mhz columns=target_mhz");
        let _ = write!(s, "init_mhz\\target_mhz");
        for f in &self.axis {
            let _ = write!(s, ",{}", f.0);
        }
        s.push('\n');
        for (f, row) in self.axis.iter().zip(&self.cells) {
            let _ = write!(s, "{}", f.0);
            for c in row {
                match c {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// A self-contained SVG rendering; green marks the smallest values, red the largest.
    pub fn to_svg(&self, title: &str) -> String {
        const CELL: usize = 64;
        const MARGIN: usize = 80;
        let n = self.axis.len();
        let size = MARGIN + n * CELL + 16;
        let (lo, hi) = self
            .values()
            .fold((i64::MAX, i64::MIN), |(a, b), v| (a.min(v), b.max(v)));
        let mut s = String::new();
        let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
        let _ = writeln!(s, "<!-- latbench-format v1 -->");
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">",
            size + 24
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"16\" font-size=\"13\">{}</text>", MARGIN, xml_escape(title));
        let top = 40;
        for (j, f) in self.axis.iter().enumerate() {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                MARGIN + j * CELL + CELL / 2,
                top - 4,
                f.0
            );
        }
        for (i, (f, row)) in self.axis.iter().zip(&self.cells).enumerate() {
            let y = top + i * CELL;
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                MARGIN - 6,
                y + CELL / 2 + 4,
                f.0
            );
            for (j, c) in row.iter().enumerate() {
                let x = MARGIN + j * CELL;
                let fill = match c {
                    Some(v) => {
                        let t = if hi > lo { (v - lo) as f64 / (hi - lo) as f64 } else { 0.0 };
                        format!("hsl({:.1},75%,50%)", 120.0 * (1.0 - t))
                    }
                    None => "#dddddd".into(),
                };
                let _ = writeln!(
                    s,
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" stroke=\"white\"/>"
                );
                if let Some(v) = c {
                    let _ = writeln!(
                        s,
                        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                        x + CELL / 2,
                        y + CELL / 2 + 4,
                        format_ms(*v as f64)
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">rows: initial MHz, columns: target MHz, values: ms</text>",
            MARGIN,
            top + n * CELL + 16
        );
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Matrix of one per-pair statistic; pairs without data stay empty.
pub fn heatmap(summary: &DeviceSummary, statistic: Statistic) -> HeatmapMatrix {
    let mut m = HeatmapMatrix::empty(summary.axis());
    for p in &summary.pairs {
        m.set(p.pair, statistic.of(p));
    }
    m
}

/// Worst-case latencies split by switching direction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ViolinGroups {
    pub increasing: Vec<(FrequencyPair, i64)>,
    pub decreasing: Vec<(FrequencyPair, i64)>,
}

impl ViolinGroups {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = writeln!(s, "# per-pair worst-case latency by direction, unit=ns");
        let _ = writeln!(s, "increasing_ns,decreasing_ns");
        let rows = self.increasing.len().max(self.decreasing.len());
        for i in 0..rows {
            let cell = |g: &[(FrequencyPair, i64)]| g.get(i).map(|(_, v)| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{}", cell(&self.increasing), cell(&self.decreasing));
        }
        s
    }
}

pub fn violin_groups(summary: &DeviceSummary) -> ViolinGroups {
    let mut g = ViolinGroups::default();
    for p in &summary.pairs {
        let entry = (p.pair, p.max);
        if p.pair.is_increasing() {
            g.increasing.push(entry);
        } else {
            g.decreasing.push(entry);
        }
    }
    g
}

/// Per-pair spread (max − min over devices) of the min-case and max-case statistics.
pub fn cross_device_ranges(
    summaries: &[DeviceSummary],
) -> Result<(HeatmapMatrix, HeatmapMatrix), ReportError> {
    if summaries.len() < 2 {
        return Err(ReportError::AxisMismatch(format!(
            "need at least two devices, got {}",
            summaries.len()
        )));
    }
    let axis = summaries[0].axis();
    for s in &summaries[1..] {
        if s.axis() != axis {
            return Err(ReportError::AxisMismatch(format!(
                "{} gpu{} differs from {} gpu{}",
                s.hostname, s.device_index, summaries[0].hostname, summaries[0].device_index
            )));
        }
    }
    let build = |stat: Statistic| {
        let mut m = HeatmapMatrix::empty(axis.clone());
        for p in &summaries[0].pairs {
            let vals: Option<Vec<i64>> = summaries
                .iter()
                .map(|s| s.get(p.pair).map(|q| stat.of(q)))
                .collect();
            if let Some(v) = vals {
                let spread = v.iter().max().unwrap() - v.iter().min().unwrap();
                m.set(p.pair, spread);
            }
        }
        m
    };
    Ok((build(Statistic::Min), build(Statistic::Max)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScatterRow {
    pub repeat_index: u64,
    pub latency_ns: i64,
    pub label: Label,
}

pub fn pair_scatter(f: &FilteredPair) -> Vec<ScatterRow> {
    f.file
        .rows
        .iter()
        .zip(&f.clustering.labels)
        .map(|(r, l)| ScatterRow {
            repeat_index: r.repeat_index,
            latency_ns: r.latency_ns,
            label: *l,
        })
        .collect()
}

pub fn scatter_csv(f: &FilteredPair) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{FORMAT_HEADER}");
    let _ = writeln!(
        s,
        "# init_mhz={} target_mhz={} filter={} cluster=-1 marks noise",
        f.file.pair.init.0,
        f.file.pair.target.0,
        f.clustering.status.as_str()
    );
    let _ = writeln!(s, "repeat_index,latency_ns,cluster");
    for r in pair_scatter(f) {
        let _ = writeln!(s, "{},{},{}", r.repeat_index, r.latency_ns, r.label.as_i64());
    }
    s
}

fn opt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn summary_csv(summary: &DeviceSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{FORMAT_HEADER}");
    let _ = writeln!(
        s,
        "# hostname={} device_index={} statistics over non-outlier latencies",
        summary.hostname, summary.device_index
    );
    let _ = writeln!(
        s,
        "init_mhz,target_mhz,n,n_outliers,n_clusters,filter,silhouette,min_ms,mean_ms,max_ms"
    );
    for p in &summary.pairs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            p.pair.init.0,
            p.pair.target.0,
            p.n,
            p.n_outliers,
            p.n_clusters,
            p.filter.as_str(),
            opt4(p.silhouette),
            format_ms(p.min as f64),
            format_ms(p.mean),
            format_ms(p.max as f64)
        );
    }
    s
}

/// Global worst-case and best-case rows.
pub fn table_csv(summary: &DeviceSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{FORMAT_HEADER}");
    let _ = writeln!(
        s,
        "# hostname={} device_index={} pairs={} single_cluster_fraction={:.4}",
        summary.hostname,
        summary.device_index,
        summary.pairs.len(),
        summary.single_cluster_fraction()
    );
    let _ = writeln!(
        s,
        "# worst = per-pair maximum, best = per-pair minimum; mean_ms is the mean over pairs"
    );
    let _ = writeln!(s, "case,min_ms,min_transition,mean_ms,max_ms,max_transition");
    for (name, g) in [("worst", &summary.worst), ("best", &summary.best)] {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{}",
            format_ms(g.min as f64),
            g.min_pair,
            format_ms(g.mean),
            format_ms(g.max as f64),
            g.max_pair
        );
    }
    s
}

/// Everything `analyze` computes for a directory of pair files.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub filtered: Vec<FilteredPair>,
    pub devices: Vec<DeviceSummary>,
    pub ranges: Option<(HeatmapMatrix, HeatmapMatrix)>,
    pub warnings: Vec<String>,
}

pub fn analyze(files: &[PairDatasetFile], mult: f64) -> Result<Analysis, ReportError> {
    if files.is_empty() {
        return Err(ReportError::NoDatasets);
    }
    let filtered: Vec<FilteredPair> = files
        .iter()
        .filter(|f| !f.rows.is_empty())
        .map(|f| filter_pair(f, mult))
        .collect();
    let mut by_device: BTreeMap<(String, u32), Vec<FilteredPair>> = BTreeMap::new();
    for f in &filtered {
        by_device
            .entry((f.file.hostname.clone(), f.file.device_index))
            .or_default()
            .push(f.clone());
    }
    let devices = by_device
        .values()
        .map(|v| summarize(v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut warnings = Vec::new();
    for f in files.iter().filter(|f| f.rows.is_empty()) {
        warnings.push(format!("{}: no rows, skipped", f.file_name()));
    }
    for f in &filtered {
        match f.clustering.status {
            FilterStatus::Skipped => warnings.push(format!(
                "{}: {} rows, outlier filtering skipped",
                f.file.file_name(),
                f.file.rows.len()
            )),
            FilterStatus::Unconverged => warnings.push(format!(
                "{}: outlier ratio {:.3} above limit, least-noise configuration kept",
                f.file.file_name(),
                f.clustering.outlier_ratio
            )),
            FilterStatus::Converged => {}
        }
    }
    let ranges = if devices.len() >= 2 {
        match cross_device_ranges(&devices) {
            Ok(r) => Some(r),
            Err(e) => {
                warnings.push(format!("cross-device ranges skipped: {e}"));
                None
            }
        }
    } else {
        None
    };
    Ok(Analysis {
        filtered,
        devices,
        ranges,
        warnings,
    })
}

/// Writes all analysis artifacts; returns the paths in write order.
pub fn write_analysis(analysis: &Analysis, output_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let mut written = Vec::new();
    let mut put = |name: String, contents: String| -> Result<(), ReportError> {
        let path = output_dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
        Ok(())
    };
    for f in &analysis.filtered {
        put(f.file.file_name(), f.file.render())?;
        let suffix = device_suffix(&f.file.hostname, f.file.device_index);
        put(
            format!("scatter_{}MHz_to_{}MHz_{suffix}.csv", f.file.pair.init.0, f.file.pair.target.0),
            scatter_csv(f),
        )?;
    }
    for d in &analysis.devices {
        let suffix = device_suffix(&d.hostname, d.device_index);
        put(format!("summary_{suffix}.csv"), summary_csv(d))?;
        put(format!("table_{suffix}.csv"), table_csv(d))?;
        for stat in [Statistic::Min, Statistic::Max] {
            let m = heatmap(d, stat);
            let what = format!("{} switching latency {suffix}", stat.name());
            put(
                format!("heatmap_{}_{suffix}.csv", stat.name()),
                m.to_csv(&format!("statistic={} hostname={} device_index={}", stat.name(), d.hostname, d.device_index)),
            )?;
            put(format!("heatmap_{}_{suffix}.svg", stat.name()), m.to_svg(&what))?;
        }
        put(format!("violin_{suffix}.csv"), violin_groups(d).to_csv())?;
    }
    if let Some((min, max)) = &analysis.ranges {
        let n = analysis.devices.len();
        put("range_min.csv".into(), min.to_csv(&format!("statistic=range_of_min devices={n}")))?;
        put("range_max.csv".into(), max.to_csv(&format!("statistic=range_of_max devices={n}")))?;
        put("range_min.svg".into(), min.to_svg("range of minimum latency across devices"))?;
        put("range_max.svg".into(), max.to_svg("range of maximum latency across devices"))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(pair: FrequencyPair, i: u64, latency: i64) -> LatencyMeasurement {
        LatencyMeasurement {
            pair,
            latency,
            t_s: DeviceInstant(1_000 * i as i64),
            t_e: DeviceInstant(1_000 * i as i64 + latency),
            core_id: (i % 3) as u32,
            repeat_index: i,
        }
    }

    fn file_with(pair: FrequencyPair, latencies: &[i64]) -> PairDatasetFile {
        let ms: Vec<_> = latencies.iter().enumerate().map(|(i, l)| m(pair, i as u64, *l)).collect();
        PairDatasetFile::from_measurements(&ms, "node01", 0).unwrap()
    }

    #[test]
    fn file_name_template() {
        assert_eq!(
            pair_file_name(FrequencyPair::new(1350, 1260), "node01", 0),
            "swlat_1350MHz_to_1260MHz_node01_gpu0.csv"
        );
    }

    #[test]
    fn empty_and_mixed_inputs_rejected() {
        assert!(matches!(
            PairDatasetFile::from_measurements(&[], "h", 0),
            Err(ReportError::EmptyMeasurements)
        ));
        let a = m(FrequencyPair::new(1, 2), 0, 5);
        let b = m(FrequencyPair::new(2, 1), 1, 5);
        assert!(matches!(
            PairDatasetFile::from_measurements(&[a, b], "h", 0),
            Err(ReportError::MixedPairs)
        ));
        assert!(matches!(
            PairDatasetFile::from_measurements(&[a], "bad_host", 0),
            Err(ReportError::InvalidHostname(_))
        ));
    }

    #[test]
    fn ms_formatting() {
        assert_eq!(format_ms(7_413_000.0), "7.413");
        assert_eq!(format_ms(7_412_600.0), "7.413");
        assert_eq!(format_ms(499.0), "0.000");
        assert_eq!(format_ms(22_716_000.0), "22.716");
        assert_eq!(format_ms(-1_500.0), "-0.002");
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let f = file_with(FrequencyPair::new(1350, 1260), &[10, 20]);
        let mut text = f.render();
        text.push_str("5,abc,0,0,0,\n");
        let path = Path::new("swlat_1350MHz_to_1260MHz_node01_gpu0.csv");
        match PairDatasetFile::parse(&text, path) {
            Err(ReportError::Malformed { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        let wrong = Path::new("swlat_1MHz_to_2MHz_node01_gpu0.csv");
        assert!(matches!(PairDatasetFile::parse(&f.render(), wrong), Err(ReportError::Malformed { line: 2, .. })));
        assert!(matches!(PairDatasetFile::parse("x\n", path), Err(ReportError::Malformed { line: 1, .. })));
    }

    #[test]
    fn singleton_summary() {
        let f = filter_pair(&file_with(FrequencyPair::new(1, 2), &[42]), 0.15);
        let s = summarize(&[f]).unwrap();
        assert_eq!((s.best.min, s.worst.max), (42, 42));
        assert_eq!(s.pairs[0].mean, 42.0);
    }

    #[test]
    fn heatmap_shape_and_order() {
        let pairs = [(1, 2), (1, 3), (2, 1), (2, 3), (3, 1), (3, 2)];
        let fs: Vec<FilteredPair> = pairs
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| filter_pair(&file_with(FrequencyPair::new(a, b), &[10 + k as i64, 100 + k as i64]), 0.15))
            .collect();
        let s = summarize(&fs).unwrap();
        let lo = heatmap(&s, Statistic::Min);
        let hi = heatmap(&s, Statistic::Max);
        assert_eq!(lo.axis.len(), 3);
        for i in 0..3 {
            assert_eq!(lo.cells[i][i], None);
        }
        assert_eq!(lo.values().count(), 6);
        for (a, b) in lo.values().zip(hi.values()) {
            assert!(b >= a);
        }
        let g = violin_groups(&s);
        assert_eq!(g.increasing.len(), 3);
        assert!(g.increasing.iter().all(|(p, _)| p.init < p.target));
        assert!(g.decreasing.iter().all(|(p, _)| p.init > p.target));
        let csv = lo.to_csv("statistic=min");
        assert!(csv.lines().nth(3).unwrap().starts_with("1,,10,11"));
        assert!(hi.to_svg("t").contains("hsl(0.0,75%,50%)"));
    }

    #[test]
    fn ranges_of_identical_devices_are_zero() {
        let f = filter_pair(&file_with(FrequencyPair::new(1, 2), &[5, 9]), 0.15);
        let s = summarize(&[f]).unwrap();
        let mut other = s.clone();
        other.device_index = 1;
        let (lo, hi) = cross_device_ranges(&[s.clone(), other]).unwrap();
        assert!(lo.values().chain(hi.values()).all(|v| v == 0));
        assert!(matches!(cross_device_ranges(&[s]), Err(ReportError::AxisMismatch(_))));
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(lat in prop::collection::vec(0i64..100_000_000, 1..80)) {
            let f = file_with(FrequencyPair::new(795, 1350), &lat);
            let path = PathBuf::from(f.file_name());
            let back = PairDatasetFile::parse(&f.render(), &path).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(back.render(), f.render());
            let ms = back.to_measurements();
            prop_assert_eq!(PairDatasetFile::from_measurements(&ms, "node01", 0).unwrap(), f);
        }

        #[test]
        fn summary_values_are_witnessed(lat in prop::collection::vec(0i64..50_000_000, 1..200)) {
            let fp = filter_pair(&file_with(FrequencyPair::new(1, 2), &lat), 0.15);
            let p = summarize_pair(&fp);
            prop_assert!(lat.contains(&p.min) && lat.contains(&p.max));
            prop_assert!(p.min as f64 <= p.mean && p.mean <= p.max as f64);
            prop_assert!(p.min >= *lat.iter().min().unwrap() && p.max <= *lat.iter().max().unwrap());
        }
    }
}
