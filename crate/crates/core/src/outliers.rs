//! Adaptive density-based outlier detection on the 1-D latency axis, and
//! silhouette validation of the resulting clusters.
//!
//! [`dbscan_1d`] is classical DBSCAN specialised to one dimension: after
//! sorting, every neighborhood is a contiguous window, so neighbor counts come
//! from a two-pointer sweep and clusters are maximal chains of core points no
//! more than `eps` apart. Labels match a scan in ascending value order (ties by
//! input index); a border point reachable from two clusters joins the lower one.
//!
//! [`adaptive_outlier_filter`] fixes `eps` from the spread of the data and
//! sweeps `min_pts` downward from 4 % of the sample size towards 2 % until at
//! most a tenth of the points are noise.

use thiserror::Error;

use crate::stats::quantile_range;

/// Samples below this size are not filtered.
pub const MIN_FILTER_SAMPLES: usize = 50;
/// Default neighborhood radius as a fraction of the 5–95 % quantile range.
pub const DEFAULT_MULT: f64 = 0.15;
/// Noise fraction at which the `min_pts` sweep stops.
pub const OUTLIER_RATIO_LIMIT: f64 = 0.1;
/// Lower bound on `eps`, nanoseconds; keeps near-constant samples clusterable.
pub const MIN_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Cluster(u32),
    Noise,
}

impl Label {
    pub fn is_noise(self) -> bool {
        self == Label::Noise
    }

    /// Cluster id, or `-1` for noise (the scatter CSV convention).
    pub fn as_i64(self) -> i64 {
        match self {
            Label::Cluster(c) => c as i64,
            Label::Noise => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterStatus {
    /// A `min_pts` setting reached the noise-ratio limit.
    Converged,
    /// No setting reached the limit; the one with the least noise was kept.
    Unconverged,
    /// Too few samples to filter; everything is cluster 0.
    Skipped,
}

impl FilterStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterStatus::Converged => "converged",
            FilterStatus::Unconverged => "unconverged",
            FilterStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    pub values: Vec<f64>,
    pub labels: Vec<Label>,
    /// `None` when filtering was skipped.
    pub params: Option<DbscanParams>,
    pub outlier_ratio: f64,
    pub status: FilterStatus,
}

impl ClusteredDataset {
    pub fn n_clusters(&self) -> usize {
        cluster_count(&self.labels)
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_noise()).count()
    }

    pub fn inliers(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| !l.is_noise())
            .map(|(v, _)| *v)
    }
}

fn cluster_count(labels: &[Label]) -> usize {
    labels
        .iter()
        .filter_map(|l| match l {
            Label::Cluster(c) => Some(*c as usize + 1),
            Label::Noise => None,
        })
        .max()
        .unwrap_or(0)
}

/// Indices of `values` in ascending (value, index) order.
fn scan_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// DBSCAN on a single axis.
pub fn dbscan_1d(values: &[f64], params: DbscanParams) -> Vec<Label> {
    let n = values.len();
    let order = scan_order(values);
    let s: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let mut core = vec![false; n];
    let (mut lo, mut hi) = (0usize, 0usize);
    for i in 0..n {
        while s[i] - s[lo] > params.eps {
            lo += 1;
        }
        if hi < i {
            hi = i;
        }
        while hi + 1 < n && s[hi + 1] - s[i] <= params.eps {
            hi += 1;
        }
        core[i] = hi - lo + 1 >= params.min_pts;
    }

    let mut sorted_labels = vec![Label::Noise; n];
    let mut next = 0u32;
    let mut prev_core: Option<usize> = None;
    for i in (0..n).filter(|&i| core[i]) {
        let joins = prev_core.is_some_and(|p| s[i] - s[p] <= params.eps);
        if !joins {
            next += 1;
        }
        sorted_labels[i] = Label::Cluster(next - 1);
        prev_core = Some(i);
    }

    // Border points: nearest core below within eps, else nearest core above.
    let mut below: Option<usize> = None;
    let mut nearest_below = vec![None; n];
    for i in 0..n {
        if core[i] {
            below = Some(i);
        } else {
            nearest_below[i] = below;
        }
    }
    let mut above: Option<usize> = None;
    for i in (0..n).rev() {
        if core[i] {
            above = Some(i);
            continue;
        }
        let from_below = nearest_below[i].filter(|&c| s[i] - s[c] <= params.eps);
        let from_above = above.filter(|&c| s[c] - s[i] <= params.eps);
        if let Some(c) = from_below.or(from_above) {
            sorted_labels[i] = sorted_labels[c];
        }
    }

    let mut labels = vec![Label::Noise; n];
    for (k, &i) in order.iter().enumerate() {
        labels[i] = sorted_labels[k];
    }
    labels
}

/// `(ceil(4n/100), floor(2n/100))`: the sweep runs from the first value
/// down while strictly above the second.
pub fn min_pts_bounds(n: usize) -> (usize, usize) {
    ((4 * n).div_ceil(100), 2 * n / 100)
}

/// The `min_pts` values the adaptive filter tries, in order.
pub fn min_pts_sweep(n: usize) -> Vec<usize> {
    let (start, stop) = min_pts_bounds(n);
    let mut out = Vec::new();
    let mut m = start;
    while m > stop && m >= 1 {
        out.push(m);
        if m < 2 {
            break;
        }
        m -= 2;
    }
    out
}

fn noise_ratio(labels: &[Label]) -> f64 {
    labels.iter().filter(|l| l.is_noise()).count() as f64 / labels.len() as f64
}

/// Iterative DBSCAN filtering with a data-derived radius.
pub fn adaptive_outlier_filter(values: &[f64], mult: f64) -> ClusteredDataset {
    let n = values.len();
    if n < MIN_FILTER_SAMPLES {
        return ClusteredDataset {
            values: values.to_vec(),
            labels: vec![Label::Cluster(0); n],
            params: None,
            outlier_ratio: 0.0,
            status: FilterStatus::Skipped,
        };
    }
    let spread = quantile_range(values, 0.05, 0.95).expect("n >= 2");
    let eps = (mult * spread).max(MIN_EPS);

    let mut best: Option<(DbscanParams, Vec<Label>, f64)> = None;
    for min_pts in min_pts_sweep(n) {
        let params = DbscanParams { eps, min_pts };
        let labels = dbscan_1d(values, params);
        let ratio = noise_ratio(&labels);
        if ratio <= OUTLIER_RATIO_LIMIT {
            return ClusteredDataset {
                values: values.to_vec(),
                labels,
                params: Some(params),
                outlier_ratio: ratio,
                status: FilterStatus::Converged,
            };
        }
        if best.as_ref().is_none_or(|(_, _, r)| ratio < *r) {
            best = Some((params, labels, ratio));
        }
    }
    let (params, labels, ratio) = best.expect("sweep is non-empty for n >= 50");
    ClusteredDataset {
        values: values.to_vec(),
        labels,
        params: Some(params),
        outlier_ratio: ratio,
        status: FilterStatus::Unconverged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SilhouetteError {
    #[error("silhouette needs at least two clusters with two or more members each")]
    NotEnoughClusters,
}

/// Mean silhouette over non-noise points.
///
/// Within one dimension the sum of distances from `x` to a sorted cluster
/// follows from prefix sums, so the score costs `O(n log n)`.
pub fn silhouette_score(values: &[f64], labels: &[Label]) -> Result<f64, SilhouetteError> {
    assert_eq!(values.len(), labels.len(), "one label per value");
    let k = cluster_count(labels);
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (v, l) in values.iter().zip(labels) {
        if let Label::Cluster(c) = l {
            members[*c as usize].push(*v);
        }
    }
    members.retain(|m| !m.is_empty());
    if members.len() < 2 || members.iter().any(|m| m.len() < 2) {
        return Err(SilhouetteError::NotEnoughClusters);
    }
    let prepared: Vec<(Vec<f64>, Vec<f64>)> = members
        .into_iter()
        .map(|mut m| {
            m.sort_by(f64::total_cmp);
            let mut prefix = Vec::with_capacity(m.len() + 1);
            prefix.push(0.0);
            for v in &m {
                prefix.push(prefix.last().unwrap() + v);
            }
            (m, prefix)
        })
        .collect();

    let distance_sum = |x: f64, (sorted, prefix): &(Vec<f64>, Vec<f64>)| -> f64 {
        let j = sorted.partition_point(|v| *v < x);
        let n = sorted.len();
        let below = x * j as f64 - prefix[j];
        let above = (prefix[n] - prefix[j]) - x * (n - j) as f64;
        below + above
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for (ci, (sorted, _)) in prepared.iter().enumerate() {
        for &x in sorted {
            let a = distance_sum(x, &prepared[ci]) / (sorted.len() - 1) as f64;
            let b = prepared
                .iter()
                .enumerate()
                .filter(|(cj, _)| *cj != ci)
                .map(|(_, c)| distance_sum(x, c) / c.0.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean distance to the `k`-th nearest neighbor divided by the 5–95 %
/// quantile range: a diagnostic for choosing `mult`.
pub fn knn_distance_ratio(values: &[f64], k: usize) -> Option<f64> {
    let n = values.len();
    if n <= k || k == 0 {
        return None;
    }
    let range = quantile_range(values, 0.05, 0.95).ok()?;
    if range <= 0.0 {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for i in 0..n {
        // The k nearest others lie in a window of k+1 consecutive points containing i.
        let mut best = f64::INFINITY;
        let first = i.saturating_sub(k);
        for lo in first..=i {
            let hi = lo + k;
            if hi >= n {
                break;
            }
            let d = (s[i] - s[lo]).max(s[hi] - s[i]);
            best = best.min(d);
        }
        total += best;
    }
    Some(total / n as f64 / range)
}
