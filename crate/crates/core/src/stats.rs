//! Sample statistics used by every decision in the measurement protocol.
//!
//! Durations are integer nanoseconds. The sum of squared deviations is
//! accumulated exactly in 128-bit integers relative to the sample minimum, so
//! the deviation statistics are bit-for-bit invariant under permutation and
//! under adding a constant to every sample. Only the final division and square
//! root round.

use thiserror::Error;

/// Two-sided multiplier used for bands and intervals.
pub const Z: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("mean is zero; relative standard error undefined")]
    ZeroMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub stddev: f64,
    /// Standard error of the mean, `stddev / sqrt(n)`.
    pub stderr: f64,
}

impl SampleStats {
    /// Builds stats from a mean and standard deviation, deriving the standard error.
    pub fn from_parts(n: usize, mean: f64, stddev: f64) -> Self {
        let stderr = if stddev == 0.0 {
            0.0
        } else {
            stddev / (n as f64).sqrt()
        };
        SampleStats {
            n,
            mean,
            stddev,
            stderr,
        }
    }

    /// Same sample with the standard deviation raised to at least `floor`.
    pub fn with_stddev_floor(self, floor: f64) -> Self {
        if self.stddev >= floor {
            self
        } else {
            SampleStats::from_parts(self.n, self.mean, floor)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lb: f64,
    pub hb: f64,
}

impl Interval {
    pub fn new(lb: f64, hb: f64) -> Self {
        debug_assert!(lb <= hb, "interval bounds out of order: [{lb}, {hb}]");
        Interval { lb, hb }
    }

    pub fn width(&self) -> f64 {
        self.hb - self.lb
    }

    /// Strict membership, `lb < x < hb`.
    pub fn strictly_contains(&self, x: f64) -> bool {
        x > self.lb && x < self.hb
    }

    pub fn negated(&self) -> Interval {
        Interval::new(-self.hb, -self.lb)
    }
}

fn require(n: usize, needed: usize) -> Result<(), StatsError> {
    if n < needed {
        Err(StatsError::InsufficientSamples { needed, got: n })
    } else {
        Ok(())
    }
}

/// Mean, sample standard deviation and standard error of `durations`.
pub fn sample_stats(durations: &[i64]) -> Result<SampleStats, StatsError> {
    let n = durations.len();
    require(n, 2)?;
    let anchor = *durations.iter().min().expect("non-empty");
    let mut sum: i128 = 0;
    let mut sum_sq: i128 = 0;
    let mut exact = true;
    for &x in durations {
        let d = x as i128 - anchor as i128;
        sum += d;
        match d.checked_mul(d).and_then(|sq| sum_sq.checked_add(sq)) {
            Some(s) => sum_sq = s,
            None => {
                exact = false;
                break;
            }
        }
    }
    let nn = n as i128;
    let numerator = if exact {
        // n * sum((x - mean)^2) = n * sum(d^2) - (sum d)^2
        nn.checked_mul(sum_sq)
            .and_then(|a| sum.checked_mul(sum).and_then(|b| a.checked_sub(b)))
    } else {
        None
    };
    let mean = anchor as f64 + sum as f64 / n as f64;
    let variance = match numerator {
        Some(num) => num as f64 / (n as f64 * (n as f64 - 1.0)),
        None => compensated_variance(durations, mean),
    };
    Ok(SampleStats::from_parts(n, mean, variance.max(0.0).sqrt()))
}

/// Fallback for magnitudes that overflow the exact path.
fn compensated_variance(durations: &[i64], mean: f64) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for &x in durations {
        let d = x as f64 - mean;
        let y = d * d - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s / (durations.len() as f64 - 1.0)
}

/// `[mean - 2 sd, mean + 2 sd]`.
pub fn two_sigma_band(s: &SampleStats) -> Interval {
    Interval::new(s.mean - Z * s.stddev, s.mean + Z * s.stddev)
}

/// Interval for `a.mean - b.mean` at two combined standard errors.
pub fn diff_confidence_interval(a: &SampleStats, b: &SampleStats) -> Interval {
    let diff = a.mean - b.mean;
    let half = Z * (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
    Interval::new(diff - half, diff + half)
}

/// True iff the interval lies strictly on one side of zero; touching zero counts as containing it.
pub fn excludes_zero(i: &Interval) -> bool {
    i.lb > 0.0 || i.hb < 0.0
}

pub fn relative_standard_error(values: &[i64]) -> Result<f64, StatsError> {
    let s = sample_stats(values)?;
    if s.mean == 0.0 {
        return Err(StatsError::ZeroMean);
    }
    Ok(s.stderr / s.mean.abs())
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// `Q(hi) - Q(lo)` with the linear-interpolation estimator.
pub fn quantile_range(values: &[f64], lo: f64, hi: f64) -> Result<f64, StatsError> {
    require(values.len(), 2)?;
    assert!(
        (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi,
        "quantile bounds must satisfy 0 <= lo < hi <= 1"
    );
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Measure from the minimum so a constant shift cannot change rounding.
    let base = sorted[0];
    sorted.iter_mut().for_each(|v| *v -= base);
    Ok(quantile_sorted(&sorted, hi) - quantile_sorted(&sorted, lo))
}
