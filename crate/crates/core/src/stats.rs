//! Monte Carlo error bars and goodness-of-fit tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn new(value: f64, stderr: f64) -> Self {
        Estimate { value, stderr }
    }

    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0 }
    }

    /// Standardized distance to `target`.
    pub fn z_against(&self, target: f64) -> f64 {
        z_score(self.value - target, self.stderr)
    }

    /// Standardized distance to another independent estimate.
    pub fn z_between(&self, other: &Estimate) -> f64 {
        z_score(self.value - other.value, self.stderr.hypot(other.stderr))
    }
}

/// `diff / se` with 0/0 treated as agreement and x/0 as infinitely far.
pub fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Batch-means estimate over contiguous batches.
///
/// Trailing values that do not fill a batch still count toward the mean but
/// not toward the error bar.
pub fn batch_means(xs: &[f64], batches: usize) -> Estimate {
    let value = mean(xs);
    let b = batches.min(xs.len());
    if b < 2 {
        return Estimate::new(value, 0.0);
    }
    let size = xs.len() / b;
    let bm: Vec<f64> = (0..b).map(|i| mean(&xs[i * size..(i + 1) * size])).collect();
    Estimate::new(value, (variance(&bm) / b as f64).sqrt())
}

/// Batch means where each group (e.g. one Markov chain) is split into its own
/// batches, so no batch straddles two chains.
pub fn grouped_batch_means(xs: &[f64], group_len: &[usize], batches_per_group: usize) -> Estimate {
    let value = mean(xs);
    let mut bm = Vec::new();
    let mut start = 0;
    for &len in group_len {
        let g = &xs[start..start + len];
        start += len;
        let b = batches_per_group.min(len);
        if b == 0 {
            continue;
        }
        let size = len / b;
        for i in 0..b {
            bm.push(mean(&g[i * size..(i + 1) * size]));
        }
    }
    if bm.len() < 2 {
        return Estimate::new(value, 0.0);
    }
    Estimate::new(value, (variance(&bm) / bm.len() as f64).sqrt())
}

/// Integrated autocorrelation time with Sokal's automatic window (c = 5).
pub fn integrated_autocorrelation_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let m = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let c: f64 = (0..n - lag).map(|i| (xs[i] - m) * (xs[i + lag] - m)).sum::<f64>() / n as f64;
        tau += 2.0 * c / c0;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

pub fn effective_sample_size(xs: &[f64]) -> f64 {
    xs.len() as f64 / integrated_autocorrelation_time(xs)
}

/// Result of a goodness-of-fit test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl GofResult {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

/// Pearson chi-square test of integer counts against Poisson(`mean`).
///
/// Adjacent cells are pooled left to right until each expected count is at
/// least 5; the right tail is folded into the last cell.
pub fn poisson_chi_square(counts: &[u64], mean: f64) -> GofResult {
    let n = counts.len() as f64;
    let pois = Poisson::new(mean.max(1e-300)).expect("positive mean");
    let max_k = counts.iter().copied().max().unwrap_or(0);
    let mut observed = vec![0u64; max_k as usize + 1];
    for &c in counts {
        observed[c as usize] += 1;
    }
    let upper = ((mean + 10.0 * mean.sqrt() + 10.0).ceil() as u64).max(max_k + 1);
    // raw cells k = 0..upper-1 plus the tail {k >= upper}
    let mut raw: Vec<(f64, f64)> = (0..upper)
        .map(|k| (observed.get(k as usize).copied().unwrap_or(0) as f64, n * pois.pmf(k)))
        .collect();
    let head: f64 = raw.iter().map(|c| c.1).sum();
    raw.push((0.0, (n - head).max(0.0)));
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (o, e) in raw {
        acc.0 += o;
        acc.1 += e;
        if acc.1 >= 5.0 {
            cells.push(acc);
            acc = (0.0, 0.0);
        }
    }
    match cells.last_mut() {
        Some(last) => {
            last.0 += acc.0;
            last.1 += acc.1;
        }
        None => cells.push(acc),
    }
    let statistic: f64 = cells
        .iter()
        .filter(|c| c.1 > 0.0)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    let dof = cells.len().saturating_sub(1).max(1);
    let p_value = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(statistic);
    GofResult { statistic, dof, p_value }
}

/// One-sample Kolmogorov–Smirnov test against a CDF.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> GofResult {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    GofResult { statistic: d, dof: xs.len(), p_value: kolmogorov_pvalue(d, n) }
}

/// Asymptotic Kolmogorov tail with the Stephens small-sample correction.
fn kolmogorov_pvalue(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Covariance-free standard error of a mean of independent draws.
pub fn iid_stderr(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}
