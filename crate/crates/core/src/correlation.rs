//! Correlation functions: sample estimators, correlation/Ursell conversion
//! through set partitions, Ruelle-bound checks, and the Laplace-functional
//! series.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::TestFunction;
use crate::gibbs::SampleSet;
use crate::potential::{unit_ball_volume, ModelParams};
use crate::space::Torus;
use crate::stats::{effective_sample_size, z_score, Estimate};

/// Largest order handled by partition enumeration.
pub const MAX_ORDER: usize = 6;

fn check_order(n: usize) -> Result<()> {
    if n > MAX_ORDER {
        return Err(Error::OrderTooLarge(n));
    }
    Ok(())
}

/// All set partitions of `{0, .., n-1}`, enumerated by restricted-growth
/// strings. Each partition is a list of blocks.
pub fn set_partitions(n: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    check_order(n)?;
    if n == 0 {
        return Ok(vec![Vec::new()]);
    }
    let mut out = Vec::new();
    let mut a = vec![0usize; n];
    loop {
        let blocks = a.iter().copied().max().unwrap_or(0) + 1;
        let mut p = vec![Vec::new(); blocks];
        for (i, &b) in a.iter().enumerate() {
            p[b].push(i);
        }
        out.push(p);
        // next restricted-growth string
        let mut i = n - 1;
        loop {
            if i == 0 {
                return Ok(out);
            }
            let prefix_max = a[..i].iter().copied().max().unwrap_or(0);
            if a[i] <= prefix_max {
                a[i] += 1;
                for v in &mut a[i + 1..] {
                    *v = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Bell number `B_n` for `n <= MAX_ORDER`.
pub fn bell(n: usize) -> Result<usize> {
    check_order(n)?;
    Ok([1, 1, 2, 5, 15, 52, 203][n])
}

/// A symmetric family of functions `k^(n)(x_1, .., x_n)`, `n >= 1`.
/// `None` means the value is unavailable at that order or argument.
pub trait CorrelationSeq: Sync {
    fn value(&self, points: &[&[f64]]) -> Option<f64>;

    /// `Some(ρ)` when `k^(n) = ρ^n` for every `n`.
    fn factorized(&self) -> Option<f64> {
        None
    }
}

/// The Poisson family `k^(n) = z^n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonCorrelations {
    pub z: f64,
}

impl CorrelationSeq for PoissonCorrelations {
    fn value(&self, points: &[&[f64]]) -> Option<f64> {
        Some(points.iter().fold(1.0, |acc, _| acc * self.z))
    }
    fn factorized(&self) -> Option<f64> {
        Some(self.z)
    }
}

/// A family given by a closure.
pub struct FnCorrelations<F>(pub F);

impl<F: Fn(&[&[f64]]) -> Option<f64> + Sync> CorrelationSeq for FnCorrelations<F> {
    fn value(&self, points: &[&[f64]]) -> Option<f64> {
        (self.0)(points)
    }
}

/// Estimated density and radial pair correlation; higher orders unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedCorrelations {
    pub k1: Estimate,
    pub k2: RadialTable,
    pub torus: Torus,
}

impl CorrelationSeq for EstimatedCorrelations {
    fn value(&self, points: &[&[f64]]) -> Option<f64> {
        match points.len() {
            1 => Some(self.k1.value),
            2 => self.k2.at(self.torus.distance(points[0], points[1])),
            _ => None,
        }
    }
}

fn mask_points<'a>(points: &[&'a [f64]], mask: u32) -> Vec<&'a [f64]> {
    (0..points.len()).filter(|i| mask & (1 << i) != 0).map(|i| points[i]).collect()
}

fn block_mask(elems: &[usize], block: &[usize]) -> u32 {
    block.iter().fold(0, |m, &i| m | (1 << elems[i]))
}

fn elements(mask: u32) -> Vec<usize> {
    (0..32).filter(|i| mask & (1 << i) != 0).collect()
}

/// Ursell function `u^(n)(points)` from correlation functions by the
/// recursion `u(η) = k(η) - Σ_{partitions with ≥ 2 blocks} Π u(η_i)`.
pub fn k_to_u(k: &dyn CorrelationSeq, points: &[&[f64]]) -> Result<Option<f64>> {
    let n = points.len();
    check_order(n)?;
    if n == 0 {
        return Ok(Some(1.0));
    }
    let full = (1u32 << n) - 1;
    let mut u: Vec<Option<f64>> = vec![None; 1 << n];
    let mut masks: Vec<u32> = (1..=full).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    for m in masks {
        let elems = elements(m);
        let Some(km) = k.value(&mask_points(points, m)) else {
            if m == full {
                return Ok(None);
            }
            continue;
        };
        let mut rest = 0.0;
        let mut ok = true;
        for p in set_partitions(elems.len())? {
            if p.len() < 2 {
                continue;
            }
            let mut prod = 1.0;
            for b in &p {
                match u[block_mask(&elems, b) as usize] {
                    Some(v) => prod *= v,
                    None => ok = false,
                }
            }
            rest += prod;
        }
        if ok {
            u[m as usize] = Some(km - rest);
        }
    }
    Ok(u[full as usize])
}

/// Correlation function from Ursell functions: `k(η) = Σ_partitions Π u(η_i)`.
pub fn u_to_k(u: &dyn CorrelationSeq, points: &[&[f64]]) -> Result<Option<f64>> {
    let n = points.len();
    check_order(n)?;
    let all: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for p in set_partitions(n)? {
        let mut prod = 1.0;
        for b in &p {
            let pts: Vec<&[f64]> = b.iter().map(|&i| points[all[i]]).collect();
            match u.value(&pts) {
                Some(v) => prod *= v,
                None => return Ok(None),
            }
        }
        total += prod;
    }
    Ok(Some(total))
}

/// Minimum effective sample size for density estimates.
pub const MIN_ESS: f64 = 10.0;

/// Density `k^(1)` as the mean of `|γ| / V`.
pub fn estimate_k1(set: &SampleSet) -> Result<Estimate> {
    let v = set.torus().volume();
    let dens: Vec<f64> = set.particle_counts().iter().map(|n| n / v).collect();
    let mut ess = 0.0;
    let mut start = 0;
    for len in set.group_lens() {
        ess += effective_sample_size(&dens[start..start + len]);
        start += len;
    }
    if !(ess >= MIN_ESS) {
        return Err(Error::InsufficientData(format!("effective sample size {ess:.1} < {MIN_ESS}")));
    }
    Ok(set.estimate(&dens))
}

/// One radial shell of a pair-correlation table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialBin {
    pub r_lo: f64,
    pub r_hi: f64,
    /// `None` when no pair was ever observed in the shell.
    pub value: Option<f64>,
    pub stderr: f64,
    pub count: u64,
}

/// `k^(2)(r)` on a uniform radial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialTable {
    pub bin_width: f64,
    pub bins: Vec<RadialBin>,
}

impl RadialTable {
    pub fn r_max(&self) -> f64 {
        self.bins.last().map_or(0.0, |b| b.r_hi)
    }

    pub fn bin_of(&self, r: f64) -> Option<&RadialBin> {
        if !(r >= 0.0) || r >= self.r_max() {
            return None;
        }
        self.bins.get((r / self.bin_width) as usize)
    }

    pub fn at(&self, r: f64) -> Option<f64> {
        self.bin_of(r).and_then(|b| b.value)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
        for b in &self.bins {
            w.serialize(b).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
        let bins = r
            .deserialize()
            .collect::<std::result::Result<Vec<RadialBin>, _>>()
            .map_err(|e| Error::Io(e.to_string()))?;
        let bin_width = bins.first().map_or(0.0, |b| b.r_hi - b.r_lo);
        Ok(RadialTable { bin_width, bins })
    }
}

/// Radial pair correlation from ordered pair counts, normalized by shell and
/// box volume. Shells lying entirely inside `hard_core` are exact zeros.
pub fn estimate_k2_radial(set: &SampleSet, bin_width: f64, r_max: f64, hard_core: f64) -> Result<RadialTable> {
    let t = *set.torus();
    if !(bin_width > 0.0) || !(r_max > 0.0) {
        return Err(Error::InvalidParameter("bin width and r_max must be positive".into()));
    }
    if r_max > t.half_side() {
        return Err(Error::RadiusTooLarge { radius: r_max, half_side: t.half_side() });
    }
    let nbins = (r_max / bin_width).round().max(1.0) as usize;
    let vd = unit_ball_volume(t.dim());
    let d = t.dim() as i32;
    let shells: Vec<f64> = (0..nbins)
        .map(|b| vd * ((b as f64 + 1.0) * bin_width).powi(d) - vd * (b as f64 * bin_width).powi(d))
        .collect();
    let per_sample: Vec<Vec<u64>> = set.par_map(|_, cfg| {
        let mut h = vec![0u64; nbins];
        for (id, x) in cfg.iter() {
            cfg.for_each_within(x, r_max, |other, _, r| {
                if other != id && r < r_max {
                    let b = ((r / bin_width) as usize).min(nbins - 1);
                    h[b] += 1;
                }
            });
        }
        h
    });
    let bins = (0..nbins)
        .map(|b| {
            let r_lo = b as f64 * bin_width;
            let r_hi = r_lo + bin_width;
            let count: u64 = per_sample.iter().map(|h| h[b]).sum();
            let norm = t.volume() * shells[b];
            if r_hi <= hard_core {
                return RadialBin { r_lo, r_hi, value: Some(0.0), stderr: 0.0, count };
            }
            if count == 0 {
                return RadialBin { r_lo, r_hi, value: None, stderr: 0.0, count };
            }
            let vals: Vec<f64> = per_sample.iter().map(|h| h[b] as f64 / norm).collect();
            let e = set.estimate(&vals);
            RadialBin { r_lo, r_hi, value: Some(e.value), stderr: e.stderr, count }
        })
        .collect();
    Ok(RadialTable { bin_width, bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuelleCheck {
    pub xi: f64,
    /// Largest standardized excess over the bound across `k^(1)` and all
    /// `k^(2)` bins.
    pub max_violation: f64,
    pub satisfied: bool,
}

/// Tolerance in standard errors for bound checks.
pub const RUELLE_SIGMAS: f64 = 3.0;

/// Conventional bound constant `z e^{2B}`.
pub fn default_xi(model: &ModelParams) -> f64 {
    model.z() * (2.0 * model.potential().stability_b()).exp()
}

/// Checks `k^(1) <= ξ` and `k^(2)(r) <= ξ^2` up to statistical error.
pub fn check_ruelle(k1: &Estimate, k2: &RadialTable, xi: f64) -> RuelleCheck {
    let excess = |v: f64, se: f64, bound: f64| {
        if v <= bound {
            z_score(v - bound, se).min(0.0)
        } else {
            z_score(v - bound, se)
        }
    };
    let mut worst = excess(k1.value, k1.stderr, xi);
    for b in &k2.bins {
        if let Some(v) = b.value {
            worst = worst.max(excess(v, b.stderr, xi * xi));
        }
    }
    RuelleCheck { xi, max_violation: worst, satisfied: worst <= RUELLE_SIGMAS }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceSeries {
    pub value: f64,
    /// The highest-order term included.
    pub last_term: f64,
    pub terms: Vec<f64>,
}

/// `1 + Σ_{n=1}^{N} (1/n!) ∫ Π (e^{f(x_i)} - 1) k^(n)(x_1..x_n) dx` with
/// tensor midpoint quadrature over the support of `f`.
pub fn laplace_series(k: &dyn CorrelationSeq, f: &TestFunction, order: usize, grid_per_axis: usize) -> Result<LaplaceSeries> {
    if f.is_zero() || order == 0 {
        return Ok(LaplaceSeries { value: 1.0, last_term: 0.0, terms: Vec::new() });
    }
    let t = *f.torus();
    let (nodes, w) = f.support_box().midpoint_grid(&t, grid_per_axis);
    let weights: Vec<f64> = nodes.iter().map(|x| f.eval(x).exp_m1()).collect();
    let mut terms = Vec::with_capacity(order);
    if let Some(rho) = k.factorized() {
        let i1: f64 = weights.iter().sum::<f64>() * w;
        let mut term = 1.0;
        for n in 1..=order {
            term *= rho * i1 / n as f64;
            terms.push(term);
        }
    } else {
        check_order(order)?;
        let active: Vec<usize> = (0..nodes.len()).filter(|&i| weights[i] != 0.0).collect();
        let mut fact = 1.0;
        for n in 1..=order {
            fact *= n as f64;
            let mut idx = vec![0usize; n];
            let mut sum = 0.0;
            'outer: loop {
                let pts: Vec<&[f64]> = idx.iter().map(|&i| &nodes[active[i]][..]).collect();
                let prod: f64 = idx.iter().map(|&i| weights[active[i]]).product();
                let kv = k
                    .value(&pts)
                    .ok_or_else(|| Error::InsufficientData(format!("correlation function of order {n} unavailable")))?;
                sum += prod * kv;
                for slot in (0..n).rev() {
                    idx[slot] += 1;
                    if idx[slot] < active.len() {
                        continue 'outer;
                    }
                    idx[slot] = 0;
                }
                break;
            }
            terms.push(sum * w.powi(n as i32) / fact);
        }
    }
    let value = 1.0 + terms.iter().sum::<f64>();
    Ok(LaplaceSeries { value, last_term: *terms.last().unwrap_or(&0.0), terms })
}

/// Sample mean of `e^{<f, γ>}`.
pub fn empirical_laplace(set: &SampleSet, f: &TestFunction) -> Estimate {
    let vals = set.par_map(|_, cfg| f.pair(cfg).exp());
    set.estimate(&vals)
}
