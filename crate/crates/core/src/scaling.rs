//! The scaling experiment: kernel normalization, L²(μ) distance between the
//! scaled hopping generator and the birth-death generator, second moments in
//! reduced (single-expectation) form, and the factorization check.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{ExpCylinderFunction, Kernel, ScaledKernel, TestFunction};
use crate::generators::{apply_h0, apply_heps, QuadratureSpec};
use crate::gibbs::{sample_ensemble, Diagnostics, SampleSet, SamplerConfig};
use crate::potential::{check_laht, check_stability, LahtCheck, ModelParams, StabilityCheck};
use crate::rng::{stream_rng, tagged, TAG_KERNEL_NODES, TAG_SAMPLE_EVAL};
use crate::space::{Configuration, Coords, Point, SupportBox, Torus};
use crate::stats::{mean, variance, z_score, Estimate};

/// Largest accepted relative standard error of the normalization constant.
pub const NORMALIZATION_REL_TOL: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    /// `E[e^{(s-1)E(p, γ)}]`, averaged over probe points.
    pub c: Estimate,
    pub probes: usize,
    /// Agreement of the two halves of every chain.
    pub halves_z: f64,
    pub mass: f64,
    pub amplitude: f64,
}

/// Evenly spaced probe points filling the torus (`per_axis^d` of them).
pub fn probe_lattice(torus: &Torus, count: usize) -> Vec<Point> {
    let d = torus.dim();
    let per_axis = ((count as f64).powf(1.0 / d as f64).round() as usize).max(1);
    let h = torus.side() / per_axis as f64;
    (0..per_axis.pow(d as u32))
        .map(|mut flat| {
            let mut p = Coords::with_capacity(d);
            for _ in 0..d {
                p.push((flat % per_axis) as f64 * h + 0.5 * h);
                flat /= per_axis;
            }
            Point(p)
        })
        .collect()
}

fn probe_average(model: &ModelParams, cfg: &Configuration, probes: &[Point], coef: f64) -> f64 {
    let pot = model.potential();
    if pot.is_zero() || coef == 0.0 {
        return 1.0;
    }
    probes.iter().map(|p| (coef * pot.relative_energy(cfg, p, None)).exp()).sum::<f64>() / probes.len() as f64
}

/// Rescales `kernel` so that its mass is `1/c` with
/// `c = E[e^{(s-1)E(p, γ)}]`.
pub fn normalize_kernel(set: &SampleSet, model: &ModelParams, kernel: &Kernel, probes: usize) -> Result<(Kernel, NormalizationRecord)> {
    if !model.potential().is_nonnegative() {
        return Err(Error::Precondition("kernel normalization requires a nonnegative potential".into()));
    }
    let pts = probe_lattice(model.torus(), probes);
    let coef = model.s() - 1.0;
    let c = if model.potential().is_zero() {
        Estimate::exact(1.0)
    } else {
        let vals = set.par_map(|_, cfg| probe_average(model, cfg, &pts, coef));
        set.estimate(&vals)
    };
    let halves_z = if c.stderr == 0.0 {
        0.0
    } else {
        let (a, b) = set.halves();
        let ea = a.estimate(&a.par_map(|_, cfg| probe_average(model, cfg, &pts, coef)));
        let eb = b.estimate(&b.par_map(|_, cfg| probe_average(model, cfg, &pts, coef)));
        ea.z_between(&eb)
    };
    if c.stderr > NORMALIZATION_REL_TOL * c.value {
        return Err(Error::InsufficientData(format!(
            "normalization constant relative stderr {:.3} exceeds {NORMALIZATION_REL_TOL}; increase the sample budget",
            c.stderr / c.value
        )));
    }
    let k = kernel.with_mass(1.0 / c.value)?;
    let rec = NormalizationRecord { c, probes: pts.len(), halves_z, mass: k.mass(), amplitude: k.amplitude() };
    Ok((k, rec))
}

/// `‖H_ε F - H₀ F‖²` and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub eps: f64,
    /// Assembled as `heps_sq - 2 cross + h0_sq`; the error bar comes from
    /// the per-sample combination.
    pub m2: Estimate,
    pub heps_sq: Estimate,
    pub cross: Estimate,
    pub h0_sq: Estimate,
    /// Squared distance of the minus parts alone.
    pub m2_minus: Estimate,
    /// Squared distance of the plus parts alone.
    pub m2_plus: Estimate,
    /// Mean pointwise Monte Carlo variance over the sample variance of `H_ε F`.
    pub noise_ratio: f64,
    /// Set when pointwise noise dominates the sample spread.
    pub noise_flag: bool,
    /// Largest pointwise quadrature error estimate seen.
    pub max_quad_error: f64,
}

fn check_generator_model(model: &ModelParams) -> Result<()> {
    if model.potential().has_hard_core() {
        return Err(Error::Precondition("generator experiments exclude hard-core potentials".into()));
    }
    Ok(())
}

/// Direct estimator over Gibbs samples. The squared hopping-generator value
/// uses the product of two conditionally independent estimates of its
/// minus part, which removes the pointwise Monte Carlo bias.
pub fn l2_norm_direct(set: &SampleSet, model: &ModelParams, func: &ExpCylinderFunction, kernel: &ScaledKernel, quad: &QuadratureSpec) -> Result<NormEstimate> {
    quad.validate()?;
    check_generator_model(model)?;
    if func.f().is_zero() {
        let z = Estimate::exact(0.0);
        return Ok(NormEstimate {
            eps: kernel.eps(),
            m2: z,
            heps_sq: z,
            cross: z,
            h0_sq: z,
            m2_minus: z,
            m2_plus: z,
            noise_ratio: 0.0,
            noise_flag: false,
            max_quad_error: 0.0,
        });
    }
    struct Row {
        heps_sq: f64,
        cross: f64,
        h0_sq: f64,
        m2: f64,
        m2_minus: f64,
        m2_plus: f64,
        heps: f64,
        noise: f64,
        quad_error: f64,
    }
    let rows = set.par_map(|i, cfg| {
        let mut rng = stream_rng(quad.seed, tagged(TAG_SAMPLE_EVAL, i as u64));
        let he = apply_heps(model, func, cfg, kernel, quad, &mut rng);
        let h0 = apply_h0(model, func, cfg, quad);
        let [a, b] = he.minus_halves;
        let p = he.plus;
        Row {
            heps_sq: (a + p) * (b + p),
            cross: he.value * h0.value,
            h0_sq: h0.value * h0.value,
            m2: (a + p - h0.value) * (b + p - h0.value),
            m2_minus: (a - h0.minus) * (b - h0.minus),
            m2_plus: (p - h0.plus) * (p - h0.plus),
            heps: he.value,
            noise: he.stderr * he.stderr,
            quad_error: he.quad_error.max(h0.quad_error),
        }
    });
    let col = |f: &dyn Fn(&Row) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let heps_sq = set.estimate(&col(&|r| r.heps_sq));
    let cross = set.estimate(&col(&|r| r.cross));
    let h0_sq = set.estimate(&col(&|r| r.h0_sq));
    let m2_direct = set.estimate(&col(&|r| r.m2));
    let m2 = Estimate::new(heps_sq.value - 2.0 * cross.value + h0_sq.value, m2_direct.stderr);
    let spread = variance(&col(&|r| r.heps));
    let noise = mean(&col(&|r| r.noise));
    let noise_ratio = if spread > 0.0 { noise / spread } else { 0.0 };
    Ok(NormEstimate {
        eps: kernel.eps(),
        m2,
        heps_sq,
        cross,
        h0_sq,
        m2_minus: set.estimate(&col(&|r| r.m2_minus)),
        m2_plus: set.estimate(&col(&|r| r.m2_plus)),
        noise_ratio,
        noise_flag: noise_ratio > 1.0,
        max_quad_error: rows.iter().map(|r| r.quad_error).fold(0.0, f64::max),
    })
}

/// Direct sample moments of the birth-death generator parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H0Moments {
    pub minus_sq: Estimate,
    pub plus_sq: Estimate,
    pub mixed: Estimate,
    pub h0_sq: Estimate,
}

pub fn h0_moments_direct(set: &SampleSet, model: &ModelParams, func: &ExpCylinderFunction, quad: &QuadratureSpec) -> Result<H0Moments> {
    quad.validate()?;
    check_generator_model(model)?;
    let vals = set.par_map(|_, cfg| {
        let h = apply_h0(model, func, cfg, quad);
        (h.minus, h.plus, h.value)
    });
    let est = |f: &dyn Fn(&(f64, f64, f64)) -> f64| set.estimate(&vals.iter().map(f).collect::<Vec<_>>());
    Ok(H0Moments {
        minus_sq: est(&|v| v.0 * v.0),
        plus_sq: est(&|v| v.1 * v.1),
        mixed: est(&|v| v.0 * v.1),
        h0_sq: est(&|v| v.2 * v.2),
    })
}

/// Second-moment terms available in reduced form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    #[serde(rename = "H0_minus_sq")]
    H0MinusSq,
    #[serde(rename = "H0_plus_sq")]
    H0PlusSq,
    #[serde(rename = "H0_cross_mixed")]
    H0CrossMixed,
    #[serde(rename = "Heps_minus_sq")]
    HepsMinusSq,
    #[serde(rename = "Heps_plus_sq")]
    HepsPlusSq,
    #[serde(rename = "cross_minus")]
    CrossMinus,
    #[serde(rename = "cross_plus")]
    CrossPlus,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::H0MinusSq,
        Term::H0PlusSq,
        Term::H0CrossMixed,
        Term::HepsMinusSq,
        Term::HepsPlusSq,
        Term::CrossMinus,
        Term::CrossPlus,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Term::H0MinusSq => "H0_minus_sq",
            Term::H0PlusSq => "H0_plus_sq",
            Term::H0CrossMixed => "H0_cross_mixed",
            Term::HepsMinusSq => "Heps_minus_sq",
            Term::HepsPlusSq => "Heps_plus_sq",
            Term::CrossMinus => "cross_minus",
            Term::CrossPlus => "cross_plus",
        }
    }

    pub fn needs_kernel(&self) -> bool {
        !matches!(self, Term::H0MinusSq | Term::H0PlusSq | Term::H0CrossMixed)
    }
}

impl FromStr for Term {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Term::ALL.into_iter().find(|t| t.id() == s).ok_or_else(|| Error::UnknownTerm(s.to_string()))
    }
}

/// Deterministic grids and pair tables shared by all samples.
struct ReducedContext<'a> {
    model: &'a ModelParams,
    f: &'a TestFunction,
    kernel: Option<&'a ScaledKernel>,
    kernel_samples: usize,
    /// Midpoint grid over the support of `f`.
    nodes: Vec<Point>,
    w: f64,
    g: Vec<f64>,
    /// `φ(x_j - x_k)` on the support grid.
    phi: Vec<f64>,
    /// Grid over the support widened by the kernel range.
    outer: Vec<Point>,
    w_outer: f64,
    g_outer: Vec<f64>,
    /// `a_ε(X_i - x_k)` between outer and support nodes.
    a_outer: Vec<f64>,
    /// `φ(X_i - x_k)` between outer and support nodes.
    phi_outer: Vec<f64>,
}

impl<'a> ReducedContext<'a> {
    fn new(model: &'a ModelParams, f: &'a TestFunction, kernel: Option<&'a ScaledKernel>, quad: &QuadratureSpec) -> Self {
        let t = model.torus();
        let pot = model.potential();
        let sb = f.support_box();
        let (nodes, w) = sb.midpoint_grid(t, quad.grid_per_axis);
        let g: Vec<f64> = nodes.iter().map(|x| f.eval(x).exp()).collect();
        let n = nodes.len();
        let mut phi = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                phi[j * n + k] = pot.at(t.distance(&nodes[j], &nodes[k]));
            }
        }
        let (outer, w_outer) = match kernel {
            Some(k) => {
                let half = (sb.half_width + k.range()).min(t.half_side());
                SupportBox { center: sb.center.clone(), half_width: half }.midpoint_grid(t, quad.grid_per_axis)
            }
            None => (Vec::new(), 0.0),
        };
        let g_outer = outer.iter().map(|x| f.eval(x).exp()).collect();
        let mut a_outer = vec![0.0; outer.len() * n];
        let mut phi_outer = vec![0.0; outer.len() * n];
        if let Some(k) = kernel {
            for (i, x) in outer.iter().enumerate() {
                for (j, y) in nodes.iter().enumerate() {
                    let r = t.distance(x, y);
                    a_outer[i * n + j] = k.radial(r);
                    phi_outer[i * n + j] = pot.at(r);
                }
            }
        }
        ReducedContext {
            model,
            f,
            kernel,
            kernel_samples: quad.kernel_samples,
            nodes,
            w,
            g,
            phi,
            outer,
            w_outer,
            g_outer,
            a_outer,
            phi_outer,
        }
    }

    fn kernel(&self) -> &ScaledKernel {
        self.kernel.expect("kernel term without kernel")
    }

    /// Landing points `x_j + W` for every support node, one independent set
    /// of draws per call.
    fn landings<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<Point>> {
        let t = self.model.torus();
        let k = self.kernel();
        self.nodes
            .iter()
            .map(|x| k.stratified_samples(self.kernel_samples, rng).iter().map(|d| t.translate(x, &d.vector)).collect())
            .collect()
    }

    fn integrand<R: Rng + ?Sized>(&self, term: Term, cfg: &Configuration, rng: &mut R) -> f64 {
        let model = self.model;
        let pot = model.potential();
        let s = model.s();
        let z = model.z();
        let t = model.torus();
        let n = self.nodes.len();
        let w = self.w;
        let g = &self.g;
        let e: Vec<f64> = self.nodes.iter().map(|x| pot.relative_energy(cfg, x, None)).collect();
        let two_f = (2.0 * self.f.pair(cfg)).exp();
        let ex = |c: f64, v: f64| (c * v).exp();
        let value = match term {
            Term::H0MinusSq => {
                let diag: f64 = (0..n).map(|j| (g[j] - 1.0).powi(2) * ex(2.0 * s - 1.0, e[j])).sum::<f64>() * z * w;
                let a: Vec<f64> = (0..n).map(|j| g[j] * (g[j] - 1.0) * ex(s - 1.0, e[j])).collect();
                let mut off = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        off += a[j] * a[k] * ex(2.0 * s - 1.0, self.phi[j * n + k]);
                    }
                }
                diag + z * z * w * w * off
            }
            Term::H0PlusSq => {
                let i: f64 = (0..n).map(|j| (g[j] - 1.0) * ex(s - 1.0, e[j])).sum::<f64>() * w;
                z * z * i * i
            }
            Term::H0CrossMixed => {
                let mut sum = 0.0;
                for j in 0..n {
                    let aj = g[j] * (1.0 - g[j]) * ex(s - 1.0, e[j]);
                    for k in 0..n {
                        sum += aj * (g[k] - 1.0) * ex(s - 1.0, e[k]) * ex(s - 1.0, self.phi[j * n + k]);
                    }
                }
                z * z * w * w * sum
            }
            Term::HepsMinusSq => {
                let mass = self.kernel().mass();
                let la = self.landings(rng);
                let lb = self.landings(rng);
                let ea: Vec<Vec<f64>> = la.iter().map(|ys| ys.iter().map(|y| pot.relative_energy(cfg, y, None)).collect()).collect();
                let eb: Vec<Vec<f64>> = lb.iter().map(|ys| ys.iter().map(|y| pot.relative_energy(cfg, y, None)).collect()).collect();
                let m = |v: &[f64]| mean(&v.iter().map(|x| ex(s - 1.0, *x)).collect::<Vec<_>>());
                let diag: f64 = (0..n).map(|j| (g[j] - 1.0).powi(2) * ex(2.0 * s - 1.0, e[j]) * mass * m(&ea[j]) * mass * m(&eb[j])).sum::<f64>() * z * w;
                let a: Vec<f64> = (0..n).map(|j| g[j] * (g[j] - 1.0) * ex(s - 1.0, e[j])).collect();
                // bracket at node j shifted by the partner node k
                let bracket = |land: &[Point], en: &[f64], k: usize| {
                    let xk = &self.nodes[k];
                    land.iter().zip(en).map(|(y, ey)| ex(s - 1.0, ey + pot.at(t.distance(y, xk)))).sum::<f64>() / land.len() as f64 * mass
                };
                let mut off = 0.0;
                for j in 0..n {
                    if a[j] == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        if a[k] == 0.0 {
                            continue;
                        }
                        off += a[j] * a[k] * ex(2.0 * s - 1.0, self.phi[j * n + k]) * bracket(&la[j], &ea[j], k) * bracket(&lb[k], &eb[k], j);
                    }
                }
                diag + z * z * w * w * off
            }
            Term::CrossMinus => {
                let mass = self.kernel().mass();
                let la = self.landings(rng);
                let ea: Vec<Vec<f64>> = la.iter().map(|ys| ys.iter().map(|y| pot.relative_energy(cfg, y, None)).collect()).collect();
                let diag: f64 = (0..n)
                    .map(|j| (g[j] - 1.0).powi(2) * ex(2.0 * s - 1.0, e[j]) * mass * mean(&ea[j].iter().map(|x| ex(s - 1.0, *x)).collect::<Vec<_>>()))
                    .sum::<f64>()
                    * z
                    * w;
                let a: Vec<f64> = (0..n).map(|j| g[j] * (g[j] - 1.0) * ex(s - 1.0, e[j])).collect();
                let mut off = 0.0;
                for j in 0..n {
                    if a[j] == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        if a[k] == 0.0 {
                            continue;
                        }
                        let xj = &self.nodes[j];
                        let br = la[k].iter().zip(&ea[k]).map(|(y, ey)| ex(s - 1.0, ey + pot.at(t.distance(y, xj)))).sum::<f64>() / la[k].len() as f64 * mass;
                        off += a[j] * a[k] * ex(2.0 * s - 1.0, self.phi[j * n + k]) * br;
                    }
                }
                diag + z * z * w * w * off
            }
            Term::HepsPlusSq | Term::CrossPlus => {
                let no = self.outer.len();
                let eo: Vec<f64> = self.outer.iter().map(|x| pot.relative_energy(cfg, x, None)).collect();
                let wy = w;
                let hy: Vec<f64> = (0..n).map(|k| ex(s - 1.0, e[k]) * (g[k] - 1.0)).collect();
                // Q(X_i) = ∫ a_ε(X_i - y) e^{(s-1)E(y)} (g(y) - 1) dy
                let q: Vec<f64> = (0..no).map(|i| (0..n).map(|k| self.a_outer[i * n + k] * hy[k]).sum::<f64>() * wy).collect();
                if term == Term::CrossPlus {
                    let mut sum = 0.0;
                    for i in 0..no {
                        if q[i] == 0.0 {
                            continue;
                        }
                        let r: f64 = (0..n).map(|j| hy[j] * ex(s - 1.0, self.phi_outer[i * n + j])).sum::<f64>() * w;
                        sum += ex(s - 1.0, eo[i]) * self.g_outer[i] * q[i] * r;
                    }
                    z * z * self.w_outer * sum
                } else {
                    let diag: f64 = (0..no).map(|i| ex(2.0 * s - 1.0, eo[i]) * q[i] * q[i]).sum::<f64>() * z * self.w_outer;
                    // Q(X_i; X_l) with the extra factor e^{(s-1)φ(y - X_l)}
                    let near: Vec<Vec<usize>> = (0..no).map(|l| (0..n).filter(|&k| self.phi_outer[l * n + k] != 0.0).collect()).collect();
                    let qq = |i: usize, l: usize| {
                        let mut v = q[i];
                        for &k in &near[l] {
                            v += self.a_outer[i * n + k] * hy[k] * (ex(s - 1.0, self.phi_outer[l * n + k]) - 1.0) * wy;
                        }
                        v
                    };
                    let b: Vec<f64> = (0..no).map(|i| ex(s - 1.0, eo[i]) * self.g_outer[i]).collect();
                    let mut off = 0.0;
                    for i in 0..no {
                        for l in 0..no {
                            let q1 = qq(i, l);
                            if q1 == 0.0 {
                                continue;
                            }
                            let phi = pot.at(t.distance(&self.outer[i], &self.outer[l]));
                            off += b[i] * b[l] * ex(2.0 * s - 1.0, phi) * q1 * qq(l, i);
                        }
                    }
                    diag + z * z * self.w_outer * self.w_outer * off
                }
            }
        };
        two_f * value
    }
}

/// A second-moment term in reduced form: outer midpoint quadrature, kernel
/// draws for the hop integrals, and one Gibbs expectation over the samples
/// shared by all nodes.
pub fn reduced_second_moment(
    set: &SampleSet,
    model: &ModelParams,
    func: &ExpCylinderFunction,
    term: Term,
    kernel: Option<&ScaledKernel>,
    quad: &QuadratureSpec,
) -> Result<Estimate> {
    quad.validate()?;
    check_generator_model(model)?;
    if term.needs_kernel() && kernel.is_none() {
        return Err(Error::Precondition(format!("term {} needs a scaled kernel", term.id())));
    }
    if func.f().is_zero() {
        return Ok(Estimate::exact(0.0));
    }
    let ctx = ReducedContext::new(model, func.f(), kernel, quad);
    let vals = set.par_map(|i, cfg| {
        let mut rng = stream_rng(quad.seed, tagged(TAG_KERNEL_NODES, i as u64));
        ctx.integrand(term, cfg, &mut rng)
    });
    Ok(set.estimate(&vals))
}

/// Squared distances of the minus and plus parts, each assembled per
/// sample from the reduced terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedSplit {
    pub minus: Estimate,
    pub plus: Estimate,
}

pub fn reduced_split_norms(set: &SampleSet, model: &ModelParams, func: &ExpCylinderFunction, kernel: &ScaledKernel, quad: &QuadratureSpec) -> Result<ReducedSplit> {
    quad.validate()?;
    check_generator_model(model)?;
    let ctx = ReducedContext::new(model, func.f(), Some(kernel), quad);
    let vals = set.par_map(|i, cfg| {
        let mut rng = stream_rng(quad.seed, tagged(TAG_KERNEL_NODES, i as u64));
        let mut v = |t| ctx.integrand(t, cfg, &mut rng);
        let minus = v(Term::HepsMinusSq) - 2.0 * v(Term::CrossMinus) + v(Term::H0MinusSq);
        let plus = v(Term::HepsPlusSq) - 2.0 * v(Term::CrossPlus) + v(Term::H0PlusSq);
        (minus, plus)
    });
    Ok(ReducedSplit {
        minus: set.estimate(&vals.iter().map(|v| v.0).collect::<Vec<_>>()),
        plus: set.estimate(&vals.iter().map(|v| v.1).collect::<Vec<_>>()),
    })
}

/// Sign of the test function in the factorization exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiSign {
    #[default]
    Plus,
    Minus,
}

impl PsiSign {
    fn factor(&self) -> f64 {
        match self {
            PsiSign::Plus => 1.0,
            PsiSign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationSpec {
    pub a: f64,
    pub b: f64,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub psi_sign: PsiSign,
    /// Torus translations averaged per sample.
    pub translations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationRow {
    pub eps: f64,
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub gap: Estimate,
    pub z_score: f64,
    /// Probe separation on the torus.
    pub separation: f64,
    /// Probes too close to each other or to the test function's support.
    pub vacuous: bool,
}

/// Smallest `ε` keeping both scaled probe offsets within half the box.
pub fn smallest_admissible_eps(spec: &FactorizationSpec, torus: &Torus, candidates: &[f64]) -> Option<f64> {
    candidates.iter().copied().filter(|&e| probe_offsets_fit(spec, torus, e)).fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.min(e))))
}

fn probe_offsets_fit(spec: &FactorizationSpec, torus: &Torus, eps: f64) -> bool {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    norm(&spec.x1) / eps <= torus.half_side() && norm(&spec.y1) / eps <= torus.half_side()
}

/// Compares `E[exp(-A E(p1) - B E(p2) ± <ψ, γ>)]` with the product of the
/// three single expectations, where `p1 = x1/ε + x2`, `p2 = y1/ε + y2`.
pub fn factorization_check(set: &SampleSet, model: &ModelParams, spec: &FactorizationSpec, psi: &TestFunction, epsilons: &[f64]) -> Result<Vec<FactorizationRow>> {
    if !(spec.a >= 0.0 && spec.b >= 0.0) {
        return Err(Error::InvalidParameter("factorization coefficients must be nonnegative".into()));
    }
    if spec.x1 == spec.y1 {
        return Err(Error::InvalidParameter("x1 and y1 must differ".into()));
    }
    let t = *model.torus();
    let d = t.dim();
    for v in [&spec.x1, &spec.x2, &spec.y1, &spec.y2] {
        if v.len() != d {
            return Err(Error::InvalidParameter("probe dimension differs from the torus".into()));
        }
    }
    let pot = model.potential();
    let sign = spec.psi_sign.factor();
    let tr = spec.translations.max(1);
    let shifts: Vec<Coords> = (0..tr).map(|k| (0..d).map(|_| k as f64 * t.side() / tr as f64).collect()).collect();
    let psis: Vec<TestFunction> = shifts.iter().map(|sh| psi.recentered(&t.translate(psi.center(), sh))).collect();
    let mut rows = Vec::new();
    for &eps in epsilons {
        if !(eps > 0.0) || !probe_offsets_fit(spec, &t, eps) {
            return Err(Error::InvalidParameter(format!("eps {eps} puts a probe beyond half the box")));
        }
        let p1: Vec<f64> = spec.x1.iter().zip(&spec.x2).map(|(a, b)| a / eps + b).collect();
        let p2: Vec<f64> = spec.y1.iter().zip(&spec.y2).map(|(a, b)| a / eps + b).collect();
        let p1 = t.wrap(&p1);
        let p2 = t.wrap(&p2);
        let separation = t.distance(&p1, &p2);
        let reach = pot.cutoff();
        let vacuous = separation < 2.0 * reach + psi.radius()
            || t.distance(&p1, psi.center()) < reach + psi.radius()
            || t.distance(&p2, psi.center()) < reach + psi.radius();
        let per = set.par_map(|_, cfg| {
            let (mut x, mut u, mut v, mut w) = (0.0, 0.0, 0.0, 0.0);
            for (sh, psi_t) in shifts.iter().zip(&psis) {
                let q1 = t.translate(&p1, sh);
                let q2 = t.translate(&p2, sh);
                let e1 = if spec.a == 0.0 { 0.0 } else { -spec.a * pot.relative_energy(cfg, &q1, None) };
                let e2 = if spec.b == 0.0 { 0.0 } else { -spec.b * pot.relative_energy(cfg, &q2, None) };
                let ps = sign * psi_t.pair(cfg);
                x += (e1 + e2 + ps).exp();
                u += e1.exp();
                v += e2.exp();
                w += ps.exp();
            }
            let k = shifts.len() as f64;
            (x / k, u / k, v / k, w / k)
        });
        let col = |f: &dyn Fn(&(f64, f64, f64, f64)) -> f64| per.iter().map(f).collect::<Vec<f64>>();
        let (xs, us, vs, ws) = (col(&|r| r.0), col(&|r| r.1), col(&|r| r.2), col(&|r| r.3));
        let (um, vm, wm) = (mean(&us), mean(&vs), mean(&ws));
        let lhs = set.estimate(&xs);
        let rhs_value = um * vm * wm;
        // delta-method linearization of LHS - U V W per sample
        let lin: Vec<f64> = (0..xs.len())
            .map(|i| xs[i] - (us[i] * vm * wm + um * vs[i] * wm + um * vm * ws[i]) + 2.0 * rhs_value)
            .collect();
        let gap_se = set.estimate(&lin).stderr;
        let rhs_lin: Vec<f64> = (0..xs.len()).map(|i| us[i] * vm * wm + um * vs[i] * wm + um * vm * ws[i] - 2.0 * rhs_value).collect();
        let rhs = Estimate::new(rhs_value, set.estimate(&rhs_lin).stderr);
        let gap = Estimate::new(lhs.value - rhs_value, gap_se);
        rows.push(FactorizationRow { eps, lhs, rhs, gap, z_score: z_score(gap.value, gap.stderr), separation, vacuous });
    }
    Ok(rows)
}

/// Full configuration of a scaling study.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingStudy {
    pub model: ModelParams,
    pub f: TestFunction,
    pub kernel: Kernel,
    pub epsilons: Vec<f64>,
    pub sampler: SamplerConfig,
    pub quad: QuadratureSpec,
    pub normalization_probes: usize,
    /// Run the direct-versus-reduced comparison of the birth-death moments
    /// on an independent ensemble of this many samples per chain (0 = skip).
    pub cross_check_samples: usize,
    pub stability_trials: usize,
}

impl ScalingStudy {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::InvalidParameter("need at least one eps".into()));
        }
        if !self.epsilons.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::InvalidParameter("epsilons must be strictly decreasing".into()));
        }
        for &e in &self.epsilons {
            ScaledKernel::new(self.kernel, e, *self.model.torus())?;
        }
        self.quad.validate()?;
        self.sampler.validate()?;
        check_generator_model(&self.model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckRow {
    pub term: Term,
    pub reduced: Estimate,
    pub direct: Estimate,
    pub z_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub eps_hi: f64,
    pub eps_lo: f64,
    pub drop: f64,
    pub combined_stderr: f64,
    pub decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub pairs: Vec<PairVerdict>,
    pub strictly_decreasing: bool,
    /// `m2(last) / m2(first)`.
    pub ratio: f64,
    pub ratio_target: f64,
    pub ratio_ok: bool,
}

/// Target for `m2(smallest ε) / m2(largest ε)`.
pub const RATIO_TARGET: f64 = 0.25;

pub fn verdicts(rows: &[NormEstimate]) -> Verdicts {
    let pairs: Vec<PairVerdict> = rows
        .windows(2)
        .map(|w| {
            let drop = w[0].m2.value - w[1].m2.value;
            let se = w[0].m2.stderr.hypot(w[1].m2.stderr);
            PairVerdict { eps_hi: w[0].eps, eps_lo: w[1].eps, drop, combined_stderr: se, decreasing: drop > se }
        })
        .collect();
    let first = rows.first().map_or(0.0, |r| r.m2.value);
    let last = rows.last().map_or(0.0, |r| r.m2.value);
    let ratio = if first > 0.0 { last / first } else { f64::NAN };
    Verdicts {
        strictly_decreasing: pairs.iter().all(|p| p.decreasing),
        pairs,
        ratio,
        ratio_target: RATIO_TARGET,
        ratio_ok: ratio <= RATIO_TARGET,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub s: f64,
    pub laht: LahtCheck,
    pub stability: StabilityCheck,
    pub diagnostics: Option<Diagnostics>,
    pub normalization: NormalizationRecord,
    pub rows: Vec<NormEstimate>,
    pub cross_check: Vec<CrossCheckRow>,
    pub verdicts: Verdicts,
    pub seed: u64,
    pub wall_seconds: f64,
}

/// Quadrature resolution for the LA-HT integral.
const LAHT_RESOLUTION: usize = 4096;

/// Preconditions, sampling, normalization, one norm row per `ε`, and the
/// reduced-form cross-check.
pub fn run_study(study: &ScalingStudy) -> Result<StudyReport> {
    run_study_with_samples(study).map(|(r, _)| r)
}

/// As [`run_study`], also returning the Gibbs ensemble for further checks.
pub fn run_study_with_samples(study: &ScalingStudy) -> Result<(StudyReport, SampleSet)> {
    let start = Instant::now();
    study.validate()?;
    let model = &study.model;
    let laht = check_laht(model, LAHT_RESOLUTION);
    if !laht.satisfied {
        return Err(Error::Precondition(format!(
            "low-activity high-temperature condition violated: {:.6} >= {:.6}",
            laht.lhs, laht.rhs
        )));
    }
    let stability = check_stability(model.potential(), study.stability_trials, study.sampler.seed).into_result()?;
    let set = sample_ensemble(model, &study.sampler)?;
    let (kernel, normalization) = normalize_kernel(&set, model, &study.kernel, study.normalization_probes)?;
    let func = ExpCylinderFunction::new(study.f.clone());
    let mut rows = Vec::with_capacity(study.epsilons.len());
    for &eps in &study.epsilons {
        let sk = ScaledKernel::new(kernel, eps, *model.torus())?;
        rows.push(l2_norm_direct(&set, model, &func, &sk, &study.quad)?);
    }
    let mut cross_check = Vec::new();
    if study.cross_check_samples > 0 {
        let independent = SamplerConfig {
            seed: study.sampler.seed.wrapping_add(0x9e37_79b9),
            samples_per_chain: study.cross_check_samples,
            ..study.sampler
        };
        let other = sample_ensemble(model, &independent)?;
        let direct = h0_moments_direct(&other, model, &func, &study.quad)?;
        for (term, d) in [(Term::H0MinusSq, direct.minus_sq), (Term::H0PlusSq, direct.plus_sq), (Term::H0CrossMixed, direct.mixed)] {
            let r = reduced_second_moment(&set, model, &func, term, None, &study.quad)?;
            cross_check.push(CrossCheckRow { term, reduced: r, direct: d, z_score: r.z_between(&d) });
        }
    }
    let verdicts = verdicts(&rows);
    let report = StudyReport {
        s: model.s(),
        laht,
        stability,
        diagnostics: set.diagnostics().cloned(),
        normalization,
        rows,
        cross_check,
        verdicts,
        seed: study.sampler.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, set))
}

/// Norm rows as CSV.
pub fn write_norms_csv(rows: &[NormEstimate], out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "eps",
        "m2",
        "m2_stderr",
        "heps_sq",
        "heps_sq_stderr",
        "cross",
        "cross_stderr",
        "h0_sq",
        "h0_sq_stderr",
        "m2_minus",
        "m2_minus_stderr",
        "m2_plus",
        "m2_plus_stderr",
    ])?;
    for r in rows {
        let cells: Vec<String> = [
            r.eps,
            r.m2.value,
            r.m2.stderr,
            r.heps_sq.value,
            r.heps_sq.stderr,
            r.cross.value,
            r.cross.stderr,
            r.h0_sq.value,
            r.h0_sq.stderr,
            r.m2_minus.value,
            r.m2_minus.stderr,
            r.m2_plus.value,
            r.m2_plus.stderr,
        ]
        .iter()
        .map(|v| v.to_string())
        .collect();
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

/// Factorization rows as CSV.
pub fn write_factorization_csv(rows: &[FactorizationRow], out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["eps", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "gap", "gap_stderr", "z_score", "separation", "vacuous"])?;
    for r in rows {
        let mut cells: Vec<String> = [r.eps, r.lhs.value, r.lhs.stderr, r.rhs.value, r.rhs.stderr, r.gap.value, r.gap.stderr, r.z_score, r.separation]
            .iter()
            .map(|v| v.to_string())
            .collect();
        cells.push(r.vacuous.to_string());
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::KernelShape;
    use crate::generators::apply_heps_dense;
    use crate::gibbs::sample_poisson;
    use crate::potential::PairPotential;

    fn torus1() -> Torus {
        Torus::new(1, 100.0).unwrap()
    }
    fn tent(amp: f64) -> ExpCylinderFunction {
        ExpCylinderFunction::new(TestFunction::tent(torus1(), amp, 2.0).unwrap())
    }
    fn soft(s: f64) -> ModelParams {
        ModelParams::new(0.05, s, PairPotential::soft_disk(1.0, 1.0).unwrap(), torus1()).unwrap()
    }
    fn ideal(s: f64) -> ModelParams {
        ModelParams::new(0.05, s, PairPotential::zero(), torus1()).unwrap()
    }
    fn tri() -> Kernel {
        Kernel::new(1, KernelShape::Triangular, 1.0, 1.0).unwrap()
    }
    fn sampler(m: &ModelParams, seed: u64, per_chain: usize) -> SamplerConfig {
        SamplerConfig { burnin: 20_000, thinning: 100, seed, chains: 4, samples_per_chain: per_chain, ..SamplerConfig::for_model(m) }
    }
    fn tent_integral() -> f64 {
        4.0 * (1.0 / 2f64.ln() - 1.0)
    }

    #[test]
    fn ideal_gas_normalization_is_exact() {
        let m = ideal(0.0);
        let set = sample_poisson(torus1(), 0.05, 2, 100, 1);
        let (k, rec) = normalize_kernel(&set, &m, &Kernel::new(1, KernelShape::Triangular, 3.0, 1.0).unwrap(), 64).unwrap();
        assert_eq!(rec.c, Estimate::exact(1.0));
        assert_eq!(k.mass(), 1.0);
    }

    #[test]
    fn normalization_monotone_in_s_and_halves_agree() {
        let m0 = soft(0.0);
        let set = sample_ensemble(&m0, &sampler(&m0, 2, 1000)).unwrap();
        let (_, r0) = normalize_kernel(&set, &m0, &tri(), 100).unwrap();
        let (_, rh) = normalize_kernel(&set, &soft(0.5), &tri(), 100).unwrap();
        assert!(rh.c.value >= r0.c.value);
        assert!(r0.halves_z.abs() < 3.0);
        assert!(r0.c.stderr / r0.c.value <= NORMALIZATION_REL_TOL);
        assert!((r0.mass - 1.0 / r0.c.value).abs() < 1e-12);
    }

    #[test]
    fn zero_function_gives_zero_norms_and_terms() {
        let m = soft(0.25);
        let set = sample_poisson(torus1(), 0.05, 2, 50, 2);
        let sk = ScaledKernel::new(tri(), 0.5, torus1()).unwrap();
        let q = QuadratureSpec::new(16, 16).unwrap();
        let n = l2_norm_direct(&set, &m, &tent(0.0), &sk, &q).unwrap();
        assert_eq!(n.m2.value, 0.0);
        assert_eq!(n.h0_sq.value, 0.0);
        for t in Term::ALL {
            assert_eq!(reduced_second_moment(&set, &m, &tent(0.0), t, Some(&sk), &q).unwrap().value, 0.0);
        }
    }

    #[test]
    fn unknown_term_rejected() {
        assert!(matches!("H1_minus_sq".parse::<Term>(), Err(Error::UnknownTerm(_))));
        for t in Term::ALL {
            assert_eq!(t.id().parse::<Term>().unwrap(), t);
        }
    }

    #[test]
    fn ideal_gas_unit_mass_only_plus_parts_differ() {
        let m = ideal(0.25);
        let set = sample_poisson(torus1(), 0.05, 4, 500, 3);
        let k = tri().with_mass(1.0).unwrap();
        let sk = ScaledKernel::new(k, 0.5, torus1()).unwrap();
        let q = QuadratureSpec::new(32, 16).unwrap();
        let n = l2_norm_direct(&set, &m, &tent(2f64.ln()), &sk, &q).unwrap();
        assert_eq!(n.m2_minus.value, 0.0);
        assert!((n.m2.value - n.m2_plus.value).abs() < 1e-9 * n.m2_plus.value.max(1e-12));
    }

    #[test]
    fn ideal_gas_plus_part_closed_form() {
        // Under Poisson the weight e^{2<f,γ>} tilts the intensity to z e^{2f}, so
        // m2 = E[F²] (z ∫q² + z² (∫h q)²) with h = e^f - 1 and q = a_ε * h.
        let z = 0.05;
        let m = ideal(0.0);
        let set = sample_poisson(torus1(), z, 8, 5000, 7);
        let k = tri().with_mass(1.0).unwrap();
        let f = tent(2f64.ln());
        let q = QuadratureSpec::new(128, 16).unwrap();
        let c = torus1().center()[0];
        let h = |x: f64| f.f().eval(&[x]).exp_m1();
        for eps in [1.0, 0.25] {
            let sk = ScaledKernel::new(k, eps, torus1()).unwrap();
            let dx = 1e-3;
            let ys: Vec<f64> = (0..4000).map(|i| c - 2.0 + (i as f64 + 0.5) * dx).collect();
            let reach = 2.0 + sk.range();
            let nx = (2.0 * reach / 0.01) as usize;
            let (mut q2, mut hq) = (0.0, 0.0);
            for i in 0..nx {
                let x = c - reach + (i as f64 + 0.5) * 0.01;
                let qx: f64 = ys.iter().map(|&y| sk.radial((x - y).abs()) * h(y)).sum::<f64>() * dx;
                q2 += qx * qx * 0.01;
                hq += h(x) * qx * 0.01;
            }
            let ef2 = (z * f.f().radial_integral(|v| (2.0 * v).exp_m1(), 20_000)).exp();
            let exact = ef2 * (z * q2 + z * z * hq * hq);
            let n = l2_norm_direct(&set, &m, &f, &sk, &q).unwrap();
            assert!(n.m2_plus.z_against(exact).abs() < 3.0, "eps={eps} {:?} vs {exact}", n.m2_plus);
        }
    }

    #[test]
    fn assembly_identity_is_exact() {
        let m = soft(0.0);
        let set = sample_poisson(torus1(), 0.05, 2, 300, 4);
        let sk = ScaledKernel::new(tri(), 1.0, torus1()).unwrap();
        let q = QuadratureSpec::new(32, 16).unwrap();
        let n = l2_norm_direct(&set, &m, &tent(2f64.ln()), &sk, &q).unwrap();
        assert_eq!(n.m2.value, n.heps_sq.value - 2.0 * n.cross.value + n.h0_sq.value);
        assert!(n.m2.value > -2.0 * n.m2.stderr);
    }

    #[test]
    fn single_eps_ideal_gas_matches_dense_oracle_on_small_configurations() {
        // per-configuration plus-part mismatch against the dense evaluator
        let m = ideal(0.0);
        let k = tri().with_mass(1.0).unwrap();
        let sk = ScaledKernel::new(k, 1.0, torus1()).unwrap();
        let q = QuadratureSpec::new(256, 16).unwrap();
        let f = tent(2f64.ln());
        let set = sample_poisson(torus1(), 0.05, 1, 40, 5);
        let mut checked = 0;
        for i in 0..set.len() {
            let c = set.config(i);
            if c.len() > 6 {
                continue;
            }
            let mut rng = stream_rng(1, i as u64);
            let he = apply_heps(&m, &f, &c, &sk, &q, &mut rng);
            let dense = apply_heps_dense(&m, &f, &c, &sk, 2000);
            assert!((he.value - dense).abs() < 3.0 * he.quad_error + 1e-3 * (1.0 + dense.abs()), "{he:?} {dense}");
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn reduced_plus_sq_ideal_gas_closed_form() {
        let z = 0.05;
        let m = ideal(0.25);
        let set = sample_poisson(torus1(), z, 4, 4000, 6);
        let q = QuadratureSpec::new(256, 16).unwrap();
        let f = tent(2f64.ln());
        let r = reduced_second_moment(&set, &m, &f, Term::H0PlusSq, None, &q).unwrap();
        // E[e^{<2f,γ>}] = exp(z ∫ (e^{2f} - 1)) with ∫(4^{tent} - 1) = 4(3/(2 ln 4)... ) computed below
        let int2 = f.f().radial_integral(|v| (2.0 * v).exp_m1(), 20_000);
        let exact = z * z * tent_integral().powi(2) * (z * int2).exp();
        assert!(r.z_against(exact).abs() < 3.0, "{r:?} vs {exact}");
    }

    #[test]
    fn reduced_h0_terms_match_direct_moments() {
        for s in [0.0, 0.5] {
            let m = soft(s);
            let a = sample_ensemble(&m, &sampler(&m, 10, 2000)).unwrap();
            let b = sample_ensemble(&m, &sampler(&m, 11, 2000)).unwrap();
            let q = QuadratureSpec::new(64, 16).unwrap();
            let f = tent(2f64.ln());
            let direct = h0_moments_direct(&b, &m, &f, &q).unwrap();
            for (t, d) in [(Term::H0MinusSq, direct.minus_sq), (Term::H0PlusSq, direct.plus_sq), (Term::H0CrossMixed, direct.mixed)] {
                let r = reduced_second_moment(&a, &m, &f, t, None, &q).unwrap();
                assert!(r.z_between(&d).abs() < 3.0, "s={s} {t:?} reduced {r:?} direct {d:?}");
            }
        }
    }

    #[test]
    fn reduced_split_matches_direct_split() {
        let m = soft(0.25);
        let a = sample_ensemble(&m, &sampler(&m, 20, 1000)).unwrap();
        let b = sample_ensemble(&m, &sampler(&m, 21, 1000)).unwrap();
        let (k, _) = normalize_kernel(&a, &m, &tri(), 100).unwrap();
        let sk = ScaledKernel::new(k, 0.5, torus1()).unwrap();
        let q = QuadratureSpec::new(32, 16).unwrap();
        let f = tent(2f64.ln());
        let red = reduced_split_norms(&a, &m, &f, &sk, &q).unwrap();
        let dir = l2_norm_direct(&b, &m, &f, &sk, &q).unwrap();
        assert!(red.minus.z_between(&dir.m2_minus).abs() < 3.0, "{red:?} {dir:?}");
        assert!(red.plus.z_between(&dir.m2_plus).abs() < 3.0, "{red:?} {dir:?}");
    }

    fn fspec(a: f64, b: f64) -> FactorizationSpec {
        FactorizationSpec { a, b, x1: vec![3.0], x2: vec![50.0], y1: vec![-2.0], y2: vec![50.0], psi_sign: PsiSign::Plus, translations: 16 }
    }

    #[test]
    fn factorization_exact_cases() {
        let psi = TestFunction::tent(torus1(), 2f64.ln(), 2.0).unwrap();
        let m = soft(0.0);
        let set = sample_ensemble(&m, &sampler(&m, 30, 200)).unwrap();
        for row in factorization_check(&set, &m, &fspec(0.0, 0.0), &psi, &[1.0, 0.25]).unwrap() {
            assert_eq!(row.gap.value, 0.0);
            assert_eq!(row.z_score, 0.0);
        }
        let poisson = sample_poisson(torus1(), 0.05, 2, 200, 31);
        for row in factorization_check(&poisson, &ideal(0.0), &fspec(1.0, 1.0), &psi, &[1.0, 0.5]).unwrap() {
            assert_eq!(row.gap.value, 0.0);
        }
    }

    #[test]
    fn factorization_vacuity_and_admissibility() {
        let psi = TestFunction::tent(torus1(), 2f64.ln(), 2.0).unwrap();
        let set = sample_poisson(torus1(), 0.05, 1, 20, 32);
        let rows = factorization_check(&set, &soft(0.0), &fspec(1.0, 1.0), &psi, &[1.0, 0.25]).unwrap();
        assert!(rows[0].vacuous);
        assert!(!rows[1].vacuous);
        assert_eq!(smallest_admissible_eps(&fspec(1.0, 1.0), &torus1(), &[1.0, 0.125, 0.0625, 0.03125]), Some(0.0625));
        assert!(factorization_check(&set, &soft(0.0), &fspec(1.0, 1.0), &psi, &[0.03125]).is_err());
    }

    #[test]
    fn factorization_gap_vanishes_when_separated() {
        let psi = TestFunction::tent(torus1(), 2f64.ln(), 2.0).unwrap();
        let m = soft(0.0);
        let set = sample_ensemble(&m, &sampler(&m, 33, 2000)).unwrap();
        let rows = factorization_check(&set, &m, &fspec(1.0, 1.0), &psi, &[0.0625]).unwrap();
        assert!(rows[0].z_score.abs() < 3.0, "{rows:?}");
    }

    #[test]
    fn verdict_logic() {
        let mk = |eps: f64, v: f64, se: f64| NormEstimate {
            eps,
            m2: Estimate::new(v, se),
            heps_sq: Estimate::exact(0.0),
            cross: Estimate::exact(0.0),
            h0_sq: Estimate::exact(0.0),
            m2_minus: Estimate::exact(0.0),
            m2_plus: Estimate::exact(0.0),
            noise_ratio: 0.0,
            noise_flag: false,
            max_quad_error: 0.0,
        };
        let v = verdicts(&[mk(1.0, 1.0, 0.01), mk(0.5, 0.5, 0.01), mk(0.25, 0.2, 0.01)]);
        assert!(v.strictly_decreasing && v.ratio_ok);
        let v = verdicts(&[mk(1.0, 1.0, 0.3), mk(0.5, 0.8, 0.3)]);
        assert!(!v.strictly_decreasing && !v.ratio_ok);
    }

    #[test]
    fn study_is_deterministic() {
        let m = soft(0.25);
        let study = ScalingStudy {
            model: m,
            f: TestFunction::tent(torus1(), 2f64.ln(), 2.0).unwrap(),
            kernel: tri(),
            epsilons: vec![1.0],
            sampler: SamplerConfig { burnin: 2000, thinning: 50, seed: 40, chains: 2, samples_per_chain: 200, ..SamplerConfig::for_model(&m) },
            quad: QuadratureSpec::new(16, 16).unwrap(),
            normalization_probes: 50,
            cross_check_samples: 50,
            stability_trials: 100,
        };
        let a = run_study(&study).unwrap();
        let b = run_study(&study).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.cross_check, b.cross_check);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_norms_csv(&a.rows, &mut ca).unwrap();
        write_norms_csv(&b.rows, &mut cb).unwrap();
        assert_eq!(ca, cb);
        let bad = ScalingStudy { epsilons: vec![0.5, 1.0], ..study.clone() };
        assert!(run_study(&bad).is_err());
        let inadmissible = ScalingStudy { epsilons: vec![0.01], ..study };
        assert!(matches!(run_study(&inadmissible), Err(Error::InadmissibleEps { .. })));
    }
}
