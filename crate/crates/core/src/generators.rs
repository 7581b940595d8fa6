//! Pointwise application of the birth-death and hopping generators to
//! exponential cylinder functions, Dirichlet forms, and Gibbs expectations
//! of energy exponentials.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{ExpCylinderFunction, ScaledKernel, TestFunction};
use crate::gibbs::SampleSet;
use crate::potential::{boltzmann, ModelParams};
use crate::rng::{stream_rng, tagged, TAG_SAMPLE_EVAL};
use crate::space::{Configuration, ParticleId, Point, SupportBox, Torus};
use crate::stats::{mean, variance, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Midpoint nodes per axis over the support box.
    pub grid_per_axis: usize,
    /// Kernel draws per y-integral.
    pub kernel_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl QuadratureSpec {
    pub fn new(grid_per_axis: usize, kernel_samples: usize) -> Result<Self> {
        let q = QuadratureSpec { grid_per_axis, kernel_samples, seed: 0 };
        q.validate()?;
        Ok(q)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_per_axis < 8 {
            return Err(Error::InvalidParameter(format!("grid_per_axis must be >= 8, got {}", self.grid_per_axis)));
        }
        if self.kernel_samples < 16 {
            return Err(Error::InvalidParameter(format!("kernel_samples must be >= 16, got {}", self.kernel_samples)));
        }
        Ok(())
    }
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { grid_per_axis: 64, kernel_samples: 32, seed: 0 }
    }
}

/// `(H F)(γ)` split into death/minus and birth/plus parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorValue {
    pub value: f64,
    /// Monte Carlo error of `value` (0 when fully deterministic).
    pub stderr: f64,
    pub minus: f64,
    pub plus: f64,
    /// Richardson estimate of the quadrature error of `plus`.
    pub quad_error: f64,
    /// Two conditionally independent estimates of `minus` built from
    /// disjoint kernel draws; both equal `minus` when deterministic.
    pub minus_halves: [f64; 2],
}

impl GeneratorValue {
    fn assemble(minus: f64, plus: f64, stderr: f64, quad_error: f64, minus_halves: [f64; 2]) -> Self {
        GeneratorValue { value: minus + plus, stderr, minus, plus, quad_error, minus_halves }
    }
}

/// Ids of particles inside the support ball of `f`.
pub(crate) fn particles_in_support(cfg: &Configuration, f: &TestFunction) -> Vec<ParticleId> {
    let mut ids = Vec::new();
    if f.is_zero() {
        return ids;
    }
    cfg.for_each_within(f.center(), f.radius(), |id, _, _| ids.push(id));
    ids.sort_unstable();
    ids
}

/// Midpoint rule over `sb` with `n` nodes per axis, and the Richardson error
/// estimate against `n/2` nodes.
pub(crate) fn midpoint_with_error(torus: &Torus, sb: &SupportBox, n: usize, g: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let q = |k: usize| {
        let (nodes, w) = sb.midpoint_grid(torus, k);
        nodes.iter().map(|p| g(p)).sum::<f64>() * w
    };
    let fine = q(n);
    let coarse = q((n / 2).max(1));
    (fine, (fine - coarse).abs() / 3.0)
}

/// Birth-death generator applied at `γ`:
/// `-Σ_x e^{sE(x,γ\x)} D⁻_x F - z ∫ e^{(s-1)E(x,γ)} D⁺_x F dx`.
pub fn apply_h0(model: &ModelParams, func: &ExpCylinderFunction, cfg: &Configuration, quad: &QuadratureSpec) -> GeneratorValue {
    let f = func.f();
    if f.is_zero() {
        return GeneratorValue::assemble(0.0, 0.0, 0.0, 0.0, [0.0; 2]);
    }
    let pot = model.potential();
    let s = model.s();
    let mut minus = 0.0;
    for id in particles_in_support(cfg, f) {
        let boltz = boltzmann(s, pot.relative_energy(cfg, cfg.pos(id), Some(id)));
        minus += -(boltz * func.d_minus(cfg, id));
    }
    let big_f = func.eval(cfg);
    let (integral, err) = midpoint_with_error(model.torus(), &f.support_box(), quad.grid_per_axis, |x| {
        let fx = f.eval(x);
        if fx == 0.0 {
            return 0.0;
        }
        boltzmann(s - 1.0, pot.relative_energy(cfg, x, None)) * fx.exp_m1()
    });
    let scale = model.z() * big_f;
    GeneratorValue::assemble(minus, -scale * integral, 0.0, scale * err, [minus; 2])
}

/// Mean of `e^{(s-1)E(x + W, γ\x)}` over `n` stratified kernel draws.
fn hop_landing_factor<R: Rng + ?Sized>(
    model: &ModelParams,
    cfg: &Configuration,
    id: ParticleId,
    kernel: &ScaledKernel,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    let pot = model.potential();
    let x = cfg.pos(id);
    if pot.is_zero() {
        return vec![1.0; n];
    }
    kernel
        .stratified_samples(n, rng)
        .iter()
        .map(|w| {
            let y = model.torus().translate(x, &w.vector);
            boltzmann(model.s() - 1.0, pot.relative_energy(cfg, &y, Some(id)))
        })
        .collect()
}

/// Hopping generator with kernel `a_ε`, split as
/// `H_ε⁻ F = -Σ_x e^{sE(x,γ\x)} D⁻_x F ∫ a_ε(x-y) e^{(s-1)E(y,γ\x)} dy` and
/// `H_ε⁺ F = -Σ_x e^{sE(x,γ\x)} ∫ a_ε(x-y) e^{(s-1)E(y,γ\x)} D⁺_y F(γ\x) dy`.
pub fn apply_heps<R: Rng + ?Sized>(
    model: &ModelParams,
    func: &ExpCylinderFunction,
    cfg: &Configuration,
    kernel: &ScaledKernel,
    quad: &QuadratureSpec,
    rng: &mut R,
) -> GeneratorValue {
    let f = func.f();
    if f.is_zero() {
        return GeneratorValue::assemble(0.0, 0.0, 0.0, 0.0, [0.0; 2]);
    }
    let pot = model.potential();
    let s = model.s();
    let mass = kernel.mass();
    let half = quad.kernel_samples / 2;

    let mut minus = 0.0;
    let mut halves = [0.0; 2];
    let mut var = 0.0;
    for id in particles_in_support(cfg, f) {
        let boltz = boltzmann(s, pot.relative_energy(cfg, cfg.pos(id), Some(id)));
        let dm = func.d_minus(cfg, id);
        let a = hop_landing_factor(model, cfg, id, kernel, half, rng);
        let b = hop_landing_factor(model, cfg, id, kernel, quad.kernel_samples - half, rng);
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let factor = mass * mean(&all);
        minus += -(factor * (boltz * dm));
        halves[0] += -(mass * mean(&a) * (boltz * dm));
        halves[1] += -(mass * mean(&b) * (boltz * dm));
        var += (mass * boltz * dm).powi(2) * variance(&all) / all.len() as f64;
    }

    // plus part: x ranges over all particles within reach of supp f
    let torus = model.torus();
    let sb = f.support_box();
    let reach = f.radius() + kernel.range();
    let mut near = Vec::new();
    cfg.for_each_within(f.center(), reach.min(torus.half_side()), |id, _, _| near.push(id));
    near.sort_unstable();
    let mut plus = 0.0;
    let mut err = 0.0;
    for id in near {
        let x = cfg.pos(id);
        let boltz = boltzmann(s, pot.relative_energy(cfg, x, Some(id)));
        if boltz == 0.0 {
            continue;
        }
        let rest = func.eval(cfg) * (-f.eval(x)).exp();
        let (v, e) = midpoint_with_error(torus, &sb, quad.grid_per_axis, |y| {
            let fy = f.eval(y);
            if fy == 0.0 {
                return 0.0;
            }
            let a = kernel.between(x, y);
            if a == 0.0 {
                return 0.0;
            }
            a * boltzmann(s - 1.0, pot.relative_energy(cfg, y, Some(id))) * fy.exp_m1()
        });
        plus += -(boltz * rest * v);
        err += boltz * rest * e;
    }
    GeneratorValue::assemble(minus, plus, var.sqrt(), err, halves)
}

/// Reference evaluator of the hopping generator straight from its defining
/// double integral, on a dense `y` grid around every particle.
pub fn apply_heps_dense(model: &ModelParams, func: &ExpCylinderFunction, cfg: &Configuration, kernel: &ScaledKernel, nodes_per_axis: usize) -> f64 {
    let pot = model.potential();
    let s = model.s();
    let torus = model.torus();
    let mut total = 0.0;
    for (id, x) in cfg.iter() {
        let sb = SupportBox { center: Point::new(x), half_width: kernel.range() };
        let (grid, w) = sb.midpoint_grid(torus, nodes_per_axis);
        let ex = pot.relative_energy(cfg, x, Some(id));
        let f_before = func.eval(cfg);
        for y in &grid {
            let a = kernel.between(x, y);
            if a == 0.0 {
                continue;
            }
            let mut moved = cfg.clone();
            moved.remove(id).expect("live particle");
            let ey = pot.relative_energy(&moved, y, None);
            let f_after = if moved.insert(y.clone()).is_ok() { func.eval(&moved) } else { f_before };
            total += -w * a * boltzmann(s, ex) * boltzmann(s - 1.0, ey) * (f_after - f_before);
        }
    }
    total
}

/// Probe point with its energy coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub point: Point,
    pub coef: f64,
}

/// Rejects coefficient sets whose integrand is unbounded for the model.
pub fn check_probe_signs(model: &ModelParams, probes: &[Probe]) -> Result<()> {
    for p in probes {
        if !p.coef.is_finite() {
            return Err(Error::UnboundedIntegrand(format!("non-finite coefficient {}", p.coef)));
        }
        if p.coef > 0.0 && model.potential().has_hard_core() {
            return Err(Error::UnboundedIntegrand(format!(
                "positive coefficient {} against a hard-core potential",
                p.coef
            )));
        }
    }
    Ok(())
}

/// Per-configuration value `exp(Σ c_i E(p_i, γ) + <g, γ>)`.
pub fn probe_integrand(model: &ModelParams, cfg: &Configuration, probes: &[Probe], g: Option<&TestFunction>) -> f64 {
    let pot = model.potential();
    let mut log = g.map_or(0.0, |g| g.pair(cfg));
    let mut factor = 1.0;
    for p in probes {
        if p.coef == 0.0 {
            continue;
        }
        let e = pot.relative_energy(cfg, &p.point, None);
        if e.is_infinite() {
            factor *= boltzmann(p.coef, e);
        } else {
            log += p.coef * e;
        }
    }
    factor * log.exp()
}

/// `E[exp(Σ c_i E(p_i, γ) + <g, γ>)]` over the sample set.
pub fn expectation_kernel(set: &SampleSet, model: &ModelParams, probes: &[Probe], g: Option<&TestFunction>) -> Result<Estimate> {
    check_probe_signs(model, probes)?;
    if probes.iter().all(|p| p.coef == 0.0) && g.is_none_or(|g| g.is_zero()) {
        return Ok(Estimate::exact(1.0));
    }
    let vals = set.par_map(|_, cfg| probe_integrand(model, cfg, probes, g));
    Ok(set.estimate(&vals))
}

/// Which bilinear form to estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FormKind {
    BirthDeath,
    Hopping(ScaledKernel),
}

/// Per-configuration integrand of the Dirichlet form `ℰ(F, G)`.
pub fn dirichlet_integrand<R: Rng + ?Sized>(
    model: &ModelParams,
    kind: &FormKind,
    ff: &ExpCylinderFunction,
    gg: &ExpCylinderFunction,
    cfg: &Configuration,
    quad: &QuadratureSpec,
    rng: &mut R,
) -> f64 {
    let pot = model.potential();
    let s = model.s();
    let torus = model.torus();
    match kind {
        FormKind::BirthDeath => {
            let mut ids = particles_in_support(cfg, ff.f());
            ids.retain(|id| gg.f().eval(cfg.pos(*id)) != 0.0);
            ids.iter()
                .map(|&id| {
                    let boltz = boltzmann(s, pot.relative_energy(cfg, cfg.pos(id), Some(id)));
                    boltz * ff.d_minus(cfg, id) * gg.d_minus(cfg, id)
                })
                .sum()
        }
        FormKind::Hopping(kernel) => {
            // y inside the joint support box by quadrature; y outside it
            // (only reachable from x inside the supports) by kernel draws
            let joint = joint_box(ff.f(), gg.f());
            let inside = |y: &[f64]| in_box(torus, &joint, y);
            let mut total = 0.0;
            let mut near = Vec::new();
            let reach = (joint.half_width * (torus.dim() as f64).sqrt() + kernel.range()).min(torus.half_side());
            cfg.for_each_within(&joint.center, reach, |id, _, _| near.push(id));
            near.sort_unstable();
            for id in near {
                let x = cfg.pos(id);
                let boltz = boltzmann(s, pot.relative_energy(cfg, x, Some(id)));
                if boltz == 0.0 {
                    continue;
                }
                let integrand = |y: &[f64]| {
                    let a = kernel.between(x, y);
                    if a == 0.0 {
                        return 0.0;
                    }
                    let w = boltzmann(s - 1.0, pot.relative_energy(cfg, y, Some(id)));
                    a * w * ff.d_swap(cfg, id, y) * gg.d_swap(cfg, id, y)
                };
                let (grid, w) = joint.midpoint_grid(torus, quad.grid_per_axis);
                let mut v = grid.iter().map(|y| integrand(y)).sum::<f64>() * w;
                if ff.f().eval(x) != 0.0 || gg.f().eval(x) != 0.0 {
                    let draws = kernel.stratified_samples(quad.kernel_samples, rng);
                    let outside: f64 = draws
                        .iter()
                        .map(|d| {
                            let y = torus.translate(x, &d.vector);
                            if inside(&y) {
                                0.0
                            } else {
                                let a = kernel.between(x, &y);
                                integrand(&y) / a
                            }
                        })
                        .sum::<f64>()
                        / draws.len() as f64;
                    v += kernel.mass() * outside;
                }
                total += 0.5 * boltz * v;
            }
            total
        }
    }
}

/// Smallest cube covering both supports (centers assumed to coincide or be
/// near each other).
fn joint_box(f: &TestFunction, g: &TestFunction) -> SupportBox {
    let t = f.torus();
    let d = t.min_image(g.center(), f.center());
    let center = t.translate(f.center(), &d.vector.iter().map(|v| 0.5 * v).collect::<Vec<_>>());
    let half = 0.5 * d.vector.iter().fold(0.0f64, |m, v| m.max(v.abs())) + f.radius().max(g.radius());
    SupportBox { center, half_width: half }
}

fn in_box(t: &Torus, b: &SupportBox, x: &[f64]) -> bool {
    x.iter().zip(b.center.iter()).all(|(&xi, &ci)| {
        let d = t.min_image_coord(xi - ci);
        d >= -b.half_width && d < b.half_width
    })
}

/// `ℰ(F, G)` estimated over the sample set.
pub fn dirichlet_form(
    set: &SampleSet,
    model: &ModelParams,
    kind: &FormKind,
    ff: &ExpCylinderFunction,
    gg: &ExpCylinderFunction,
    quad: &QuadratureSpec,
) -> Result<Estimate> {
    quad.validate()?;
    if model.potential().has_hard_core() {
        return Err(Error::Precondition("generator experiments exclude hard-core potentials".into()));
    }
    if ff.f().is_zero() || gg.f().is_zero() {
        return Ok(Estimate::exact(0.0));
    }
    let vals = set.par_map(|i, cfg| {
        let mut rng = stream_rng(quad.seed, tagged(TAG_SAMPLE_EVAL, i as u64));
        dirichlet_integrand(model, kind, ff, gg, cfg, quad, &mut rng)
    });
    Ok(set.estimate(&vals))
}

/// Mean of `(H F)(γ) G(γ)` for the birth-death generator.
pub fn generator_pairing(set: &SampleSet, model: &ModelParams, ff: &ExpCylinderFunction, gg: &ExpCylinderFunction, quad: &QuadratureSpec) -> Estimate {
    let vals = set.par_map(|_, cfg| apply_h0(model, ff, cfg, quad).value * gg.eval(cfg));
    set.estimate(&vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::{Kernel, KernelShape};
    use crate::gibbs::{sample_ensemble, sample_poisson, SamplerConfig};
    use crate::potential::PairPotential;
    use crate::stats::z_score;

    fn torus1() -> Torus {
        Torus::new(1, 100.0).unwrap()
    }
    fn tent() -> ExpCylinderFunction {
        ExpCylinderFunction::new(TestFunction::tent(torus1(), 2f64.ln(), 2.0).unwrap())
    }
    fn ideal(s: f64) -> ModelParams {
        ModelParams::new(0.05, s, PairPotential::zero(), torus1()).unwrap()
    }
    fn soft(s: f64) -> ModelParams {
        ModelParams::new(0.05, s, PairPotential::soft_disk(1.0, 1.0).unwrap(), torus1()).unwrap()
    }
    fn kernel(eps: f64) -> ScaledKernel {
        let k = Kernel::new(1, KernelShape::Triangular, 1.0, 1.0).unwrap();
        ScaledKernel::new(k, eps, torus1()).unwrap()
    }
    fn cfg(points: &[f64]) -> Configuration {
        Configuration::from_points(torus1(), 1.0, points.iter().map(std::slice::from_ref)).unwrap()
    }
    // ∫(e^f - 1) for the default tent: 4 (1/ln2 - 1)
    fn tent_integral() -> f64 {
        4.0 * (1.0 / 2f64.ln() - 1.0)
    }

    #[test]
    fn quadrature_spec_bounds() {
        assert!(QuadratureSpec::new(7, 16).is_err());
        assert!(QuadratureSpec::new(8, 15).is_err());
        assert!(QuadratureSpec::new(8, 16).is_ok());
    }

    #[test]
    fn h0_on_empty_configuration() {
        let q = QuadratureSpec::new(256, 16).unwrap();
        let v = apply_h0(&soft(0.25), &tent(), &cfg(&[]), &q);
        assert_eq!(v.minus, 0.0);
        assert!((v.plus + 0.05 * tent_integral()).abs() < 1e-4);
        assert_eq!(v.value, v.minus + v.plus);
    }

    #[test]
    fn h0_single_particle_at_center() {
        let q = QuadratureSpec::new(512, 16).unwrap();
        let v = apply_h0(&ideal(0.0), &tent(), &cfg(&[50.0]), &q);
        assert!((v.minus - 1.0).abs() < 1e-12);
        assert!((v.plus + 0.05 * 2.0 * tent_integral()).abs() < 1e-5);
        assert!(v.quad_error < 1e-4);
    }

    #[test]
    fn zero_function_gives_zero() {
        let t = torus1();
        let zero = ExpCylinderFunction::new(TestFunction::tent(t, 0.0, 2.0).unwrap());
        let q = QuadratureSpec::default();
        let c = cfg(&[49.0, 50.5]);
        assert_eq!(apply_h0(&soft(0.0), &zero, &c, &q).value, 0.0);
        let mut rng = stream_rng(1, 0);
        assert_eq!(apply_heps(&soft(0.0), &zero, &c, &kernel(0.5), &q, &mut rng).value, 0.0);
    }

    #[test]
    fn ideal_gas_unit_mass_minus_parts_coincide() {
        let k = Kernel::new(1, KernelShape::Triangular, 3.0, 1.0).unwrap().with_mass(1.0).unwrap();
        let sk = ScaledKernel::new(k, 0.25, torus1()).unwrap();
        let q = QuadratureSpec::default();
        let mut rng = stream_rng(3, 0);
        let c = cfg(&[48.7, 49.9, 50.2, 51.5, 20.0]);
        let m = ideal(0.3);
        let a = apply_h0(&m, &tent(), &c, &q);
        let b = apply_heps(&m, &tent(), &c, &sk, &q, &mut rng);
        assert_eq!(a.minus, b.minus);
        assert_eq!(b.stderr, 0.0);
    }

    #[test]
    fn ideal_gas_empty_support_intersection_vanishes() {
        let q = QuadratureSpec::default();
        let m = ideal(0.0);
        let c = cfg(&[10.0, 80.0]);
        let mut rng = stream_rng(1, 0);
        let v = apply_heps(&m, &tent(), &c, &kernel(1.0), &q, &mut rng);
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn heps_matches_dense_reference() {
        let m = soft(0.25);
        let c = cfg(&[48.9, 49.6, 50.3, 51.2, 52.1]);
        for eps in [1.0, 0.5, 0.25] {
            let sk = kernel(eps);
            let q = QuadratureSpec::new(256, 4096).unwrap();
            let mut rng = stream_rng(5, eps.to_bits());
            let v = apply_heps(&m, &tent(), &c, &sk, &q, &mut rng);
            let dense = apply_heps_dense(&m, &tent(), &c, &sk, 4000);
            let tol = 3.0 * v.stderr + 3.0 * v.quad_error + 2e-3 * dense.abs();
            assert!((v.value - dense).abs() < tol, "eps={eps} {v:?} dense={dense}");
        }
    }

    #[test]
    fn heps_halves_average_to_minus() {
        let m = soft(0.0);
        let c = cfg(&[49.5, 50.2]);
        let q = QuadratureSpec::new(64, 64).unwrap();
        let mut rng = stream_rng(2, 0);
        let v = apply_heps(&m, &tent(), &c, &kernel(0.5), &q, &mut rng);
        assert!((0.5 * (v.minus_halves[0] + v.minus_halves[1]) - v.minus).abs() < 1e-12);
    }

    #[test]
    fn expectation_kernel_trivial_and_poisson() {
        let t = torus1();
        let set = sample_poisson(t, 0.05, 4, 4000, 21);
        let m = ideal(0.0);
        let probes = [Probe { point: t.center(), coef: -0.5 }];
        assert_eq!(expectation_kernel(&set, &m, &[], None).unwrap(), Estimate::exact(1.0));
        let g = TestFunction::tent(t, 2f64.ln(), 2.0).unwrap();
        let e = expectation_kernel(&set, &m, &probes, Some(&g)).unwrap();
        let exact = (0.05 * tent_integral()).exp();
        assert!(e.z_against(exact).abs() < 3.0, "{e:?} vs {exact}");
    }

    #[test]
    fn expectation_kernel_rejects_unbounded() {
        use crate::potential::PotentialFamily;
        let pot = PairPotential::new(PotentialFamily::HardCoreSoftDisk { r_hard: 0.3, theta: 1.0, r0: 1.0 }).unwrap();
        let m = ModelParams::new(0.05, 0.0, pot, torus1()).unwrap();
        let set = sample_poisson(torus1(), 0.05, 1, 10, 1);
        let probes = [Probe { point: torus1().center(), coef: 0.5 }];
        assert!(matches!(expectation_kernel(&set, &m, &probes, None), Err(Error::UnboundedIntegrand(_))));
    }

    #[test]
    fn dirichlet_forms_vanish_on_constants() {
        let t = torus1();
        let one = ExpCylinderFunction::new(TestFunction::tent(t, 0.0, 2.0).unwrap());
        let set = sample_poisson(t, 0.05, 2, 50, 4);
        let q = QuadratureSpec::default();
        for kind in [FormKind::BirthDeath, FormKind::Hopping(kernel(0.5))] {
            assert_eq!(dirichlet_form(&set, &ideal(0.0), &kind, &tent(), &one, &q).unwrap().value, 0.0);
        }
    }

    #[test]
    fn dirichlet_integrands_are_nonnegative_on_diagonal() {
        let t = torus1();
        let set = sample_poisson(t, 0.5, 1, 200, 8);
        let q = QuadratureSpec::new(32, 32).unwrap();
        let m = soft(0.25);
        for kind in [FormKind::BirthDeath, FormKind::Hopping(kernel(0.5))] {
            let vals = set.par_map(|i, c| {
                let mut rng = stream_rng(9, i as u64);
                dirichlet_integrand(&m, &kind, &tent(), &tent(), c, &q, &mut rng)
            });
            assert!(vals.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn birth_death_form_matches_generator_pairing() {
        let m = soft(0.25);
        let sampler = SamplerConfig { burnin: 20_000, thinning: 100, seed: 31, chains: 4, samples_per_chain: 1500, ..SamplerConfig::for_model(&m) };
        let set = sample_ensemble(&m, &sampler).unwrap();
        let g = ExpCylinderFunction::new(TestFunction::tent(torus1(), 0.5, 1.5).unwrap());
        let q = QuadratureSpec::new(64, 16).unwrap();
        let form = dirichlet_form(&set, &m, &FormKind::BirthDeath, &tent(), &g, &q).unwrap();
        let pairing = generator_pairing(&set, &m, &tent(), &g, &q);
        assert!(form.value > 0.0);
        let z = z_score(form.value - pairing.value, form.stderr.hypot(pairing.stderr));
        assert!(z.abs() < 3.0, "form {form:?} pairing {pairing:?}");
    }

    #[test]
    fn hopping_form_is_symmetric() {
        let t = torus1();
        let set = sample_poisson(t, 0.3, 1, 100, 10);
        let q = QuadratureSpec::new(32, 32).unwrap().with_seed(4);
        let m = soft(0.0);
        let g = ExpCylinderFunction::new(TestFunction::tent(t, 0.5, 1.5).unwrap());
        let kind = FormKind::Hopping(kernel(0.5));
        let a = dirichlet_form(&set, &m, &kind, &tent(), &g, &q).unwrap();
        let b = dirichlet_form(&set, &m, &kind, &g, &tent(), &q).unwrap();
        assert!((a.value - b.value).abs() < 1e-12 * a.value.abs().max(1.0));
    }
}
