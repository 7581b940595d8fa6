//! Pair potentials, relative energies and the stability / low-activity checks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, tagged, TAG_STABILITY};
use crate::space::{Configuration, Displacement, ParticleId, Torus};

/// Radial pair-potential families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialFamily {
    /// `theta (1 - r/r0)^2` for `r < r0`.
    SoftDisk { theta: f64, r0: f64 },
    /// `+inf` for `r < r_hard`, soft disk beyond.
    HardCoreSoftDisk { r_hard: f64, theta: f64, r0: f64 },
    /// `+inf` for `r < r_hard`, `-depth` for `r_hard <= r < range`.
    TruncatedWell { r_hard: f64, depth: f64, range: f64, stability_b: f64 },
}

/// A radially symmetric pair potential with compact support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairPotential {
    family: PotentialFamily,
}

impl PairPotential {
    pub fn new(family: PotentialFamily) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match family {
            PotentialFamily::SoftDisk { theta, r0 } => {
                if !(theta >= 0.0 && r0 > 0.0) {
                    return bad(format!("soft disk needs theta >= 0, r0 > 0 (got {theta}, {r0})"));
                }
            }
            PotentialFamily::HardCoreSoftDisk { r_hard, theta, r0 } => {
                if !(r_hard >= 0.0 && theta >= 0.0 && r0 > 0.0) {
                    return bad(format!("hard-core soft disk needs r_hard, theta >= 0, r0 > 0"));
                }
            }
            PotentialFamily::TruncatedWell { r_hard, depth, range, stability_b } => {
                if !(r_hard >= 0.0 && depth >= 0.0 && range > r_hard && stability_b >= 0.0) {
                    return bad("truncated well needs 0 <= r_hard < range, depth >= 0, B >= 0".into());
                }
            }
        }
        Ok(PairPotential { family })
    }

    pub fn soft_disk(theta: f64, r0: f64) -> Result<Self> {
        Self::new(PotentialFamily::SoftDisk { theta, r0 })
    }

    /// The identically zero potential (a soft disk of amplitude 0).
    pub fn zero() -> Self {
        PairPotential { family: PotentialFamily::SoftDisk { theta: 0.0, r0: 1.0 } }
    }

    pub fn family(&self) -> &PotentialFamily {
        &self.family
    }

    /// Radius beyond which the potential vanishes.
    pub fn cutoff(&self) -> f64 {
        match self.family {
            PotentialFamily::SoftDisk { r0, .. } => r0,
            PotentialFamily::HardCoreSoftDisk { r_hard, r0, .. } => r0.max(r_hard),
            PotentialFamily::TruncatedWell { range, .. } => range,
        }
    }

    pub fn hard_core(&self) -> f64 {
        match self.family {
            PotentialFamily::SoftDisk { .. } => 0.0,
            PotentialFamily::HardCoreSoftDisk { r_hard, .. } | PotentialFamily::TruncatedWell { r_hard, .. } => r_hard,
        }
    }

    pub fn has_hard_core(&self) -> bool {
        self.hard_core() > 0.0
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, PotentialFamily::SoftDisk { theta, .. } if theta == 0.0)
    }

    /// True for the families with `phi >= 0` everywhere.
    pub fn is_nonnegative(&self) -> bool {
        match self.family {
            PotentialFamily::TruncatedWell { depth, .. } => depth == 0.0,
            _ => true,
        }
    }

    /// The declared stability constant `B`.
    pub fn stability_b(&self) -> f64 {
        match self.family {
            PotentialFamily::TruncatedWell { stability_b, .. } => stability_b,
            _ => 0.0,
        }
    }

    /// `phi` as a function of the distance.
    #[inline]
    pub fn at(&self, r: f64) -> f64 {
        let soft = |theta: f64, r0: f64| {
            if r < r0 {
                let u = 1.0 - r / r0;
                theta * u * u
            } else {
                0.0
            }
        };
        match self.family {
            PotentialFamily::SoftDisk { theta, r0 } => soft(theta, r0),
            PotentialFamily::HardCoreSoftDisk { r_hard, theta, r0 } => {
                if r < r_hard {
                    f64::INFINITY
                } else {
                    soft(theta, r0)
                }
            }
            PotentialFamily::TruncatedWell { r_hard, depth, range, .. } => {
                if r < r_hard {
                    f64::INFINITY
                } else if r < range {
                    -depth
                } else {
                    0.0
                }
            }
        }
    }

    pub fn phi(&self, d: &Displacement) -> f64 {
        self.at(d.norm)
    }

    /// Radii where `phi` has kinks or jumps (for piecewise quadrature).
    fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![self.hard_core(), self.cutoff()];
        if let PotentialFamily::HardCoreSoftDisk { r0, .. } = self.family {
            b.push(r0);
        }
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        b.dedup();
        b
    }

    /// `E(x, γ)`, optionally skipping one particle (for `E(x, γ \ x)`).
    #[inline]
    pub fn relative_energy(&self, cfg: &Configuration, x: &[f64], exclude: Option<ParticleId>) -> f64 {
        let mut e = 0.0;
        cfg.for_each_within(x, self.cutoff(), |id, _, r| {
            if Some(id) != exclude {
                e += self.at(r);
            }
        });
        e
    }

    /// `E(x, γ)` skipping any particles in `exclude`.
    pub fn relative_energy_excluding(&self, cfg: &Configuration, x: &[f64], exclude: &[ParticleId]) -> f64 {
        let mut e = 0.0;
        cfg.for_each_within(x, self.cutoff(), |id, _, r| {
            if !exclude.contains(&id) {
                e += self.at(r);
            }
        });
        e
    }

    /// Total pair energy `sum over {x,y} of phi(x - y)`, O(N) via cell lists.
    pub fn total_energy(&self, cfg: &Configuration) -> f64 {
        let mut e = 0.0;
        for (id, x) in cfg.iter() {
            cfg.for_each_within(x, self.cutoff(), |j, _, r| {
                if j > id {
                    e += self.at(r);
                }
            });
        }
        e
    }
}

/// `exp(coef * energy)` with the conventions `0 * inf = 0` and
/// `exp(-inf) = 0`, so hard cores never produce NaN.
#[inline]
pub fn boltzmann(coef: f64, energy: f64) -> f64 {
    if coef == 0.0 {
        1.0
    } else if energy.is_infinite() {
        if coef * energy > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        (coef * energy).exp()
    }
}

/// Activity, dynamics parameter `s`, potential and box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    z: f64,
    s: f64,
    potential: PairPotential,
    torus: Torus,
}

impl ModelParams {
    pub fn new(z: f64, s: f64, potential: PairPotential, torus: Torus) -> Result<Self> {
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::InvalidParameter(format!("activity z must be positive, got {z}")));
        }
        if !(0.0..=0.5).contains(&s) {
            return Err(Error::InvalidParameter(format!("s ∈ [0,1/2] violated: s={s}")));
        }
        if potential.cutoff() > torus.half_side() {
            return Err(Error::InvalidParameter(format!(
                "potential range {} exceeds half the box side {}",
                potential.cutoff(),
                torus.half_side()
            )));
        }
        Ok(ModelParams { z, s, potential, torus })
    }

    pub fn z(&self) -> f64 {
        self.z
    }
    pub fn s(&self) -> f64 {
        self.s
    }
    pub fn potential(&self) -> &PairPotential {
        &self.potential
    }
    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn with_s(&self, s: f64) -> Result<Self> {
        Self::new(self.z, s, self.potential, self.torus)
    }

    pub fn with_potential(&self, potential: PairPotential) -> Result<Self> {
        Self::new(self.z, self.s, potential, self.torus)
    }

    pub fn with_torus(&self, torus: Torus) -> Result<Self> {
        Self::new(self.z, self.s, self.potential, torus)
    }

    pub fn energy(&self, cfg: &Configuration, x: &[f64], exclude: Option<ParticleId>) -> f64 {
        self.potential.relative_energy(cfg, x, exclude)
    }

    /// Empty configuration with cells sized to the potential range.
    pub fn empty_configuration(&self) -> Configuration {
        Configuration::new(self.torus, self.potential.cutoff()).expect("validated model")
    }
}

/// Per-particle cache of `E(x, γ \ x)`, updated incrementally.
#[derive(Debug, Clone, Default)]
pub struct EnergyBook {
    energy: Vec<f64>,
}

impl EnergyBook {
    /// Builds the cache from scratch.
    pub fn new(pot: &PairPotential, cfg: &Configuration) -> Self {
        let mut book = EnergyBook { energy: Vec::new() };
        book.rebuild(pot, cfg);
        book
    }

    pub fn rebuild(&mut self, pot: &PairPotential, cfg: &Configuration) {
        self.energy.clear();
        for (id, x) in cfg.iter() {
            self.ensure(id);
            self.energy[id] = pot.relative_energy(cfg, x, Some(id));
        }
    }

    fn ensure(&mut self, id: ParticleId) {
        if self.energy.len() <= id {
            self.energy.resize(id + 1, 0.0);
        }
    }

    #[inline]
    pub fn get(&self, id: ParticleId) -> f64 {
        self.energy[id]
    }

    /// Call after `id` has been inserted into `cfg`, passing its energy
    /// against the rest of the configuration.
    pub fn on_insert(&mut self, pot: &PairPotential, cfg: &Configuration, id: ParticleId, energy: f64) {
        self.ensure(id);
        self.energy[id] = energy;
        let x = cfg.pos(id);
        let energy = &mut self.energy;
        cfg.for_each_within(x, pot.cutoff(), |j, _, r| {
            if j != id {
                energy[j] += pot.at(r);
            }
        });
    }

    /// Call before `id` is removed from `cfg`.
    pub fn on_remove(&mut self, pot: &PairPotential, cfg: &Configuration, id: ParticleId) {
        let x = cfg.pos(id);
        let energy = &mut self.energy;
        cfg.for_each_within(x, pot.cutoff(), |j, _, r| {
            if j != id {
                energy[j] -= pot.at(r);
            }
        });
        self.energy[id] = 0.0;
    }

    /// Sum of `E(x, γ \ x)` over live particles, halved: the total pair energy.
    pub fn total(&self, cfg: &Configuration) -> f64 {
        0.5 * cfg.ids().iter().map(|&id| self.energy[id]).sum::<f64>()
    }

    /// Largest absolute deviation from a full recomputation.
    pub fn max_deviation(&self, pot: &PairPotential, cfg: &Configuration) -> f64 {
        cfg.iter()
            .map(|(id, x)| {
                let fresh = pot.relative_energy(cfg, x, Some(id));
                if fresh == self.energy[id] {
                    0.0
                } else {
                    (fresh - self.energy[id]).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Outcome of the stability check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum StabilityStatus {
    /// `phi >= 0`, so `B = 0` holds analytically.
    Certified,
    /// Random search found no counterexample (not a proof).
    NotFalsified { trials: usize },
    /// A configuration with pair energy below `-B|γ|` was found.
    Falsified { pair_energy: f64, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub b: f64,
    pub certified: bool,
    pub status: StabilityStatus,
}

impl StabilityCheck {
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            StabilityStatus::Falsified { pair_energy, n } => {
                Err(Error::StabilityFalsified { pair_energy, bound: -self.b * n as f64, n })
            }
            _ => Ok(self),
        }
    }
}

/// Checks condition (S) for the potential.
///
/// Nonnegative families are certified with `B = 0`. Otherwise the declared
/// `B` is probed by a randomized search over clusters of up to 8 points.
pub fn check_stability(pot: &PairPotential, trials: usize, seed: u64) -> StabilityCheck {
    if pot.is_nonnegative() {
        return StabilityCheck { b: 0.0, certified: true, status: StabilityStatus::Certified };
    }
    let b = pot.stability_b();
    let mut rng = stream_rng(seed, tagged(TAG_STABILITY, 0));
    let range = pot.cutoff();
    for _ in 0..trials {
        let n = rng.random_range(2..=8usize);
        let dim = rng.random_range(1..=3usize);
        let spread = range * rng.random_range(0.05..2.0);
        let pts: Vec<Vec<f64>> =
            (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>() * spread).collect()).collect();
        let mut e = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let r = pts[i].iter().zip(&pts[j]).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
                e += pot.at(r);
            }
        }
        if e < -b * n as f64 {
            return StabilityCheck { b, certified: false, status: StabilityStatus::Falsified { pair_energy: e, n } };
        }
    }
    StabilityCheck { b, certified: false, status: StabilityStatus::NotFalsified { trials } }
}

/// The low-activity / high-temperature smallness condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LahtCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// Richardson estimate of the quadrature error in `lhs`.
    pub quad_error: f64,
}

/// Surface area of the unit sphere in `R^d`.
pub fn unit_sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(h) / gamma(h)
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    unit_sphere_area(d) / d as f64
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n.max(2) & !1;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `z ∫ |exp(-phi) - 1| dx` against `(2 e^{1+2B})^{-1}`.
///
/// The integral is radial: the hard core contributes its ball volume
/// exactly, the rest is composite Simpson on each smooth piece with
/// `resolution` intervals, compared against half resolution.
pub fn check_laht(m: &ModelParams, resolution: usize) -> LahtCheck {
    let pot = m.potential();
    let d = m.torus().dim();
    let b = pot.stability_b();
    let rhs = 1.0 / (2.0 * (1.0 + 2.0 * b).exp());
    let integrand = |r: f64| (((-pot.at(r)).exp()) - 1.0).abs() * r.powi(d as i32 - 1);
    let radial = |n: usize| {
        let bp = pot.breakpoints();
        let mut total = pot.hard_core().powi(d as i32) / d as f64;
        for w in bp.windows(2) {
            let (a, c) = (w[0], w[1]);
            if c > a {
                // nudge off the jump points so one-sided values are used
                let eps = 1e-12 * (c - a);
                total += simpson(&integrand, a + eps, c - eps, n);
            }
        }
        total
    };
    let fine = radial(resolution.max(4));
    let coarse = radial((resolution / 2).max(2));
    let area = unit_sphere_area(d);
    let lhs = m.z() * area * fine;
    let quad_error = m.z() * area * (fine - coarse).abs() / 15.0;
    LahtCheck { lhs, rhs, satisfied: lhs < rhs, quad_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Point, Torus};
    use proptest::prelude::*;
    use rand::Rng;

    fn torus1() -> Torus {
        Torus::new(1, 100.0).unwrap()
    }

    #[test]
    fn soft_disk_values() {
        let p = PairPotential::soft_disk(1.0, 1.0).unwrap();
        assert_eq!(p.at(2.0), 0.0);
        assert_eq!(p.at(0.5), 0.25);
        assert_eq!(p.at(1.0), 0.0);
    }

    #[test]
    fn hard_core_is_infinite_inside() {
        let p = PairPotential::new(PotentialFamily::HardCoreSoftDisk { r_hard: 0.2, theta: 1.0, r0: 1.0 }).unwrap();
        assert_eq!(p.at(0.1), f64::INFINITY);
        assert!(p.at(0.3).is_finite());
    }

    #[test]
    fn boltzmann_conventions() {
        assert_eq!(boltzmann(0.0, f64::INFINITY), 1.0);
        assert_eq!(boltzmann(-0.5, f64::INFINITY), 0.0);
        assert_eq!(boltzmann(0.5, f64::INFINITY), f64::INFINITY);
        assert!((boltzmann(-1.0, 2.0) - (-2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn relative_energy_simple_cases() {
        let t = torus1();
        let pot = PairPotential::soft_disk(1.0, 1.0).unwrap();
        let mut c = Configuration::new(t, 1.0).unwrap();
        assert_eq!(pot.relative_energy(&c, &[10.0], None), 0.0);
        let id = c.insert(Point::new(&[10.5])).unwrap();
        assert_eq!(pot.relative_energy(&c, &[10.0], None), 0.25);
        assert_eq!(pot.relative_energy(&c, &[10.0], Some(id)), 0.0);
        // across the periodic boundary
        let mut c2 = Configuration::new(t, 1.0).unwrap();
        c2.insert(Point::new(&[99.75])).unwrap();
        assert!((pot.relative_energy(&c2, &[0.25], None) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn model_rejects_bad_s_and_z() {
        let pot = PairPotential::zero();
        assert!(ModelParams::new(0.05, 0.7, pot, torus1()).is_err());
        assert!(ModelParams::new(0.0, 0.0, pot, torus1()).is_err());
        assert!(ModelParams::new(0.05, 0.5, pot, torus1()).is_ok());
        let msg = ModelParams::new(0.05, 0.7, pot, torus1()).unwrap_err().to_string();
        assert!(msg.contains("s ∈ [0,1/2]"), "{msg}");
    }

    #[test]
    fn stability_soft_families_certified() {
        let soft = PairPotential::soft_disk(1.0, 1.0).unwrap();
        let c = check_stability(&soft, 100, 1);
        assert_eq!(c.b, 0.0);
        assert!(c.certified);
        let hc = PairPotential::new(PotentialFamily::HardCoreSoftDisk { r_hard: 0.2, theta: 1.0, r0: 1.0 }).unwrap();
        assert!(check_stability(&hc, 100, 1).certified);
    }

    #[test]
    fn stability_well_with_zero_b_is_falsified() {
        let well = PairPotential::new(PotentialFamily::TruncatedWell {
            r_hard: 0.0,
            depth: 1.0,
            range: 1.0,
            stability_b: 0.0,
        })
        .unwrap();
        let c = check_stability(&well, 10_000, 3);
        assert!(!c.certified);
        assert!(matches!(c.status, StabilityStatus::Falsified { .. }));
        assert!(matches!(c.into_result(), Err(Error::StabilityFalsified { .. })));
    }

    #[test]
    fn stability_well_with_hard_core_and_large_b_survives() {
        // a hard core of 0.6 inside range 1 allows at most 4 mutual neighbors in 3d
        // clusters, so B = 10 is comfortably safe
        let well = PairPotential::new(PotentialFamily::TruncatedWell {
            r_hard: 0.6,
            depth: 1.0,
            range: 1.0,
            stability_b: 10.0,
        })
        .unwrap();
        let c = check_stability(&well, 5_000, 4);
        assert!(matches!(c.status, StabilityStatus::NotFalsified { .. }));
        assert!(c.into_result().is_ok());
    }

    #[test]
    fn laht_zero_potential() {
        let m = ModelParams::new(0.05, 0.0, PairPotential::zero(), torus1()).unwrap();
        let c = check_laht(&m, 64);
        assert_eq!(c.lhs, 0.0);
        assert!((c.rhs - 1.0 / (2.0 * std::f64::consts::E)).abs() < 1e-15);
        assert!((c.rhs - 0.18394).abs() < 1e-5);
        assert!(c.satisfied);
    }

    #[test]
    fn laht_soft_disk_matches_fine_trapezoid_oracle() {
        let m = ModelParams::new(0.05, 0.0, PairPotential::soft_disk(1.0, 1.0).unwrap(), torus1()).unwrap();
        let c = check_laht(&m, 64);
        // oracle: plain trapezoid over [-1, 1] at twice... many times the resolution
        let n = 200_000;
        let h = 2.0 / n as f64;
        let g = |u: f64| 1.0 - (-(1.0 - u.abs()).powi(2)).exp();
        let mut s = 0.5 * (g(-1.0) + g(1.0));
        for k in 1..n {
            s += g(-1.0 + k as f64 * h);
        }
        let oracle = 0.05 * s * h;
        assert!((c.lhs - oracle).abs() < 1e-8, "{} vs {}", c.lhs, oracle);
        assert!(c.quad_error < 1e-8);
        assert!(c.satisfied);
        assert!(c.lhs < 0.0254 && c.lhs > 0.0252);
    }

    #[test]
    fn laht_fails_for_large_activity() {
        let m = ModelParams::new(1.0, 0.0, PairPotential::soft_disk(1.0, 1.0).unwrap(), torus1()).unwrap();
        assert!(!check_laht(&m, 64).satisfied);
    }

    #[test]
    fn laht_hard_core_counts_ball_volume() {
        let pot = PairPotential::new(PotentialFamily::HardCoreSoftDisk { r_hard: 0.5, theta: 0.0, r0: 1.0 }).unwrap();
        let m = ModelParams::new(0.1, 0.0, pot, torus1()).unwrap();
        // only the core contributes: z * 2 * 0.5
        assert!((check_laht(&m, 32).lhs - 0.1).abs() < 1e-12);
        let t3 = Torus::new(3, 10.0).unwrap();
        let m3 = ModelParams::new(0.1, 0.0, pot, t3).unwrap();
        let ball = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((check_laht(&m3, 32).lhs - 0.1 * ball).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn laht_monotone_in_z_and_theta(z1 in 0.001f64..1.0, dz in 0.0f64..1.0, t1 in 0.0f64..3.0, dt in 0.0f64..3.0) {
            let t = torus1();
            let lhs = |z: f64, th: f64| {
                let m = ModelParams::new(z, 0.0, PairPotential::soft_disk(th, 1.0).unwrap(), t).unwrap();
                check_laht(&m, 32).lhs
            };
            prop_assert!(lhs(z1 + dz, t1) >= lhs(z1, t1));
            prop_assert!(lhs(z1, t1 + dt) >= lhs(z1, t1) - 1e-15);
        }

        #[test]
        fn cell_energy_equals_brute_force(seed in any::<u64>(), n in 0usize..50, dim in 1usize..=2) {
            let t = Torus::new(dim, 8.0).unwrap();
            let pot = PairPotential::soft_disk(1.3, 1.1).unwrap();
            let mut rng = crate::rng::stream_rng(seed, 9);
            let mut c = Configuration::new(t, pot.cutoff()).unwrap();
            for _ in 0..n {
                let _ = c.insert(t.uniform_point(&mut rng));
            }
            let x = t.uniform_point(&mut rng);
            let brute: f64 = c.iter().map(|(_, y)| pot.at(t.distance(&x, y))).sum();
            let fast = pot.relative_energy(&c, &x, None);
            prop_assert!((fast - brute).abs() <= 1e-12 * brute.abs().max(1.0));
        }

        #[test]
        fn hard_core_energy_infinite_matches_exactly(seed in any::<u64>()) {
            let t = Torus::new(1, 10.0).unwrap();
            let pot = PairPotential::new(PotentialFamily::HardCoreSoftDisk { r_hard: 0.3, theta: 1.0, r0: 1.0 }).unwrap();
            let mut rng = crate::rng::stream_rng(seed, 10);
            let mut c = Configuration::new(t, 1.0).unwrap();
            for _ in 0..20 {
                let _ = c.insert(t.uniform_point(&mut rng));
            }
            let x = t.uniform_point(&mut rng);
            let brute: f64 = c.iter().map(|(_, y)| pot.at(t.distance(&x, y))).sum();
            let fast = pot.relative_energy(&c, &x, None);
            prop_assert_eq!(fast.is_infinite(), brute.is_infinite());
            if brute.is_finite() {
                prop_assert!((fast - brute).abs() <= 1e-12 * brute.abs().max(1.0));
            }
        }

        #[test]
        fn incremental_bookkeeping_matches_recomputation(seed in any::<u64>(), ops in 1usize..200) {
            let t = Torus::new(2, 6.0).unwrap();
            let pot = PairPotential::soft_disk(2.0, 1.0).unwrap();
            let mut rng = crate::rng::stream_rng(seed, 11);
            let mut c = Configuration::new(t, 1.0).unwrap();
            let mut book = EnergyBook::new(&pot, &c);
            for _ in 0..ops {
                let op: u8 = rng.random_range(0..3);
                if op == 0 || c.is_empty() {
                    let x = t.uniform_point(&mut rng);
                    let e = pot.relative_energy(&c, &x, None);
                    let id = c.insert(x).unwrap();
                    book.on_insert(&pot, &c, id, e);
                } else if op == 1 {
                    let id = c.nth_id(rng.random_range(0..c.len()));
                    book.on_remove(&pot, &c, id);
                    c.remove(id).unwrap();
                } else {
                    let id = c.nth_id(rng.random_range(0..c.len()));
                    let to = t.uniform_point(&mut rng);
                    book.on_remove(&pot, &c, id);
                    c.relocate(id, to).unwrap();
                    let e = pot.relative_energy(&c, c.pos(id), Some(id));
                    book.on_insert(&pot, &c, id, e);
                }
            }
            prop_assert!((book.total(&c) - pot.total_energy(&c)).abs() < 1e-10);
            prop_assert!(book.max_deviation(&pot, &c) < 1e-10);
        }
    }
}
