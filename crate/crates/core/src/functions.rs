//! Test functions, exponential cylinder functions `F = exp<f, γ>`, their
//! difference operators, and the hop kernels with their scaling.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::potential::{unit_ball_volume, unit_sphere_area};
use crate::space::{Configuration, Coords, Displacement, ParticleId, Point, SupportBox, Torus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestShape {
    /// `c max(0, 1 - r/R)`
    Tent,
    /// `c exp(1 - 1/(1 - (r/R)^2))` inside the ball, smooth at the boundary.
    SmoothBump,
}

/// A radial, compactly supported, continuous function on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    shape: TestShape,
    amplitude: f64,
    radius: f64,
    center: Point,
    torus: Torus,
}

impl TestFunction {
    pub fn new(torus: Torus, shape: TestShape, amplitude: f64, radius: f64, center: &[f64]) -> Result<Self> {
        if !amplitude.is_finite() {
            return Err(Error::InvalidParameter(format!("test function amplitude must be finite, got {amplitude}")));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter(format!("support radius must be positive, got {radius}")));
        }
        if radius > torus.side() / 4.0 {
            return Err(Error::InvalidParameter(format!(
                "support radius {radius} exceeds L/4 = {}",
                torus.side() / 4.0
            )));
        }
        if center.len() != torus.dim() {
            return Err(Error::InvalidParameter("center dimension mismatch".into()));
        }
        Ok(TestFunction { shape, amplitude, radius, center: torus.wrap(center), torus })
    }

    /// Tent centered mid-box.
    pub fn tent(torus: Torus, amplitude: f64, radius: f64) -> Result<Self> {
        let c = torus.center();
        Self::new(torus, TestShape::Tent, amplitude, radius, &c)
    }

    pub fn shape(&self) -> TestShape {
        self.shape
    }
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn center(&self) -> &Point {
        &self.center
    }
    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0
    }

    /// The same shape with amplitude multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        TestFunction { amplitude: self.amplitude * k, ..self.clone() }
    }

    pub fn recentered(&self, center: &[f64]) -> Self {
        TestFunction { center: self.torus.wrap(center), ..self.clone() }
    }

    /// Value as a function of the distance to the center.
    #[inline]
    pub fn radial(&self, r: f64) -> f64 {
        if r >= self.radius {
            return 0.0;
        }
        let u = r / self.radius;
        match self.shape {
            TestShape::Tent => self.amplitude * (1.0 - u),
            TestShape::SmoothBump => self.amplitude * (1.0 - 1.0 / (1.0 - u * u)).exp(),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.radial(self.torus.distance(x, &self.center))
    }

    pub fn sup_abs(&self) -> f64 {
        self.amplitude.abs()
    }

    /// Bounding cube of the support.
    pub fn support_box(&self) -> SupportBox {
        SupportBox { center: self.center.clone(), half_width: self.radius }
    }

    /// `<f, γ>` restricted to the support via the cell index.
    pub fn pair(&self, cfg: &Configuration) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let mut s = 0.0;
        cfg.for_each_within(&self.center, self.radius, |_, _, r| s += self.radial(r));
        s
    }

    /// `∫ g(f(x)) dx` over the support by radial Simpson with `n` intervals
    /// (g must vanish at 0 for this to be the full-space integral).
    pub fn radial_integral(&self, g: impl Fn(f64) -> f64, n: usize) -> f64 {
        let d = self.torus.dim();
        let n = n.max(2) & !1;
        let h = self.radius / n as f64;
        let term = |r: f64| g(self.radial(r)) * r.powi(d as i32 - 1);
        let mut s = term(0.0) + term(self.radius);
        for k in 1..n {
            s += term(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        unit_sphere_area(d) * s * h / 3.0
    }
}

/// `F(γ) = exp(<f, γ>)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpCylinderFunction {
    f: TestFunction,
}

impl ExpCylinderFunction {
    pub fn new(f: TestFunction) -> Self {
        ExpCylinderFunction { f }
    }

    pub fn f(&self) -> &TestFunction {
        &self.f
    }

    pub fn eval(&self, cfg: &Configuration) -> f64 {
        self.f.pair(cfg).exp()
    }

    /// `F(γ \ x) - F(γ)` for `x = cfg[id]`.
    pub fn d_minus(&self, cfg: &Configuration, id: ParticleId) -> f64 {
        self.eval(cfg) * ((-self.f.eval(cfg.pos(id))).exp() - 1.0)
    }

    /// `F(γ ∪ y) - F(γ)`.
    pub fn d_plus(&self, cfg: &Configuration, y: &[f64]) -> f64 {
        self.eval(cfg) * (self.f.eval(y).exp_m1())
    }

    /// `F(γ \ x ∪ y) - F(γ)`.
    pub fn d_swap(&self, cfg: &Configuration, id: ParticleId, y: &[f64]) -> f64 {
        self.eval(cfg) * (self.f.eval(y) - self.f.eval(cfg.pos(id))).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelShape {
    /// `c max(0, 1 - r/R)`
    Triangular,
    /// `c exp(-r^2 / 2σ^2)` cut at `r = R`, with `σ = R/3`.
    TruncatedGaussian,
}

/// Radial hop kernel `a` on `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    shape: KernelShape,
    amplitude: f64,
    range: f64,
    dim: usize,
    mass: f64,
}

/// Ratio of the truncated-Gaussian cut radius to its width.
const GAUSS_CUT: f64 = 3.0;

impl Kernel {
    pub fn new(dim: usize, shape: KernelShape, amplitude: f64, range: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("kernel dimension must be >= 1".into()));
        }
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel amplitude must be positive, got {amplitude}")));
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel range must be positive, got {range}")));
        }
        let mut k = Kernel { shape, amplitude, range, dim, mass: 0.0 };
        k.mass = k.closed_form_mass();
        Ok(k)
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
    pub fn range(&self) -> f64 {
        self.range
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn sigma(&self) -> f64 {
        self.range / GAUSS_CUT
    }

    #[inline]
    pub fn radial(&self, r: f64) -> f64 {
        if r >= self.range {
            return 0.0;
        }
        match self.shape {
            KernelShape::Triangular => self.amplitude * (1.0 - r / self.range),
            KernelShape::TruncatedGaussian => {
                let sg = self.sigma();
                self.amplitude * (-(r * r) / (2.0 * sg * sg)).exp()
            }
        }
    }

    /// `∫ a(x) dx`.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    fn closed_form_mass(&self) -> f64 {
        let d = self.dim;
        match self.shape {
            KernelShape::Triangular => self.amplitude * unit_ball_volume(d) * self.range.powi(d as i32) / (d as f64 + 1.0),
            KernelShape::TruncatedGaussian => {
                let sg = self.sigma();
                let full = (2.0 * std::f64::consts::PI * sg * sg).powf(d as f64 / 2.0);
                self.amplitude * full * gamma_lr(d as f64 / 2.0, GAUSS_CUT * GAUSS_CUT / 2.0)
            }
        }
    }

    /// Same shape rescaled to the given mass.
    pub fn with_mass(&self, mass: f64) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel mass must be positive, got {mass}")));
        }
        let mut k = Kernel::new(self.dim, self.shape, self.amplitude * mass / self.mass, self.range)?;
        k.mass = mass;
        Ok(k)
    }

    /// CDF of the radius under the density `a / mass`.
    fn radial_cdf(&self, r: f64) -> f64 {
        let u = (r / self.range).clamp(0.0, 1.0);
        let d = self.dim as i32;
        match self.shape {
            // Beta(d, 2) CDF: (d+1) u^d - d u^(d+1)
            KernelShape::Triangular => (d as f64 + 1.0) * u.powi(d) - d as f64 * u.powi(d + 1),
            KernelShape::TruncatedGaussian => {
                let t = r.min(self.range) / self.sigma();
                if t <= 0.0 {
                    return 0.0;
                }
                let a = self.dim as f64 / 2.0;
                gamma_lr(a, t * t / 2.0) / gamma_lr(a, GAUSS_CUT * GAUSS_CUT / 2.0)
            }
        }
    }

    /// Quantile of the radius under `a / mass`.
    fn radial_quantile(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        match (self.shape, self.dim) {
            (KernelShape::Triangular, 1) => self.range * (1.0 - (1.0 - v).sqrt()),
            (KernelShape::TruncatedGaussian, 1) => {
                // |N(0, σ²)| conditioned on < R: bisection on the erf form
                let target = v * erf(GAUSS_CUT / std::f64::consts::SQRT_2);
                let (mut lo, mut hi) = (0.0, GAUSS_CUT);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if erf(mid / std::f64::consts::SQRT_2) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi) * self.sigma()
            }
            _ => {
                let (mut lo, mut hi) = (0.0, self.range);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.radial_cdf(mid) < v {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// Draws a displacement with density `a / mass`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Coords {
        let d = self.dim;
        match self.shape {
            KernelShape::Triangular => {
                let r = if d == 1 {
                    self.radial_quantile(rng.random())
                } else {
                    let b: f64 = Beta::new(d as f64, 2.0).expect("valid beta").sample(rng);
                    b * self.range
                };
                scale_direction(&random_direction(d, rng), r)
            }
            KernelShape::TruncatedGaussian => loop {
                let v: Coords = (0..d).map(|_| StandardNormal.sample(rng)).collect::<Coords>();
                let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
                if n < GAUSS_CUT {
                    break v.iter().map(|x| x * self.sigma()).collect();
                }
            },
        }
    }

    /// `n` draws stratified in the radial quantile (and in sign for `d = 1`).
    pub fn stratified_samples<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Coords> {
        let d = self.dim;
        (0..n)
            .map(|i| {
                let u = (i as f64 + rng.random::<f64>()) / n as f64;
                if d == 1 {
                    // full symmetric law on [-R, R]
                    let sign = if u < 0.5 { -1.0 } else { 1.0 };
                    let r = self.radial_quantile((2.0 * u - 1.0).abs());
                    Coords::from_slice(&[sign * r])
                } else {
                    scale_direction(&random_direction(d, rng), self.radial_quantile(u))
                }
            })
            .collect()
    }
}

fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Coords {
    if d == 1 {
        return Coords::from_slice(&[if rng.random::<bool>() { 1.0 } else { -1.0 }]);
    }
    loop {
        let v: Coords = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn scale_direction(dir: &[f64], r: f64) -> Coords {
    dir.iter().map(|x| x * r).collect()
}

/// `a_ε(x) = ε^d a(εx)` on a torus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledKernel {
    base: Kernel,
    eps: f64,
    torus: Torus,
}

impl ScaledKernel {
    pub fn new(base: Kernel, eps: f64, torus: Torus) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
        }
        if base.dim() != torus.dim() {
            return Err(Error::InvalidParameter("kernel and torus dimensions differ".into()));
        }
        if base.range() / eps > torus.half_side() {
            return Err(Error::InadmissibleEps { eps, range: base.range(), half_side: torus.half_side() });
        }
        if !(base.mass() > 0.0) {
            return Err(Error::InvalidParameter("kernel mass must be positive".into()));
        }
        Ok(ScaledKernel { base, eps, torus })
    }

    pub fn base(&self) -> &Kernel {
        &self.base
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    /// Support radius `R_a / ε`.
    pub fn range(&self) -> f64 {
        self.base.range() / self.eps
    }

    /// Equal to the base mass for every `ε`.
    pub fn mass(&self) -> f64 {
        self.base.mass()
    }

    /// Value on a (minimum-image) displacement.
    #[inline]
    pub fn eval(&self, disp: &Displacement) -> f64 {
        self.radial(disp.norm)
    }

    #[inline]
    pub fn radial(&self, r: f64) -> f64 {
        self.eps.powi(self.base.dim() as i32) * self.base.radial(self.eps * r)
    }

    pub fn between(&self, x: &[f64], y: &[f64]) -> f64 {
        self.radial(self.torus.distance(x, y))
    }

    /// Displacement drawn from `a_ε / mass`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Displacement {
        let v: Coords = self.base.sample(rng).iter().map(|x| x / self.eps).collect();
        Displacement::from_vector(&v)
    }

    pub fn stratified_samples<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Displacement> {
        self.base
            .stratified_samples(n, rng)
            .into_iter()
            .map(|v| {
                let w: Coords = v.iter().map(|x| x / self.eps).collect();
                Displacement::from_vector(&w)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::stats::{ks_test, mean, variance};
    use proptest::prelude::*;
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn torus1() -> Torus {
        Torus::new(1, 100.0).unwrap()
    }

    fn default_f() -> ExpCylinderFunction {
        ExpCylinderFunction::new(TestFunction::tent(torus1(), 2f64.ln(), 2.0).unwrap())
    }

    fn random_cfg(t: Torus, n: usize, seed: u64, near: &[f64], spread: f64) -> Configuration {
        let mut rng = stream_rng(seed, 0);
        let mut c = Configuration::new(t, 1.0).unwrap();
        for _ in 0..n {
            let p: Vec<f64> = near.iter().map(|x| x + spread * (rng.random::<f64>() - 0.5)).collect();
            let _ = c.insert(t.wrap(&p));
        }
        c
    }

    #[test]
    fn cylinder_trivial_values() {
        let t = torus1();
        let f = default_f();
        let empty = Configuration::new(t, 1.0).unwrap();
        assert_eq!(f.eval(&empty), 1.0);
        let zero = ExpCylinderFunction::new(f.f().scaled(0.0));
        let c = random_cfg(t, 20, 1, &[50.0], 6.0);
        assert_eq!(zero.eval(&c), 1.0);
        let single = Configuration::from_points(t, 1.0, [&[50.0][..]]).unwrap();
        assert!((f.eval(&single) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn difference_operator_cases() {
        let t = torus1();
        let f = default_f();
        let single = Configuration::from_points(t, 1.0, [&[50.0][..]]).unwrap();
        let id = single.nth_id(0);
        assert!((f.d_minus(&single, id) + 1.0).abs() < 1e-15);
        let far = Configuration::from_points(t, 1.0, [&[10.0][..]]).unwrap();
        assert_eq!(f.d_minus(&far, far.nth_id(0)), 0.0);
        let empty = Configuration::new(t, 1.0).unwrap();
        assert!((f.d_plus(&empty, &[50.0]) - 1.0).abs() < 1e-15);
        assert_eq!(f.d_plus(&empty, &[10.0]), 0.0);
        assert_eq!(f.d_swap(&single, id, &[50.0]), 0.0);
        // f(49) = f(51)
        let c = Configuration::from_points(t, 1.0, [&[49.0][..]]).unwrap();
        assert_eq!(f.d_swap(&c, c.nth_id(0), &[51.0]), 0.0);
    }

    #[test]
    fn smooth_bump_is_continuous_and_compact() {
        let f = TestFunction::new(torus1(), TestShape::SmoothBump, 1.0, 2.0, &[50.0]).unwrap();
        assert_eq!(f.eval(&[50.0]), 1.0);
        assert_eq!(f.eval(&[52.0]), 0.0);
        assert!(f.eval(&[51.999]) < 1e-100);
    }

    #[test]
    fn support_radius_limited_to_quarter_box() {
        assert!(TestFunction::tent(torus1(), 1.0, 26.0).is_err());
        assert!(TestFunction::tent(torus1(), 1.0, 25.0).is_ok());
    }

    #[test]
    fn radial_integral_of_tent() {
        let f = default_f();
        let c = 2f64.ln();
        let exact = 2.0 * 2.0 * (1.0 / c - 1.0);
        let got = f.f().radial_integral(|v| v.exp_m1(), 2000);
        assert!((got - exact).abs() < 1e-10, "{got} vs {exact}");
    }

    #[test]
    fn triangular_value_and_mass() {
        let k = Kernel::new(1, KernelShape::Triangular, 1.0, 1.0).unwrap();
        assert_eq!(k.radial(0.5), 0.5);
        assert_eq!(k.mass(), 1.0);
        let k3 = Kernel::new(3, KernelShape::Triangular, 2.0, 1.5).unwrap();
        // 2 * 4π ∫ (1 - r/1.5) r^2 dr over [0, 1.5] = 2 * 4π * 1.5^3 / 12
        let exact = 2.0 * 4.0 * std::f64::consts::PI * 1.5f64.powi(3) / 12.0;
        assert!((k3.mass() - exact).abs() < 1e-12);
    }

    #[test]
    fn with_mass_rescales() {
        for shape in [KernelShape::Triangular, KernelShape::TruncatedGaussian] {
            for d in 1..=3 {
                let k = Kernel::new(d, shape, 1.0, 1.0).unwrap().with_mass(0.37).unwrap();
                assert!((k.mass() - 0.37).abs() < 1e-12);
            }
        }
    }

    fn grid_mass(k: &ScaledKernel, n: usize) -> f64 {
        // midpoint rule on [-R/ε, R/ε]
        let r = k.range();
        let h = 2.0 * r / n as f64;
        (0..n).map(|i| k.radial((-r + (i as f64 + 0.5) * h).abs())).sum::<f64>() * h
    }

    #[test]
    fn scaled_mass_is_invariant() {
        let t = torus1();
        for shape in [KernelShape::Triangular, KernelShape::TruncatedGaussian] {
            let k = Kernel::new(1, shape, 1.3, 1.0).unwrap();
            for eps in [1.0, 0.5, 0.25, 0.125, 1.0 / 16.0] {
                let sk = ScaledKernel::new(k, eps, t).unwrap();
                assert_eq!(sk.mass(), k.mass());
                let q = grid_mass(&sk, 20_000);
                assert!((q - k.mass()).abs() < 1e-6, "{shape:?} eps={eps}: {q} vs {}", k.mass());
            }
        }
        let k2 = Kernel::new(2, KernelShape::Triangular, 1.0, 1.0).unwrap();
        let t2 = Torus::new(2, 20.0).unwrap();
        let sk = ScaledKernel::new(k2, 0.25, t2).unwrap();
        let n = 400;
        let r = sk.range();
        let h = 2.0 * r / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = -r + (i as f64 + 0.5) * h;
                let y = -r + (j as f64 + 0.5) * h;
                s += sk.radial((x * x + y * y).sqrt());
            }
        }
        assert!((s * h * h / k2.mass() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn scaled_kernel_at_unit_eps_is_base() {
        let t = torus1();
        let k = Kernel::new(1, KernelShape::Triangular, 1.0, 1.0).unwrap();
        let sk = ScaledKernel::new(k, 1.0, t).unwrap();
        for r in [0.0, 0.3, 0.5, 0.99, 1.0, 2.0] {
            assert_eq!(sk.radial(r), k.radial(r));
        }
    }

    #[test]
    fn inadmissible_eps_rejected() {
        let t = torus1();
        let k = Kernel::new(1, KernelShape::Triangular, 1.0, 1.0).unwrap();
        assert!(ScaledKernel::new(k, 1.0 / 50.0, t).is_ok());
        assert!(matches!(ScaledKernel::new(k, 1.0 / 51.0, t), Err(Error::InadmissibleEps { .. })));
    }

    #[test]
    fn triangular_samples_have_closed_form_moments() {
        let t = torus1();
        let k = Kernel::new(1, KernelShape::Triangular, 1.0, 1.0).unwrap();
        let mut rng = stream_rng(5, 0);
        let n = 40_000;
        for (eps, var) in [(1.0, 1.0 / 6.0), (0.5, 4.0 / 6.0)] {
            let sk = ScaledKernel::new(k, eps, t).unwrap();
            let xs: Vec<f64> = (0..n).map(|_| sk.sample(&mut rng).vector[0]).collect();
            let m = mean(&xs);
            let v = variance(&xs);
            assert!(m.abs() < 3.0 * (var / n as f64).sqrt(), "mean {m}");
            // var of the sample variance for this law: (mu4 - var^2)/n, mu4 = R^4/15 eps^-4
            let mu4 = 1.0 / 15.0 / eps.powi(4);
            let se = ((mu4 - var * var) / n as f64).sqrt();
            assert!((v - var).abs() < 3.0 * se, "var {v} vs {var}");
            // sign symmetry: fraction positive
            let pos = xs.iter().filter(|x| **x > 0.0).count() as f64 / n as f64;
            assert!((pos - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
        }
    }

    fn histogram_chi_square(xs: &[f64], k: &Kernel, bins: usize) -> f64 {
        let r = k.range();
        let w = 2.0 * r / bins as f64;
        let mut obs = vec![0.0; bins];
        for &x in xs {
            let b = (((x + r) / w) as usize).min(bins - 1);
            obs[b] += 1.0;
        }
        let cdf = |x: f64| {
            let p = 0.5 * k.radial_cdf(x.abs());
            if x < 0.0 { 0.5 - p } else { 0.5 + p }
        };
        let n = xs.len() as f64;
        let stat: f64 = (0..bins)
            .map(|b| {
                let e = n * (cdf(-r + (b + 1) as f64 * w) - cdf(-r + b as f64 * w));
                (obs[b] - e) * (obs[b] - e) / e
            })
            .sum();
        1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn samples_match_density_histograms() {
        let mut rng = stream_rng(6, 0);
        for shape in [KernelShape::Triangular, KernelShape::TruncatedGaussian] {
            let k = Kernel::new(1, shape, 1.0, 1.0).unwrap();
            let xs: Vec<f64> = (0..20_000).map(|_| k.sample(&mut rng)[0]).collect();
            let p = histogram_chi_square(&xs, &k, 20);
            assert!(p > 0.01, "{shape:?}: p = {p}");
            let st: Vec<f64> = k.stratified_samples(20_000, &mut rng).iter().map(|v| v[0]).collect();
            assert!(histogram_chi_square(&st, &k, 20) > 0.01);
        }
    }

    #[test]
    fn radial_laws_in_higher_dimensions() {
        let mut rng = stream_rng(7, 0);
        for shape in [KernelShape::Triangular, KernelShape::TruncatedGaussian] {
            for d in [2, 3] {
                let k = Kernel::new(d, shape, 1.0, 1.0).unwrap();
                let rs: Vec<f64> = (0..5000)
                    .map(|_| k.sample(&mut rng).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect();
                let r = ks_test(&rs, |x| k.radial_cdf(x));
                assert!(r.passes(0.01), "{shape:?} d={d}: {r:?}");
                // the density-normalized cdf must reach one at the range
                assert!((k.radial_cdf(1.0) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_gaussian_quantile_inverts_cdf() {
        let k = Kernel::new(1, KernelShape::TruncatedGaussian, 1.0, 1.0).unwrap();
        for v in [0.01, 0.3, 0.5, 0.9, 0.999] {
            assert!((k.radial_cdf(k.radial_quantile(v)) - v).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn closed_forms_match_generic_definitions(seed in any::<u64>(), n in 1usize..12) {
            let t = torus1();
            let f = default_f();
            let c = random_cfg(t, n, seed, &[50.0], 6.0);
            let mut rng = stream_rng(seed, 1);
            let id = c.nth_id(rng.random_range(0..c.len()));
            let y = t.wrap(&[50.0 + 6.0 * (rng.random::<f64>() - 0.5)]);
            let fg = f.eval(&c);
            let mut without = c.clone();
            without.remove(id).unwrap();
            let generic_minus = f.eval(&without) - fg;
            let mut with_y = c.clone();
            let plus_ok = with_y.insert(y.clone()).is_ok();
            let tol = 1e-12 * fg.max(1.0);
            prop_assert!((f.d_minus(&c, id) - generic_minus).abs() <= tol);
            if plus_ok {
                prop_assert!((f.d_plus(&c, &y) - (f.eval(&with_y) - fg)).abs() <= tol);
            }
            let mut swapped = without.clone();
            if swapped.insert(y.clone()).is_ok() {
                prop_assert!((f.d_swap(&c, id, &y) - (f.eval(&swapped) - fg)).abs() <= tol);
            }
            // decomposition D_xy = D_x^- + D_y^+(γ \ x)
            let lhs = f.d_swap(&c, id, &y);
            let rhs = f.d_minus(&c, id) + f.d_plus(&without, &y);
            prop_assert!((lhs - rhs).abs() <= tol);
        }
    }
}
