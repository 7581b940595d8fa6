//! Run configuration: a TOML file with a fixed schema. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hopscale_core::functions::{Kernel, KernelShape, ScaledKernel, TestFunction, TestShape};
use hopscale_core::generators::QuadratureSpec;
use hopscale_core::gibbs::{MoveWeights, SamplerConfig};
use hopscale_core::potential::{check_laht, check_stability};
use hopscale_core::rng::mix;
use hopscale_core::scaling::{FactorizationSpec, PsiSign, ScalingStudy};
use hopscale_core::{Error, ModelParams, PairPotential, PotentialFamily, Result, Torus};

/// Quadrature resolution of the LA-HT integral.
pub const LAHT_RESOLUTION: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub model: ModelSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub test_function: TestFunctionSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factorization: Option<FactorizationSection>,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub validate: ValidateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub side: f64,
    pub z: f64,
    pub s: f64,
    pub potential: PotentialSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialSection {
    Zero,
    SoftDisk { theta: f64, r0: f64 },
    HardCoreSoftDisk { r_hard: f64, theta: f64, r0: f64 },
    TruncatedWell { r_hard: f64, depth: f64, range: f64, stability_b: f64 },
}

impl PotentialSection {
    pub fn build(&self) -> Result<PairPotential> {
        match *self {
            PotentialSection::Zero => Ok(PairPotential::zero()),
            PotentialSection::SoftDisk { theta, r0 } => PairPotential::new(PotentialFamily::SoftDisk { theta, r0 }),
            PotentialSection::HardCoreSoftDisk { r_hard, theta, r0 } => {
                PairPotential::new(PotentialFamily::HardCoreSoftDisk { r_hard, theta, r0 })
            }
            PotentialSection::TruncatedWell { r_hard, depth, range, stability_b } => {
                PairPotential::new(PotentialFamily::TruncatedWell { r_hard, depth, range, stability_b })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub shape: KernelShape,
    pub range: f64,
    pub amplitude: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection { shape: KernelShape::Triangular, range: 1.0, amplitude: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestFunctionSection {
    pub shape: TestShape,
    pub amplitude: f64,
    pub radius: f64,
    /// Defaults to the box center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
}

impl Default for TestFunctionSection {
    fn default() -> Self {
        TestFunctionSection { shape: TestShape::Tent, amplitude: std::f64::consts::LN_2, radius: 2.0, center: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub chains: usize,
    pub samples_per_chain: usize,
    pub burnin: u64,
    pub thinning: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translate_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<MoveWeights>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { chains: 8, samples_per_chain: 1000, burnin: 100_000, thinning: 200, translate_step: None, weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub epsilons: Vec<f64>,
    pub grid_per_axis: usize,
    pub kernel_samples: usize,
    pub normalization_probes: usize,
    pub cross_check_samples: usize,
    pub stability_trials: usize,
    /// Second box side for the finite-volume comparison; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare_side: Option<f64>,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            epsilons: vec![1.0, 0.5, 0.25, 0.125],
            grid_per_axis: 64,
            kernel_samples: 32,
            normalization_probes: 100,
            cross_check_samples: 1000,
            stability_trials: 1000,
            compare_side: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizationSection {
    pub a: f64,
    pub b: f64,
    pub x1: Vec<f64>,
    pub y1: Vec<f64>,
    /// Base points; default to the box center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y2: Option<Vec<f64>>,
    #[serde(default)]
    pub psi_sign: PsiSign,
    pub translations: usize,
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Glauber,
    Kawasaki,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub process: ProcessKind,
    /// Kernel scale for hopping.
    pub eps: f64,
    pub t_end: f64,
    pub dt: f64,
    pub replicas: usize,
    pub burn_in: f64,
    pub pair_radius: f64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        DynamicsSection { process: ProcessKind::Glauber, eps: 1.0, t_end: 1000.0, dt: 1.0, replicas: 8, burn_in: 50.0, pair_radius: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub grid_per_axis: usize,
    pub region_half_width: f64,
    pub bin_width: f64,
    pub r_max: f64,
    /// Largest accepted |z| of any statistical check.
    pub z_max: f64,
    /// Significance level of goodness-of-fit tests.
    pub level: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection { grid_per_axis: 64, region_half_width: 3.0, bin_width: 0.5, r_max: 3.0, z_max: 3.0, level: 0.01 }
    }
}

/// Stream ids derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub sampler: u64,
    pub quadrature: u64,
    pub dynamics: u64,
    pub stability: u64,
    pub poisson: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Seeds {
            master,
            sampler: master,
            quadrature: mix(master, 1),
            dynamics: mix(master, 2),
            stability: mix(master, 3),
            poisson: mix(master, 4),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    /// Multiplies sample, time and quadrature budgets by `k`, keeping each
    /// above its minimum.
    pub fn scale_budgets(&mut self, k: f64) -> Result<()> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidParameter(format!("budget scale must be positive, got {k}")));
        }
        let sc = |n: usize, min: usize| ((n as f64 * k).round() as usize).max(min);
        self.sampler.samples_per_chain = sc(self.sampler.samples_per_chain, 20);
        self.sampler.burnin = sc(self.sampler.burnin as usize, 100) as u64;
        self.study.grid_per_axis = sc(self.study.grid_per_axis, 8);
        self.study.kernel_samples = sc(self.study.kernel_samples, 16);
        self.study.normalization_probes = sc(self.study.normalization_probes, 1);
        self.study.cross_check_samples = if self.study.cross_check_samples == 0 { 0 } else { sc(self.study.cross_check_samples, 20) };
        self.study.stability_trials = sc(self.study.stability_trials, 1);
        self.validate.grid_per_axis = sc(self.validate.grid_per_axis, 8);
        self.dynamics.t_end = (self.dynamics.t_end * k).max(self.dynamics.dt);
        Ok(())
    }

    pub fn torus(&self) -> Result<Torus> {
        Torus::new(self.model.dim, self.model.side)
    }

    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::new(self.model.z, self.model.s, self.model.potential.build()?, self.torus()?)
    }

    pub fn test_function(&self) -> Result<TestFunction> {
        let t = self.torus()?;
        let center = self.test_function.center.clone().unwrap_or_else(|| t.center().coords().to_vec());
        TestFunction::new(t, self.test_function.shape, self.test_function.amplitude, self.test_function.radius, &center)
    }

    pub fn kernel(&self) -> Result<Kernel> {
        Kernel::new(self.model.dim, self.kernel.shape, self.kernel.amplitude, self.kernel.range)
    }

    pub fn sampler_config(&self, model: &ModelParams) -> SamplerConfig {
        let base = SamplerConfig::for_model(model);
        SamplerConfig {
            weights: self.sampler.weights.unwrap_or(base.weights),
            translate_step: self.sampler.translate_step.unwrap_or(base.translate_step),
            burnin: self.sampler.burnin,
            thinning: self.sampler.thinning,
            seed: self.seeds().sampler,
            chains: self.sampler.chains,
            samples_per_chain: self.sampler.samples_per_chain,
        }
    }

    pub fn quadrature(&self) -> Result<QuadratureSpec> {
        Ok(QuadratureSpec::new(self.study.grid_per_axis, self.study.kernel_samples)?.with_seed(self.seeds().quadrature))
    }

    pub fn study(&self) -> Result<ScalingStudy> {
        let model = self.model()?;
        Ok(ScalingStudy {
            f: self.test_function()?,
            kernel: self.kernel()?,
            epsilons: self.study.epsilons.clone(),
            sampler: self.sampler_config(&model),
            quad: self.quadrature()?,
            normalization_probes: self.study.normalization_probes,
            cross_check_samples: self.study.cross_check_samples,
            stability_trials: self.study.stability_trials,
            model,
        })
    }

    /// The same run on the comparison box, if one is configured. It uses
    /// its own sampler seed and skips the cross-check.
    pub fn comparison(&self) -> Option<RunConfig> {
        let side = self.study.compare_side?;
        let mut c = self.clone();
        c.model.side = side;
        c.seed = mix(self.seed, 5);
        c.study.compare_side = None;
        c.study.cross_check_samples = 0;
        c.factorization = None;
        Some(c)
    }

    pub fn factorization(&self) -> Result<Option<FactorizationSpec>> {
        let Some(f) = &self.factorization else {
            return Ok(None);
        };
        let center = self.torus()?.center().coords().to_vec();
        Ok(Some(FactorizationSpec {
            a: f.a,
            b: f.b,
            x1: f.x1.clone(),
            x2: f.x2.clone().unwrap_or_else(|| center.clone()),
            y1: f.y1.clone(),
            y2: f.y2.clone().unwrap_or(center),
            psi_sign: f.psi_sign,
            translations: f.translations,
        }))
    }

    /// Load-time checks of every model precondition.
    pub fn check(&self) -> Result<()> {
        let model = self.model()?;
        let t = *model.torus();
        let pot = model.potential();
        let laht = check_laht(&model, LAHT_RESOLUTION);
        if !laht.satisfied {
            return Err(Error::Precondition(format!("LA-HT violated: lhs={:.6} ≥ {:.6}", laht.lhs, laht.rhs)));
        }
        check_stability(pot, self.study.stability_trials, self.seeds().stability).into_result()?;
        let f = self.test_function()?;
        if f.radius() > t.side() / 4.0 {
            return Err(Error::Precondition(format!("test function radius {} exceeds a quarter of the box side", f.radius())));
        }
        if pot.cutoff() > t.half_side() {
            return Err(Error::Precondition(format!("potential range {} exceeds half the box side", pot.cutoff())));
        }
        let k = self.kernel()?;
        let min_eps = self.study.epsilons.iter().copied().fold(f64::INFINITY, f64::min);
        if min_eps.is_finite() {
            ScaledKernel::new(k, min_eps, t)?;
        }
        ScaledKernel::new(k, self.dynamics.eps, t)?;
        self.quadrature()?;
        self.sampler_config(&model).validate()?;
        if let Some(fs) = self.factorization()? {
            if fs.x1.len() != t.dim() || fs.y1.len() != t.dim() {
                return Err(Error::InvalidParameter("factorization probes must match the dimension".into()));
            }
        }
        if let Some(c) = self.comparison() {
            c.check()?;
        }
        Ok(())
    }
}
