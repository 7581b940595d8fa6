//! Grand-canonical Metropolis sampling of the finite-volume Gibbs measure,
//! sample storage, and GNZ-identity residuals.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::functions::TestFunction;
use crate::generators::QuadratureSpec;
use crate::potential::{boltzmann, EnergyBook, ModelParams, PairPotential};
use crate::rng::{stream_rng, tagged, SimRng, TAG_CHAIN};
use crate::space::{Configuration, Coords, ParticleId, Point, SupportBox, Torus};
use crate::stats::{
    effective_sample_size, grouped_batch_means, integrated_autocorrelation_time, z_score, Estimate,
};

/// Relative proposal frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveWeights {
    pub birth: f64,
    pub death: f64,
    pub translate: f64,
}

impl Default for MoveWeights {
    fn default() -> Self {
        MoveWeights { birth: 0.35, death: 0.35, translate: 0.30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub weights: MoveWeights,
    pub translate_step: f64,
    pub burnin: u64,
    pub thinning: u64,
    pub seed: u64,
    pub chains: usize,
    pub samples_per_chain: usize,
}

impl SamplerConfig {
    /// Defaults for `model`: step half the potential range, 10^5 burn-in.
    pub fn for_model(model: &ModelParams) -> Self {
        SamplerConfig {
            weights: MoveWeights::default(),
            translate_step: 0.5 * model.potential().cutoff(),
            burnin: 100_000,
            thinning: 200,
            seed: 1,
            chains: 8,
            samples_per_chain: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.birth >= 0.0 && w.death >= 0.0 && w.translate >= 0.0) {
            return Err(Error::InvalidParameter("move weights must be nonnegative".into()));
        }
        if !(w.birth + w.death + w.translate > 0.0) {
            return Err(Error::InvalidParameter("move weights must not all vanish".into()));
        }
        if (w.birth > 0.0) != (w.death > 0.0) {
            return Err(Error::InvalidParameter("birth and death weights must be both positive or both zero".into()));
        }
        if self.thinning < 1 {
            return Err(Error::InvalidParameter("thinning must be >= 1".into()));
        }
        if w.translate > 0.0 && !(self.translate_step > 0.0) {
            return Err(Error::InvalidParameter("translate step must be positive".into()));
        }
        if self.chains == 0 {
            return Err(Error::InvalidParameter("need at least one chain".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoveKind {
    Birth,
    Death,
    Translate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveCounts {
    pub proposed: [u64; 3],
    pub accepted: [u64; 3],
}

impl MoveCounts {
    fn record(&mut self, kind: MoveKind, accepted: bool) {
        let i = kind as usize;
        self.proposed[i] += 1;
        if accepted {
            self.accepted[i] += 1;
        }
    }

    pub fn rate(&self, kind: MoveKind) -> f64 {
        let i = kind as usize;
        if self.proposed[i] == 0 {
            0.0
        } else {
            self.accepted[i] as f64 / self.proposed[i] as f64
        }
    }

    fn merge(&mut self, other: &MoveCounts) {
        for i in 0..3 {
            self.proposed[i] += other.proposed[i];
            self.accepted[i] += other.accepted[i];
        }
    }
}

/// Metropolis–Hastings ratio for adding a particle with energy `energy`
/// against a configuration of `n` particles.
pub fn birth_ratio(model: &ModelParams, w: &MoveWeights, n: usize, energy: f64) -> f64 {
    (w.death / w.birth) * model.z() * model.torus().volume() / (n as f64 + 1.0) * boltzmann(-1.0, energy)
}

/// Ratio for removing one of `n` particles whose energy against the rest is
/// `energy`.
pub fn death_ratio(model: &ModelParams, w: &MoveWeights, n: usize, energy: f64) -> f64 {
    (w.birth / w.death) * n as f64 / (model.z() * model.torus().volume()) * boltzmann(1.0, energy)
}

/// Steps between full energy recomputations.
pub const ENERGY_CHECK_INTERVAL: u64 = 10_000;
const ENERGY_TOLERANCE: f64 = 1e-8;

/// One Markov chain targeting the finite-volume Gibbs measure.
#[derive(Debug, Clone)]
pub struct GibbsChain {
    model: ModelParams,
    weights: MoveWeights,
    step_size: f64,
    cfg: Configuration,
    book: EnergyBook,
    steps: u64,
    rng: SimRng,
    counts: MoveCounts,
    max_drift: f64,
    rebuilds: u64,
}

impl GibbsChain {
    pub fn new(model: ModelParams, sampler: &SamplerConfig, index: usize) -> Result<Self> {
        sampler.validate()?;
        let cfg = model.empty_configuration();
        let book = EnergyBook::new(model.potential(), &cfg);
        Ok(GibbsChain {
            model,
            weights: sampler.weights,
            step_size: sampler.translate_step,
            cfg,
            book,
            steps: 0,
            rng: stream_rng(sampler.seed, tagged(TAG_CHAIN, index as u64)),
            counts: MoveCounts::default(),
            max_drift: 0.0,
            rebuilds: 0,
        })
    }

    /// Starts from a given configuration instead of the empty one.
    pub fn with_state(mut self, cfg: Configuration) -> Self {
        self.book = EnergyBook::new(self.model.potential(), &cfg);
        self.cfg = cfg;
        self
    }

    pub fn state(&self) -> &Configuration {
        &self.cfg
    }
    pub fn model(&self) -> &ModelParams {
        &self.model
    }
    pub fn steps(&self) -> u64 {
        self.steps
    }
    pub fn counts(&self) -> &MoveCounts {
        &self.counts
    }
    pub fn max_energy_drift(&self) -> f64 {
        self.max_drift
    }
    pub fn energy_rebuilds(&self) -> u64 {
        self.rebuilds
    }
    pub fn cached_energy(&self, id: ParticleId) -> f64 {
        self.book.get(id)
    }

    fn pick_move(&mut self) -> MoveKind {
        let w = &self.weights;
        let u = self.rng.random::<f64>() * (w.birth + w.death + w.translate);
        if u < w.birth {
            MoveKind::Birth
        } else if u < w.birth + w.death {
            MoveKind::Death
        } else {
            MoveKind::Translate
        }
    }

    /// Proposes one move and accepts or rejects it.
    pub fn mcmc_step(&mut self) -> (MoveKind, bool) {
        let kind = self.pick_move();
        let pot = *self.model.potential();
        let accepted = match kind {
            MoveKind::Birth => {
                let x = self.model.torus().uniform_point(&mut self.rng);
                let e = pot.relative_energy(&self.cfg, &x, None);
                let ratio = birth_ratio(&self.model, &self.weights, self.cfg.len(), e);
                if self.rng.random::<f64>() < ratio {
                    match self.cfg.insert(x) {
                        Ok(id) => {
                            self.book.on_insert(&pot, &self.cfg, id, e);
                            true
                        }
                        Err(_) => false,
                    }
                } else {
                    false
                }
            }
            MoveKind::Death => {
                let n = self.cfg.len();
                if n == 0 {
                    false
                } else {
                    let id = self.cfg.nth_id(self.rng.random_range(0..n));
                    let ratio = death_ratio(&self.model, &self.weights, n, self.book.get(id));
                    if self.rng.random::<f64>() < ratio {
                        self.book.on_remove(&pot, &self.cfg, id);
                        self.cfg.remove(id).expect("live particle");
                        true
                    } else {
                        false
                    }
                }
            }
            MoveKind::Translate => {
                let n = self.cfg.len();
                if n == 0 {
                    false
                } else {
                    let id = self.cfg.nth_id(self.rng.random_range(0..n));
                    let step: Coords = (0..self.model.torus().dim())
                        .map(|_| { let g: f64 = StandardNormal.sample(&mut self.rng); self.step_size * g })
                        .collect();
                    let to = self.model.torus().translate(self.cfg.pos(id), &step);
                    let e_new = pot.relative_energy(&self.cfg, &to, Some(id));
                    let e_old = self.book.get(id);
                    let ok = e_new.is_finite() && self.rng.random::<f64>() < (e_old - e_new).exp();
                    if ok {
                        self.book.on_remove(&pot, &self.cfg, id);
                        if self.cfg.relocate(id, to).is_ok() {
                            self.book.on_insert(&pot, &self.cfg, id, e_new);
                            true
                        } else {
                            let e = pot.relative_energy(&self.cfg, self.cfg.pos(id), Some(id));
                            self.book.on_insert(&pot, &self.cfg, id, e);
                            false
                        }
                    } else {
                        false
                    }
                }
            }
        };
        self.counts.record(kind, accepted);
        self.steps += 1;
        if self.steps % ENERGY_CHECK_INTERVAL == 0 {
            self.verify_energies();
        }
        (kind, accepted)
    }

    /// Compares cached energies with a full recomputation; rebuilds on drift.
    pub fn verify_energies(&mut self) -> f64 {
        let dev = self.book.max_deviation(self.model.potential(), &self.cfg);
        self.max_drift = self.max_drift.max(dev);
        if dev > ENERGY_TOLERANCE {
            self.book.rebuild(self.model.potential(), &self.cfg);
            self.rebuilds += 1;
        }
        dev
    }

    pub fn advance(&mut self, steps: u64) {
        for _ in 0..steps {
            self.mcmc_step();
        }
    }

    /// Emits `samples` configurations, one every `thinning` steps.
    pub fn run(&mut self, samples: usize, thinning: u64) -> ChainRun {
        let mut out = ChainRun { steps: Vec::with_capacity(samples), coords: Vec::with_capacity(samples) };
        for _ in 0..samples {
            self.advance(thinning);
            out.steps.push(self.steps);
            out.coords.push(self.cfg.flat_coords());
        }
        out
    }
}

/// Samples emitted by one chain, stored as flat coordinate arrays.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChainRun {
    pub steps: Vec<u64>,
    pub coords: Vec<Vec<f64>>,
}

impl ChainRun {
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub birth: f64,
    pub death: f64,
    pub translate: f64,
}

/// Convergence diagnostics of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub acceptance: AcceptanceRates,
    pub mean_n: Estimate,
    pub tau_n: f64,
    pub ess_n: f64,
    /// First vs second half of every chain, pooled.
    pub halves_z: f64,
    pub halves_agree: bool,
    /// Largest standardized deviation of a chain mean from the pooled mean.
    pub cross_chain_max_z: f64,
    pub max_energy_drift: f64,
    pub energy_rebuilds: u64,
}

/// Batches per chain used for error bars.
pub const BATCHES_PER_CHAIN: usize = 20;

/// An ensemble of samples from independent chains.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    torus: Torus,
    cell_size: f64,
    chains: Vec<ChainRun>,
    diagnostics: Option<Diagnostics>,
}

impl SampleSet {
    pub fn new(torus: Torus, cell_size: f64, chains: Vec<ChainRun>) -> Self {
        SampleSet { torus, cell_size, chains, diagnostics: None }
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }
    pub fn chains(&self) -> &[ChainRun] {
        &self.chains
    }
    pub fn diagnostics(&self) -> Option<&Diagnostics> {
        self.diagnostics.as_ref()
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(|c| c.len()).sum()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_lens(&self) -> Vec<usize> {
        self.chains.iter().map(|c| c.len()).collect()
    }

    fn coords(&self, mut i: usize) -> &[f64] {
        for c in &self.chains {
            if i < c.len() {
                return &c.coords[i];
            }
            i -= c.len();
        }
        panic!("sample index out of range")
    }

    /// Configuration of sample `i` (chains concatenated in order).
    pub fn config(&self, i: usize) -> Configuration {
        let d = self.torus.dim();
        Configuration::from_points(self.torus, self.cell_size, self.coords(i).chunks(d))
            .expect("stored samples are simple configurations")
    }

    pub fn particle_counts(&self) -> Vec<f64> {
        let d = self.torus.dim();
        self.chains.iter().flat_map(|c| c.coords.iter().map(move |x| (x.len() / d) as f64)).collect()
    }

    /// Evaluates `f(index, configuration)` for every sample in parallel,
    /// returning results in sample order.
    pub fn par_map<T: Send>(&self, f: impl Fn(usize, &Configuration) -> T + Sync) -> Vec<T> {
        (0..self.len()).into_par_iter().map(|i| f(i, &self.config(i))).collect()
    }

    /// Mean of per-sample values with a batch-means error bar.
    pub fn estimate(&self, values: &[f64]) -> Estimate {
        grouped_batch_means(values, &self.group_lens(), BATCHES_PER_CHAIN)
    }

    /// Splits every chain into its first and second halves.
    pub fn halves(&self) -> (SampleSet, SampleSet) {
        let split = |first: bool| {
            let chains = self
                .chains
                .iter()
                .map(|c| {
                    let h = c.len() / 2;
                    let r = if first { 0..h } else { h..c.len() };
                    ChainRun { steps: c.steps[r.clone()].to_vec(), coords: c.coords[r].to_vec() }
                })
                .collect();
            SampleSet::new(self.torus, self.cell_size, chains)
        };
        (split(true), split(false))
    }

    fn compute_diagnostics(&self, counts: &MoveCounts, drift: f64, rebuilds: u64) -> Diagnostics {
        let n = self.particle_counts();
        let mean_n = self.estimate(&n);
        let mut start = 0;
        let mut ess = 0.0;
        let mut taus = Vec::new();
        let mut max_z: f64 = 0.0;
        let (mut first, mut second) = (Vec::new(), Vec::new());
        let (mut lf, mut ls) = (Vec::new(), Vec::new());
        for c in &self.chains {
            let xs = &n[start..start + c.len()];
            start += c.len();
            ess += effective_sample_size(xs);
            taus.push(integrated_autocorrelation_time(xs));
            let est = grouped_batch_means(xs, &[xs.len()], BATCHES_PER_CHAIN);
            if self.chains.len() > 1 {
                max_z = max_z.max(z_score(est.value - mean_n.value, est.stderr).abs());
            }
            let h = xs.len() / 2;
            first.extend_from_slice(&xs[..h]);
            second.extend_from_slice(&xs[h..]);
            lf.push(h);
            ls.push(xs.len() - h);
        }
        let a = grouped_batch_means(&first, &lf, BATCHES_PER_CHAIN / 2);
        let b = grouped_batch_means(&second, &ls, BATCHES_PER_CHAIN / 2);
        let halves_z = a.z_between(&b);
        Diagnostics {
            acceptance: AcceptanceRates {
                birth: counts.rate(MoveKind::Birth),
                death: counts.rate(MoveKind::Death),
                translate: counts.rate(MoveKind::Translate),
            },
            mean_n,
            tau_n: crate::stats::mean(&taus),
            ess_n: ess,
            halves_z,
            halves_agree: halves_z.abs() <= 2.0 || (a.value == b.value),
            cross_chain_max_z: max_z,
            max_energy_drift: drift,
            energy_rebuilds: rebuilds,
        }
    }
}

/// Runs `sampler.chains` independent chains in parallel (burn-in, then
/// `samples_per_chain` thinned samples each).
pub fn sample_ensemble(model: &ModelParams, sampler: &SamplerConfig) -> Result<SampleSet> {
    sampler.validate()?;
    let results: Vec<(ChainRun, MoveCounts, f64, u64)> = (0..sampler.chains)
        .into_par_iter()
        .map(|c| {
            let mut chain = GibbsChain::new(*model, sampler, c).expect("validated sampler");
            chain.advance(sampler.burnin);
            let run = chain.run(sampler.samples_per_chain, sampler.thinning);
            chain.verify_energies();
            (run, *chain.counts(), chain.max_energy_drift(), chain.energy_rebuilds())
        })
        .collect();
    let mut counts = MoveCounts::default();
    let mut drift: f64 = 0.0;
    let mut rebuilds = 0;
    let mut chains = Vec::with_capacity(results.len());
    for (run, c, d, r) in results {
        counts.merge(&c);
        drift = drift.max(d);
        rebuilds += r;
        chains.push(run);
    }
    let mut set = SampleSet::new(*model.torus(), model.potential().cutoff(), chains);
    set.diagnostics = Some(set.compute_diagnostics(&counts, drift, rebuilds));
    Ok(set)
}

/// Exact i.i.d. draws of the Poisson process of intensity `z` on the torus,
/// packaged like an ensemble (one "chain" per stream).
pub fn sample_poisson(torus: Torus, z: f64, chains: usize, per_chain: usize, seed: u64) -> SampleSet {
    use rand_distr::Poisson;
    let pois = Poisson::new(z * torus.volume()).expect("positive mean");
    let runs = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, tagged(crate::rng::TAG_POISSON, c as u64));
            let mut run = ChainRun::default();
            for k in 0..per_chain {
                let n: f64 = pois.sample(&mut rng);
                let mut coords = Vec::with_capacity(n as usize * torus.dim());
                for _ in 0..n as usize {
                    coords.extend_from_slice(&torus.uniform_point(&mut rng));
                }
                run.steps.push(k as u64);
                run.coords.push(coords);
            }
            run
        })
        .collect();
    SampleSet::new(torus, 1.0f64.min(torus.half_side()), runs)
}

const MAGIC: &[u8; 4] = b"HSGS";
const FORMAT_VERSION: u32 = 1;

/// Writes samples in the binary record layout plus a JSON sidecar
/// (`<path>.json`) holding diagnostics and chain lengths.
///
/// Layout (little-endian): magic `HSGS`, version u32, dim u32, side f64,
/// chain count u32, then per chain a u64 record count followed by records
/// `step u64, N u64, N*dim f64`.
pub fn write_samples(path: &Path, set: &SampleSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(set.torus.dim() as u32).to_le_bytes())?;
    w.write_all(&set.torus.side().to_le_bytes())?;
    w.write_all(&(set.chains.len() as u32).to_le_bytes())?;
    for c in &set.chains {
        w.write_all(&(c.len() as u64).to_le_bytes())?;
        for (step, coords) in c.steps.iter().zip(&c.coords) {
            w.write_all(&step.to_le_bytes())?;
            w.write_all(&((coords.len() / set.torus.dim()) as u64).to_le_bytes())?;
            for x in coords {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    let sidecar = SampleSidecar {
        format_version: FORMAT_VERSION,
        cell_size: set.cell_size,
        chain_lengths: set.group_lens(),
        diagnostics: set.diagnostics.clone(),
    };
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleSidecar {
    format_version: u32,
    cell_size: f64,
    chain_lengths: Vec<usize>,
    diagnostics: Option<Diagnostics>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_samples(path: &Path) -> Result<SampleSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Io(format!("{}: not a sample file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Io(format!("unsupported sample format version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let side = read_f64(&mut r)?;
    let torus = Torus::new(dim, side)?;
    let n_chains = read_u32(&mut r)? as usize;
    let mut chains = Vec::with_capacity(n_chains);
    for _ in 0..n_chains {
        let len = read_u64(&mut r)? as usize;
        let mut run = ChainRun::default();
        for _ in 0..len {
            run.steps.push(read_u64(&mut r)?);
            let n = read_u64(&mut r)? as usize;
            let coords = (0..n * dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            run.coords.push(coords);
        }
        chains.push(run);
    }
    let sidecar: SampleSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let mut set = SampleSet::new(torus, sidecar.cell_size, chains);
    set.diagnostics = sidecar.diagnostics;
    Ok(set)
}

/// A configuration with a few particles removed and/or points added,
/// without copying the cell index.
#[derive(Debug, Clone)]
pub struct ConfigView<'a> {
    pub base: &'a Configuration,
    pub removed: SmallVec<[ParticleId; 2]>,
    pub added: SmallVec<[Coords; 2]>,
}

impl<'a> ConfigView<'a> {
    pub fn of(base: &'a Configuration) -> Self {
        ConfigView { base, removed: SmallVec::new(), added: SmallVec::new() }
    }

    pub fn without(base: &'a Configuration, ids: &[ParticleId]) -> Self {
        ConfigView { base, removed: ids.iter().copied().collect(), added: SmallVec::new() }
    }

    pub fn with_added(mut self, x: &[f64]) -> Self {
        self.added.push(Coords::from_slice(x));
        self
    }

    /// `E(y, view)`.
    pub fn energy(&self, pot: &PairPotential, y: &[f64]) -> f64 {
        let t = self.base.torus();
        let mut e = pot.relative_energy_excluding(self.base, y, &self.removed);
        for a in &self.added {
            e += pot.at(t.distance(y, a));
        }
        e
    }

    /// `<f, view>`.
    pub fn pair(&self, f: &TestFunction) -> f64 {
        let mut s = f.pair(self.base);
        for &id in &self.removed {
            s -= f.eval(self.base.pos(id));
        }
        for a in &self.added {
            s += f.eval(a);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.base.len() - self.removed.len() + self.added.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A functional `F(γ, x)`; `eval` receives `γ \ x` and `x`.
pub trait SiteFunctional: Sync {
    fn eval(&self, rest: &ConfigView, x: &[f64]) -> f64;
    /// A box containing every `x` where `F(·, x)` can be nonzero.
    fn support(&self) -> SupportBox;
}

/// A functional `F(γ, x1, x2)`; `eval` receives `γ \ {x1, x2}` (or `γ \ x`
/// on the diagonal `x1 = x2`).
pub trait PairFunctional: Sync {
    fn eval(&self, rest: &ConfigView, x1: &[f64], x2: &[f64]) -> f64;
    fn support(&self) -> SupportBox;
}

fn in_box(t: &Torus, b: &SupportBox, x: &[f64]) -> bool {
    x.iter().zip(b.center.iter()).all(|(&xi, &ci)| {
        let d = t.min_image_coord(xi - ci);
        d >= -b.half_width && d < b.half_width
    })
}

/// `F(γ, x) = 1_Λ(x)` for a box `Λ`.
pub struct Indicator {
    pub region: SupportBox,
    pub torus: Torus,
}

impl SiteFunctional for Indicator {
    fn eval(&self, _: &ConfigView, x: &[f64]) -> f64 {
        if in_box(&self.torus, &self.region, x) {
            1.0
        } else {
            0.0
        }
    }
    fn support(&self) -> SupportBox {
        self.region.clone()
    }
}

/// `F(γ, x) = 1_Λ(x) exp<f, γ \ x>`.
pub struct IndicatorCylinder {
    pub region: SupportBox,
    pub f: TestFunction,
}

impl SiteFunctional for IndicatorCylinder {
    fn eval(&self, rest: &ConfigView, x: &[f64]) -> f64 {
        if in_box(self.f.torus(), &self.region, x) {
            rest.pair(&self.f).exp()
        } else {
            0.0
        }
    }
    fn support(&self) -> SupportBox {
        self.region.clone()
    }
}

/// The death-term summand `exp[sE(x, γ\x)] (e^{-f(x)} - 1) e^{<f, γ>}`.
pub struct DeathTerm {
    pub f: TestFunction,
    pub model: ModelParams,
}

impl SiteFunctional for DeathTerm {
    fn eval(&self, rest: &ConfigView, x: &[f64]) -> f64 {
        let fx = self.f.eval(x);
        if fx == 0.0 {
            return 0.0;
        }
        let e = rest.energy(self.model.potential(), x);
        boltzmann(self.model.s(), e) * (-fx).exp_m1() * (rest.pair(&self.f) + fx).exp()
    }
    fn support(&self) -> SupportBox {
        self.f.support_box()
    }
}

/// `1_Λ(x1) 1_Λ(x2)`.
pub struct IndicatorPair {
    pub region: SupportBox,
    pub torus: Torus,
}

impl PairFunctional for IndicatorPair {
    fn eval(&self, _: &ConfigView, x1: &[f64], x2: &[f64]) -> f64 {
        if in_box(&self.torus, &self.region, x1) && in_box(&self.torus, &self.region, x2) {
            1.0
        } else {
            0.0
        }
    }
    fn support(&self) -> SupportBox {
        self.region.clone()
    }
}

/// Product of two death-term summands, the integrand of the squared death
/// part of the birth-death generator.
pub struct DeathTermPair {
    pub f: TestFunction,
    pub model: ModelParams,
}

impl PairFunctional for DeathTermPair {
    fn eval(&self, rest: &ConfigView, x1: &[f64], x2: &[f64]) -> f64 {
        let (f1, f2) = (self.f.eval(x1), self.f.eval(x2));
        if f1 == 0.0 || f2 == 0.0 {
            return 0.0;
        }
        let pot = self.model.potential();
        let s = self.model.s();
        let diagonal = x1 == x2;
        let link = if diagonal { 0.0 } else { pot.at(self.f.torus().distance(x1, x2)) };
        let e1 = rest.energy(pot, x1) + link;
        let e2 = rest.energy(pot, x2) + link;
        let pair = rest.pair(&self.f) + f1 + if diagonal { 0.0 } else { f2 };
        boltzmann(s, e1) * boltzmann(s, e2) * (-f1).exp_m1() * (-f2).exp_m1() * (2.0 * pair).exp()
    }
    fn support(&self) -> SupportBox {
        self.f.support_box()
    }
}

/// `1_Λ(x1) f(x2) e^{<f, γ>}`.
pub struct MixedPair {
    pub region: SupportBox,
    pub f: TestFunction,
}

impl PairFunctional for MixedPair {
    fn eval(&self, rest: &ConfigView, x1: &[f64], x2: &[f64]) -> f64 {
        if !in_box(self.f.torus(), &self.region, x1) {
            return 0.0;
        }
        let f2 = self.f.eval(x2);
        if f2 == 0.0 {
            return 0.0;
        }
        let pair = rest.pair(&self.f) + self.f.eval(x1) + if x1 == x2 { 0.0 } else { f2 };
        f2 * pair.exp()
    }
    fn support(&self) -> SupportBox {
        // covers both the indicator box and supp f when they are nested
        let r = self.region.half_width.max(self.f.radius());
        SupportBox { center: self.region.center.clone(), half_width: r }
    }
}

/// Two-sided GNZ comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnzResidual {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Per-sample difference, so shared-sample correlation is accounted for.
    pub diff: Estimate,
    pub z_score: f64,
    /// Both sides identically zero on every sample.
    pub vacuous: bool,
}

fn residual(set: &SampleSet, per_sample: Vec<(f64, f64)>) -> GnzResidual {
    let l: Vec<f64> = per_sample.iter().map(|p| p.0).collect();
    let r: Vec<f64> = per_sample.iter().map(|p| p.1).collect();
    let d: Vec<f64> = per_sample.iter().map(|p| p.0 - p.1).collect();
    let diff = set.estimate(&d);
    GnzResidual {
        lhs: set.estimate(&l),
        rhs: set.estimate(&r),
        diff,
        z_score: z_score(diff.value, diff.stderr),
        vacuous: per_sample.iter().all(|p| p.0 == 0.0 && p.1 == 0.0),
    }
}

fn ids_in_box(cfg: &Configuration, b: &SupportBox) -> Vec<ParticleId> {
    let t = cfg.torus();
    cfg.iter().filter(|(_, x)| in_box(t, b, x)).map(|(id, _)| id).collect()
}

/// Compares `E Σ_{x∈γ} F(γ,x)` with `E ∫ z e^{-E(x,γ)} F(γ∪x, x) dx`.
pub fn gnz_residual(set: &SampleSet, model: &ModelParams, func: &dyn SiteFunctional, quad: &QuadratureSpec) -> GnzResidual {
    let sb = func.support();
    let (nodes, w) = sb.midpoint_grid(set.torus(), quad.grid_per_axis);
    let pot = model.potential();
    let per = set.par_map(|_, cfg| {
        let lhs: f64 = ids_in_box(cfg, &sb)
            .into_iter()
            .map(|id| func.eval(&ConfigView::without(cfg, &[id]), cfg.pos(id)))
            .sum();
        let view = ConfigView::of(cfg);
        let rhs: f64 = nodes
            .iter()
            .map(|x| {
                let b = boltzmann(-1.0, pot.relative_energy(cfg, x, None));
                if b == 0.0 {
                    0.0
                } else {
                    b * func.eval(&view, x)
                }
            })
            .sum::<f64>()
            * model.z()
            * w;
        (lhs, rhs)
    });
    residual(set, per)
}

/// Two-point version including the diagonal term:
/// `E Σ_{x1,x2∈γ} F = z ∫ E[e^{-E(x)} F(γ∪x, x, x)] + z² ∫∫ E[e^{-E(x1)-E(x2)-φ(x1-x2)} F(γ∪{x1,x2}, x1, x2)]`.
pub fn double_gnz_residual(set: &SampleSet, model: &ModelParams, func: &dyn PairFunctional, quad: &QuadratureSpec) -> GnzResidual {
    let sb = func.support();
    let t = *set.torus();
    let (nodes, w) = sb.midpoint_grid(&t, quad.grid_per_axis);
    let pot = model.potential();
    let z = model.z();
    let per = set.par_map(|_, cfg| {
        let ids = ids_in_box(cfg, &sb);
        let mut lhs = 0.0;
        for &a in &ids {
            for &b in &ids {
                let rest = if a == b { ConfigView::without(cfg, &[a]) } else { ConfigView::without(cfg, &[a, b]) };
                lhs += func.eval(&rest, cfg.pos(a), cfg.pos(b));
            }
        }
        let view = ConfigView::of(cfg);
        let bw: Vec<f64> = nodes.iter().map(|x| boltzmann(-1.0, pot.relative_energy(cfg, x, None))).collect();
        let mut diag = 0.0;
        let mut off = 0.0;
        for (i, x1) in nodes.iter().enumerate() {
            if bw[i] == 0.0 {
                continue;
            }
            diag += bw[i] * func.eval(&view, x1, x1);
            for (j, x2) in nodes.iter().enumerate() {
                if i == j || bw[j] == 0.0 {
                    continue;
                }
                let v = func.eval(&view, x1, x2);
                if v != 0.0 {
                    off += bw[i] * bw[j] * boltzmann(-1.0, pot.at(t.distance(x1, x2))) * v;
                }
            }
        }
        (lhs, z * w * diag + z * z * w * w * off)
    });
    residual(set, per)
}

/// Convenience: the box `center ± half_width` as a support region.
pub fn region(center: &Point, half_width: f64) -> SupportBox {
    SupportBox { center: center.clone(), half_width }
}
