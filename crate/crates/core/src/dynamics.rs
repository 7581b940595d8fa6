//! Kinetic Monte Carlo realizations of the birth-death and hopping
//! processes, with stationarity checks against Gibbs samples.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{ScaledKernel, TestFunction};
use crate::gibbs::SampleSet;
use crate::potential::{boltzmann, EnergyBook, ModelParams};
use crate::rng::{stream_rng, tagged, SimRng, TAG_DYNAMICS};
use crate::space::{Configuration, Coords, ParticleId};
use crate::stats::{batch_means, effective_sample_size, mean, variance, z_score, Estimate};

/// Which process to simulate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Process {
    BirthDeath,
    Hopping(ScaledKernel),
}

/// Exact death rates and dominating bounds for births and hops.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRates {
    /// `e^{sE(x, γ\x)}` per particle, in configuration order.
    pub death_rates: Vec<(ParticleId, f64)>,
    /// `z V`, dominating the birth intensity `z e^{(s-1)E}`.
    pub total_birth_bound: f64,
    /// `mass(a) e^{sE(x, γ\x)}` per particle.
    pub hop_bounds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Birth,
    Death,
    Hop,
    RejectedBirth,
    RejectedHop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub at: Coords,
    /// Origin of a hop.
    pub from: Option<Coords>,
}

/// State of one simulated trajectory.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: ModelParams,
    process: Process,
    cfg: Configuration,
    book: EnergyBook,
    time: f64,
    rng: SimRng,
}

fn check_process(model: &ModelParams) -> Result<()> {
    if !model.potential().is_nonnegative() {
        return Err(Error::Precondition("thinning bounds require a nonnegative potential".into()));
    }
    if model.potential().has_hard_core() {
        return Err(Error::Precondition("kinetic simulation excludes hard-core potentials".into()));
    }
    Ok(())
}

impl Simulator {
    pub fn new(model: ModelParams, process: Process, initial: Configuration, seed: u64, replica: u64) -> Result<Self> {
        check_process(&model)?;
        if let Process::Hopping(k) = &process {
            if k.torus() != model.torus() {
                return Err(Error::InvalidParameter("kernel torus differs from the model torus".into()));
            }
        }
        let book = EnergyBook::new(model.potential(), &initial);
        Ok(Simulator { model, process, cfg: initial, book, time: 0.0, rng: stream_rng(seed, tagged(TAG_DYNAMICS, replica)) })
    }

    pub fn state(&self) -> &Configuration {
        &self.cfg
    }
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn rates(&self) -> EventRates {
        let s = self.model.s();
        let death_rates: Vec<(ParticleId, f64)> = self.cfg.ids().iter().map(|&id| (id, boltzmann(s, self.book.get(id)))).collect();
        let mass = match &self.process {
            Process::Hopping(k) => k.mass(),
            Process::BirthDeath => 0.0,
        };
        let hop_bounds = death_rates.iter().map(|(_, r)| mass * r).collect();
        EventRates { death_rates, total_birth_bound: self.model.z() * self.model.torus().volume(), hop_bounds }
    }

    fn pick_weighted(&mut self, weights: impl Iterator<Item = f64> + Clone, total: f64) -> usize {
        let mut u = self.rng.random::<f64>() * total;
        let mut last = 0;
        for (i, w) in weights.enumerate() {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
        last
    }

    /// Advances to the next tentative event. Returns `None` when no event
    /// can ever occur (an empty hopping system).
    pub fn step(&mut self) -> Option<Event> {
        match self.process {
            Process::BirthDeath => Some(self.glauber_step()),
            Process::Hopping(k) => self.kawasaki_step(&k),
        }
    }

    /// Competing clocks: exact total death rate, dominated birth rate `zV`
    /// thinned by `e^{(s-1)E(x,γ)}`.
    pub fn glauber_step(&mut self) -> Event {
        let s = self.model.s();
        let pot = *self.model.potential();
        let deaths: Vec<f64> = self.cfg.ids().iter().map(|&id| boltzmann(s, self.book.get(id))).collect();
        let d: f64 = deaths.iter().sum();
        let b = self.model.z() * self.model.torus().volume();
        let dt: f64 = Exp::new(d + b).expect("positive rate").sample(&mut self.rng);
        self.time += dt;
        if self.rng.random::<f64>() * (d + b) < d {
            let k = self.pick_weighted(deaths.iter().copied(), d);
            let id = self.cfg.nth_id(k);
            let at = Coords::from_slice(self.cfg.pos(id));
            self.book.on_remove(&pot, &self.cfg, id);
            self.cfg.remove(id).expect("live particle");
            Event { time: self.time, kind: EventKind::Death, at, from: None }
        } else {
            let x = self.model.torus().uniform_point(&mut self.rng);
            let e = pot.relative_energy(&self.cfg, &x, None);
            let at = x.0.clone();
            if self.rng.random::<f64>() < boltzmann(s - 1.0, e) {
                if let Ok(id) = self.cfg.insert(x) {
                    self.book.on_insert(&pot, &self.cfg, id, e);
                    return Event { time: self.time, kind: EventKind::Birth, at, from: None };
                }
            }
            Event { time: self.time, kind: EventKind::RejectedBirth, at, from: None }
        }
    }

    /// Dominating hop rate `mass e^{sE(x,γ\x)}` per particle, landing draw
    /// from `a_ε / mass`, acceptance `e^{(s-1)E(y,γ\x)}`.
    pub fn kawasaki_step(&mut self, kernel: &ScaledKernel) -> Option<Event> {
        if self.cfg.is_empty() {
            return None;
        }
        let s = self.model.s();
        let pot = *self.model.potential();
        let bounds: Vec<f64> = self.cfg.ids().iter().map(|&id| kernel.mass() * boltzmann(s, self.book.get(id))).collect();
        let total: f64 = bounds.iter().sum();
        let dt: f64 = Exp::new(total).expect("positive rate").sample(&mut self.rng);
        self.time += dt;
        let k = self.pick_weighted(bounds.iter().copied(), total);
        let id = self.cfg.nth_id(k);
        let from = Coords::from_slice(self.cfg.pos(id));
        let w = kernel.sample(&mut self.rng);
        let y = self.model.torus().translate(&from, &w.vector);
        let e = pot.relative_energy(&self.cfg, &y, Some(id));
        let at = y.0.clone();
        if self.rng.random::<f64>() < boltzmann(s - 1.0, e) {
            self.book.on_remove(&pot, &self.cfg, id);
            if self.cfg.relocate(id, y).is_ok() {
                self.book.on_insert(&pot, &self.cfg, id, e);
                return Some(Event { time: self.time, kind: EventKind::Hop, at, from: Some(from) });
            }
            let e_back = pot.relative_energy(&self.cfg, self.cfg.pos(id), Some(id));
            self.book.on_insert(&pot, &self.cfg, id, e_back);
        }
        Some(Event { time: self.time, kind: EventKind::RejectedHop, at, from: Some(from) })
    }
}

/// Observables on a uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub time: f64,
    pub n: usize,
    pub sum_f: f64,
    pub close_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub births: u64,
    pub deaths: u64,
    pub hops: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial_n: usize,
    pub rows: Vec<ObservationRow>,
    pub counts: EventCounts,
    /// Present only when event logging was requested.
    pub events: Option<Vec<Event>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub t_end: f64,
    pub dt: f64,
    pub f: TestFunction,
    /// Radius for the close-pair observable.
    pub pair_radius: f64,
    pub log_events: bool,
    pub seed: u64,
}

/// Unordered pairs at distance below `r`.
pub fn close_pairs(cfg: &Configuration, r: f64) -> usize {
    let mut count = 0;
    for (id, x) in cfg.iter() {
        cfg.for_each_within(x, r, |other, _, d| {
            if other > id && d < r {
                count += 1;
            }
        });
    }
    count
}

fn observe(cfg: &Configuration, t: f64, spec: &SimulationSpec) -> ObservationRow {
    ObservationRow { time: t, n: cfg.len(), sum_f: spec.f.pair(cfg), close_pairs: close_pairs(cfg, spec.pair_radius) }
}

/// Runs one replica from `initial` up to `spec.t_end`, recording the state
/// at every multiple of `spec.dt`.
pub fn simulate(model: &ModelParams, process: Process, initial: Configuration, spec: &SimulationSpec, replica: u64) -> Result<Trajectory> {
    if !(spec.dt > 0.0 && spec.t_end >= 0.0) {
        return Err(Error::InvalidParameter("time grid must have dt > 0 and t_end >= 0".into()));
    }
    let initial_n = initial.len();
    let mut sim = Simulator::new(*model, process, initial, spec.seed, replica)?;
    let mut rows = Vec::new();
    let mut counts = EventCounts::default();
    let mut events = spec.log_events.then(Vec::new);
    let mut next_obs = 0.0;
    let mut current = observe(sim.state(), 0.0, spec);
    loop {
        let ev = sim.step();
        let t_next = ev.as_ref().map_or(f64::INFINITY, |e| e.time);
        // the current state holds until t_next
        while next_obs < t_next && next_obs <= spec.t_end {
            rows.push(ObservationRow { time: next_obs, ..current });
            next_obs = rows.len() as f64 * spec.dt;
        }
        let Some(ev) = ev else { break };
        if ev.time > spec.t_end {
            break;
        }
        match ev.kind {
            EventKind::Birth => counts.births += 1,
            EventKind::Death => counts.deaths += 1,
            EventKind::Hop => counts.hops += 1,
            _ => counts.rejected += 1,
        }
        if matches!(ev.kind, EventKind::Birth | EventKind::Death | EventKind::Hop) {
            current = observe(sim.state(), 0.0, spec);
        }
        if let Some(log) = events.as_mut() {
            log.push(ev);
        }
    }
    Ok(Trajectory { initial_n, rows, counts, events })
}

/// Independent replicas in parallel, replica `r` starting from `initial[r]`.
pub fn simulate_replicas(model: &ModelParams, process: Process, initial: Vec<Configuration>, spec: &SimulationSpec) -> Result<Vec<Trajectory>> {
    check_process(model)?;
    initial
        .into_par_iter()
        .enumerate()
        .map(|(r, c)| simulate(model, process, c, spec, r as u64))
        .collect()
}

/// Writes `time,n,sum_f,close_pairs` rows.
pub fn write_trajectory_csv(traj: &Trajectory, out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &traj.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observable {
    ParticleCount,
    SumF,
    ClosePairs,
}

impl Observable {
    pub const ALL: [Observable; 3] = [Observable::ParticleCount, Observable::SumF, Observable::ClosePairs];

    pub fn name(&self) -> &'static str {
        match self {
            Observable::ParticleCount => "n",
            Observable::SumF => "sum_f",
            Observable::ClosePairs => "close_pairs",
        }
    }

    fn of_row(&self, r: &ObservationRow) -> f64 {
        match self {
            Observable::ParticleCount => r.n as f64,
            Observable::SumF => r.sum_f,
            Observable::ClosePairs => r.close_pairs as f64,
        }
    }

    fn of_config(&self, c: &Configuration, f: &TestFunction, pair_radius: f64) -> f64 {
        match self {
            Observable::ParticleCount => c.len() as f64,
            Observable::SumF => f.pair(c),
            Observable::ClosePairs => close_pairs(c, pair_radius) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityRow {
    pub observable: Observable,
    pub time_average: Estimate,
    pub ensemble: Estimate,
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub rows: Vec<StationarityRow>,
    /// Smallest effective number of time samples over observables.
    pub effective_samples: f64,
    pub insufficient: bool,
}

impl StationarityReport {
    pub fn max_abs_z(&self) -> f64 {
        self.rows.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max)
    }
}

/// Time blocks for a single-trajectory error bar.
pub const TIME_BLOCKS: usize = 20;

/// Compares post-burn-in time averages with Gibbs-ensemble averages.
///
/// With several replicas the error bar is the spread of per-replica time
/// averages; with one replica it is batch means over time blocks.
pub fn stationarity_test(trajs: &[Trajectory], burn_in: f64, set: &SampleSet, f: &TestFunction, pair_radius: f64) -> Result<StationarityReport> {
    if trajs.is_empty() {
        return Err(Error::InsufficientData("no trajectories".into()));
    }
    let mut rows = Vec::new();
    let mut min_ess = f64::INFINITY;
    for obs in Observable::ALL {
        let series: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| t.rows.iter().filter(|r| r.time >= burn_in).map(|r| obs.of_row(r)).collect())
            .collect();
        let ess: f64 = series.iter().map(|s| effective_sample_size(s)).sum();
        let time_average = if trajs.len() == 1 {
            batch_means(&series[0], TIME_BLOCKS)
        } else {
            let avgs: Vec<f64> = series.iter().map(|s| mean(s)).collect();
            Estimate::new(mean(&avgs), (variance(&avgs) / avgs.len() as f64).sqrt())
        };
        let vals = set.par_map(|_, c| obs.of_config(c, f, pair_radius));
        let ensemble = set.estimate(&vals);
        let z = z_score(time_average.value - ensemble.value, time_average.stderr.hypot(ensemble.stderr));
        if series.iter().any(|s| s.iter().any(|v| *v != s[0])) || vals.iter().any(|v| *v != vals[0]) {
            min_ess = min_ess.min(ess);
        }
        rows.push(StationarityRow { observable: obs, time_average, ensemble, z_score: z });
    }
    let effective_samples = if min_ess.is_finite() { min_ess } else { trajs.iter().map(|t| t.rows.len() as f64).sum() };
    Ok(StationarityReport { rows, effective_samples, insufficient: effective_samples < 10.0 })
}
