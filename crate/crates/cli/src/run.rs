//! Command execution and artifact rendering.
//!
//! Every command produces a [`RawRun`] stored as `raw.json`. All other
//! artifacts are rendered from it, so `report` can rebuild them exactly.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hopscale_core::correlation::{
    check_ruelle, default_xi, empirical_laplace, estimate_k1, estimate_k2_radial, k_to_u, laplace_series, u_to_k, EstimatedCorrelations,
    CorrelationSeq, FnCorrelations, PoissonCorrelations, RadialTable, RuelleCheck,
};
use hopscale_core::dynamics::{simulate_replicas, stationarity_test, write_trajectory_csv, Process, SimulationSpec, StationarityReport, Trajectory};
use hopscale_core::functions::ScaledKernel;
use hopscale_core::generators::QuadratureSpec;
use hopscale_core::gibbs::{
    double_gnz_residual, gnz_residual, region, sample_ensemble, write_samples, DeathTerm, DeathTermPair, Diagnostics, GnzResidual, Indicator,
    IndicatorCylinder, IndicatorPair, MixedPair, SampleSet, SamplerConfig,
};
use hopscale_core::scaling::{
    factorization_check, normalize_kernel, run_study_with_samples, smallest_admissible_eps, write_factorization_csv, write_norms_csv,
    FactorizationRow, StudyReport,
};
use hopscale_core::stats::poisson_chi_square;
use hopscale_core::{Error, ModelParams, PairPotential, Result};

use crate::config::{ProcessKind, RunConfig, Seeds};

pub const RAW_FILE: &str = "raw.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SAMPLES_FILE: &str = "samples.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRun {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub wall_seconds: f64,
    pub passed: bool,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Payload {
    Sample(SamplePayload),
    Validate(ValidatePayload),
    Dynamics(DynamicsPayload),
    Scaling(ScalingPayload),
}

impl Payload {
    pub fn command(&self) -> &'static str {
        match self {
            Payload::Sample(_) => "sample",
            Payload::Validate(_) => "validate",
            Payload::Dynamics(_) => "dynamics",
            Payload::Scaling(_) => "scaling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePayload {
    pub diagnostics: Option<Diagnostics>,
    /// Particle counts per chain.
    pub counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub suite: String,
    pub check: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatePayload {
    pub checks: Vec<CheckRow>,
    pub gnz: Vec<(String, GnzResidual)>,
    pub ruelle: RuelleCheck,
    pub k2: RadialTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPayload {
    pub process: ProcessKind,
    pub stationarity: StationarityReport,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPayload {
    pub report: StudyReport,
    pub factorization: Option<Vec<FactorizationRow>>,
    /// Smallest admissible `ε` of the factorization grid.
    pub factorization_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_comparison: Option<BoxComparison>,
}

/// Norms of the same study on a second box side. Informational: it
/// does not enter the pass/fail verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxComparison {
    pub side: f64,
    pub compare_side: f64,
    pub rows: Vec<BoxRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRow {
    pub eps: f64,
    pub m2: f64,
    pub m2_stderr: f64,
    pub m2_compare: f64,
    pub m2_compare_stderr: f64,
    pub z_score: f64,
}

fn raw(config: &RunConfig, start: Instant, passed: bool, payload: Payload) -> RawRun {
    RawRun {
        tool: "hopscale".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        seeds: config.seeds(),
        wall_seconds: start.elapsed().as_secs_f64(),
        passed,
        payload,
    }
}

pub fn run_sample(config: &RunConfig, out: &Path) -> Result<RawRun> {
    let start = Instant::now();
    let model = config.model()?;
    let set = sample_ensemble(&model, &config.sampler_config(&model))?;
    std::fs::create_dir_all(out)?;
    write_samples(&out.join(SAMPLES_FILE), &set)?;
    let counts = chain_counts(&set);
    let diagnostics = set.diagnostics().cloned();
    let passed = diagnostics.as_ref().is_none_or(|d| d.halves_agree);
    Ok(raw(config, start, passed, Payload::Sample(SamplePayload { diagnostics, counts })))
}

fn chain_counts(set: &SampleSet) -> Vec<Vec<usize>> {
    let all = set.particle_counts();
    let mut out = Vec::new();
    let mut at = 0;
    for len in set.group_lens() {
        out.push(all[at..at + len].iter().map(|&n| n as usize).collect());
        at += len;
    }
    out
}

pub fn run_validate(config: &RunConfig, _out: &Path) -> Result<RawRun> {
    let start = Instant::now();
    let model = config.model()?;
    let v = &config.validate;
    let t = *model.torus();
    let set = sample_ensemble(&model, &config.sampler_config(&model))?;
    let q = QuadratureSpec::new(v.grid_per_axis, 16)?.with_seed(config.seeds().quadrature);
    let f = config.test_function()?;
    let c = f.center().clone();
    let mut checks = Vec::new();
    let mut push = |suite: &str, check: &str, statistic: f64, threshold: f64, passed: bool| {
        checks.push(CheckRow { suite: suite.into(), check: check.into(), statistic, threshold, passed })
    };

    let mut gnz = Vec::new();
    let hw = v.region_half_width;
    let singles: [(&str, GnzResidual); 3] = [
        ("indicator", gnz_residual(&set, &model, &Indicator { region: region(&c, hw), torus: t }, &q)),
        ("indicator-cylinder", gnz_residual(&set, &model, &IndicatorCylinder { region: region(&c, hw), f: f.clone() }, &q)),
        ("death-term", gnz_residual(&set, &model, &DeathTerm { f: f.clone(), model: model.clone() }, &q)),
    ];
    for (name, r) in singles {
        push("gnz", name, r.z_score, v.z_max, !r.vacuous && r.z_score.abs() <= v.z_max);
        gnz.push((name.to_string(), r));
    }
    let pairs: [(&str, GnzResidual); 3] = [
        ("indicator-pair", double_gnz_residual(&set, &model, &IndicatorPair { region: region(&c, hw), torus: t }, &q)),
        ("death-term-pair", double_gnz_residual(&set, &model, &DeathTermPair { f: f.clone(), model: model.clone() }, &q)),
        ("mixed-pair", double_gnz_residual(&set, &model, &MixedPair { region: region(&c, 0.5 * hw), f: f.clone() }, &q)),
    ];
    for (name, r) in pairs {
        push("double-gnz", name, r.z_score, v.z_max, !r.vacuous && r.z_score.abs() <= v.z_max);
        gnz.push((name.to_string(), r));
    }

    // Poisson oracle: the same box and activity without interaction
    let ideal = ModelParams::new(model.z(), model.s(), PairPotential::zero(), t)?;
    let pset = sample_ensemble(&ideal, &SamplerConfig { seed: config.seeds().poisson, ..config.sampler_config(&ideal) })?;
    let counts: Vec<u64> = pset.particle_counts().iter().map(|&n| n as u64).collect();
    let chi = poisson_chi_square(&counts, model.z() * t.volume());
    push("poisson", "count-chi-square-p", chi.p_value, v.level, chi.passes(v.level));
    let pk1 = estimate_k1(&pset)?;
    let zk1 = pk1.z_against(model.z());
    push("poisson", "k1", zk1, v.z_max, zk1.abs() <= v.z_max);
    let exact_laplace = (model.z() * f.radial_integral(|x| x.exp_m1(), 20_000)).exp();
    let zl = empirical_laplace(&pset, &f).z_against(exact_laplace);
    push("poisson", "laplace", zl, v.z_max, zl.abs() <= v.z_max);
    let series = laplace_series(&PoissonCorrelations { z: model.z() }, &f, 6, 4096)?;
    let series_err = (series.value - exact_laplace).abs() / exact_laplace;
    push("poisson", "laplace-series-rel-err", series_err, 1e-6, series_err <= 1e-6);
    let (_, rec) = normalize_kernel(&pset, &ideal, &config.kernel()?, 16)?;
    push("poisson", "normalization-c", rec.c.value, 1.0, rec.c.value == 1.0);

    // Ruelle bound and cluster-expansion round trip on the estimates
    let k1 = estimate_k1(&set)?;
    let k2 = estimate_k2_radial(&set, v.bin_width, v.r_max, model.potential().hard_core())?;
    let ruelle = check_ruelle(&k1, &k2, default_xi(&model));
    push("ruelle", "max-violation", ruelle.max_violation, 3.0, ruelle.satisfied);
    let est = EstimatedCorrelations { k1, k2: k2.clone(), torus: t };
    let mut worst: f64 = 0.0;
    for b in k2.bins.iter().filter(|b| b.value.is_some_and(|x| x > 0.0)) {
        let x = c.coords().to_vec();
        let mut y = x.clone();
        y[0] += 0.5 * (b.r_lo + b.r_hi);
        let pts: [&[f64]; 2] = [&x, &y];
        let u = FnCorrelations(|p: &[&[f64]]| k_to_u(&est, p).ok().flatten());
        if let (Some(back), Some(orig)) = (u_to_k(&u, &pts)?, est.value(&pts)) {
            worst = worst.max((back - orig).abs() / orig.abs());
        }
    }
    push("ursell", "round-trip-rel-err", worst, 1e-12, worst <= 1e-12);

    let passed = checks.iter().all(|r| r.passed);
    Ok(raw(config, start, passed, Payload::Validate(ValidatePayload { checks, gnz, ruelle, k2 })))
}

pub fn run_dynamics(config: &RunConfig, _out: &Path) -> Result<RawRun> {
    let start = Instant::now();
    let model = config.model()?;
    let d = &config.dynamics;
    let t = *model.torus();
    let process = match d.process {
        ProcessKind::Glauber => Process::BirthDeath,
        ProcessKind::Kawasaki => Process::Hopping(ScaledKernel::new(config.kernel()?, d.eps, t)?),
    };
    let set = sample_ensemble(&model, &config.sampler_config(&model))?;
    if d.replicas == 0 {
        return Err(Error::InvalidParameter("need at least one replica".into()));
    }
    let stride = (set.len() / d.replicas).max(1);
    let starts = (0..d.replicas).map(|i| set.config((i * stride) % set.len())).collect();
    let f = config.test_function()?;
    let spec = SimulationSpec { t_end: d.t_end, dt: d.dt, f: f.clone(), pair_radius: d.pair_radius, log_events: false, seed: config.seeds().dynamics };
    let trajectories = simulate_replicas(&model, process, starts, &spec)?;
    let stationarity = stationarity_test(&trajectories, d.burn_in, &set, &f, d.pair_radius)?;
    let passed = !stationarity.insufficient && stationarity.max_abs_z() <= config.validate.z_max;
    Ok(raw(config, start, passed, Payload::Dynamics(DynamicsPayload { process: d.process, stationarity, trajectories })))
}

pub fn run_scaling(config: &RunConfig, _out: &Path) -> Result<RawRun> {
    let start = Instant::now();
    let study = config.study()?;
    let (report, set) = run_study_with_samples(&study)?;
    let mut passed = report.verdicts.strictly_decreasing && report.verdicts.ratio_ok && report.cross_check.iter().all(|r| r.z_score.abs() <= 3.0);
    let (factorization, factorization_eps) = match config.factorization()? {
        Some(spec) => {
            let eps = &config.factorization.as_ref().expect("section present").epsilons;
            let psi = config.test_function()?;
            let rows = factorization_check(&set, &study.model, &spec, &psi, eps)?;
            let smallest = smallest_admissible_eps(&spec, study.model.torus(), eps);
            if let Some(row) = rows.iter().find(|r| Some(r.eps) == smallest) {
                passed &= row.z_score.abs() <= 3.0;
            }
            (Some(rows), smallest)
        }
        None => (None, None),
    };
    let box_comparison = match config.comparison() {
        Some(other) => {
            let (alt, _) = run_study_with_samples(&other.study()?)?;
            let rows = report
                .rows
                .iter()
                .zip(&alt.rows)
                .map(|(a, b)| BoxRow {
                    eps: a.eps,
                    m2: a.m2.value,
                    m2_stderr: a.m2.stderr,
                    m2_compare: b.m2.value,
                    m2_compare_stderr: b.m2.stderr,
                    z_score: (a.m2.value - b.m2.value) / a.m2.stderr.hypot(b.m2.stderr),
                })
                .collect();
            Some(BoxComparison { side: config.model.side, compare_side: other.model.side, rows })
        }
        None => None,
    };
    Ok(raw(config, start, passed, Payload::Scaling(ScalingPayload { report, factorization, factorization_eps, box_comparison })))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn csv_rows(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

/// Serialized raw record.
pub fn raw_bytes(raw: &RawRun) -> Result<Vec<u8>> {
    json(raw)
}

/// Every derived artifact as `(file name, bytes)`, manifest last.
pub fn render(raw: &RawRun, raw_json: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let config_text = raw.config.to_toml();
    let config_hash = sha256_hex(config_text.as_bytes());
    files.push((CONFIG_FILE.into(), config_text.into_bytes()));
    let mut summary = serde_json::json!({
        "command": raw.payload.command(),
        "passed": raw.passed,
        "config_sha256": config_hash,
        "seeds": raw.seeds,
        "wall_seconds": raw.wall_seconds,
    });
    match &raw.payload {
        Payload::Sample(p) => {
            let rows = p.counts.iter().enumerate().flat_map(|(c, ns)| ns.iter().enumerate().map(move |(i, n)| vec![c.to_string(), i.to_string(), n.to_string()]));
            files.push(("counts.csv".into(), csv_rows(&["chain", "index", "n"], rows)?));
            summary["diagnostics"] = serde_json::to_value(&p.diagnostics)?;
        }
        Payload::Validate(p) => {
            let rows = p.checks.iter().map(|r| vec![r.suite.clone(), r.check.clone(), r.statistic.to_string(), r.threshold.to_string(), r.passed.to_string()]);
            files.push(("validate.csv".into(), csv_rows(&["suite", "check", "statistic", "threshold", "passed"], rows)?));
            let rows = p.k2.bins.iter().map(|b| {
                vec![b.r_lo.to_string(), b.r_hi.to_string(), b.value.map_or(String::new(), |v| v.to_string()), b.stderr.to_string(), b.count.to_string()]
            });
            files.push(("k2.csv".into(), csv_rows(&["r_lo", "r_hi", "value", "stderr", "count"], rows)?));
            summary["failed_checks"] = serde_json::to_value(p.checks.iter().filter(|r| !r.passed).map(|r| format!("{}/{}", r.suite, r.check)).collect::<Vec<_>>())?;
            summary["ruelle"] = serde_json::to_value(p.ruelle)?;
        }
        Payload::Dynamics(p) => {
            let rows = p.stationarity.rows.iter().map(|r| {
                vec![
                    r.observable.name().to_string(),
                    r.time_average.value.to_string(),
                    r.time_average.stderr.to_string(),
                    r.ensemble.value.to_string(),
                    r.ensemble.stderr.to_string(),
                    r.z_score.to_string(),
                ]
            });
            files.push((
                "stationarity.csv".into(),
                csv_rows(&["observable", "time_average", "time_average_stderr", "ensemble", "ensemble_stderr", "z_score"], rows)?,
            ));
            for (i, tr) in p.trajectories.iter().enumerate() {
                let mut buf = Vec::new();
                write_trajectory_csv(tr, &mut buf)?;
                files.push((format!("trajectory_{i:03}.csv"), buf));
            }
            summary["process"] = serde_json::to_value(p.process)?;
            summary["max_abs_z"] = serde_json::to_value(p.stationarity.max_abs_z())?;
            summary["effective_samples"] = serde_json::to_value(p.stationarity.effective_samples)?;
        }
        Payload::Scaling(p) => {
            let mut buf = Vec::new();
            write_norms_csv(&p.report.rows, &mut buf)?;
            files.push(("norms.csv".into(), buf));
            let rows = p.report.cross_check.iter().map(|r| {
                vec![
                    r.term.id().to_string(),
                    r.reduced.value.to_string(),
                    r.reduced.stderr.to_string(),
                    r.direct.value.to_string(),
                    r.direct.stderr.to_string(),
                    r.z_score.to_string(),
                ]
            });
            files.push(("cross_check.csv".into(), csv_rows(&["term", "reduced", "reduced_stderr", "direct", "direct_stderr", "z_score"], rows)?));
            if let Some(rows) = &p.factorization {
                let mut buf = Vec::new();
                write_factorization_csv(rows, &mut buf)?;
                files.push(("factorization.csv".into(), buf));
            }
            if let Some(b) = &p.box_comparison {
                let rows = b.rows.iter().map(|r| {
                    vec![r.eps.to_string(), r.m2.to_string(), r.m2_stderr.to_string(), r.m2_compare.to_string(), r.m2_compare_stderr.to_string(), r.z_score.to_string()]
                });
                files.push(("box_comparison.csv".into(), csv_rows(&["eps", "m2", "m2_stderr", "m2_compare", "m2_compare_stderr", "z_score"], rows)?));
                summary["box_comparison"] = serde_json::json!({ "side": b.side, "compare_side": b.compare_side });
            }
            summary["verdicts"] = serde_json::to_value(&p.report.verdicts)?;
            summary["normalization"] = serde_json::to_value(p.report.normalization)?;
            summary["study_wall_seconds"] = serde_json::to_value(p.report.wall_seconds)?;
            summary["factorization_eps"] = serde_json::to_value(p.factorization_eps)?;
        }
    }
    files.push((SUMMARY_FILE.into(), json(&summary)?));
    let mut hashes: BTreeMap<String, String> = files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect();
    hashes.insert(RAW_FILE.into(), sha256_hex(raw_json));
    let manifest = serde_json::json!({
        "tool": raw.tool,
        "version": raw.version,
        "command": raw.payload.command(),
        "seeds": raw.seeds,
        "wall_seconds": raw.wall_seconds,
        "config_sha256": config_hash,
        "files": hashes,
    });
    files.push((MANIFEST_FILE.into(), json(&manifest)?));
    Ok(files)
}

/// Writes `raw.json` and everything rendered from it.
pub fn persist(raw: &RawRun, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let bytes = raw_bytes(raw)?;
    std::fs::write(out.join(RAW_FILE), &bytes)?;
    for (name, data) in render(raw, &bytes)? {
        std::fs::write(out.join(name), data)?;
    }
    Ok(())
}

/// Re-renders a run directory from its stored raw record.
pub fn report(out: &Path) -> Result<RawRun> {
    let bytes = std::fs::read(out.join(RAW_FILE))?;
    let raw: RawRun = serde_json::from_slice(&bytes)?;
    for (name, data) in render(&raw, &bytes)? {
        std::fs::write(out.join(name), data)?;
    }
    Ok(raw)
}
