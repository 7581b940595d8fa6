//! `hopscale`: sampling, validation, dynamics and scaling runs.
//!
//! Exit codes: 0 success, 1 validation failure (bad config, violated
//! precondition or failed check), 2 runtime error.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hopscale_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "hopscale", version, about = "Birth-death and hopping dynamics of continuum particle systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Gibbs chains and store samples with diagnostics.
    Sample(RunArgs),
    /// Run the GNZ, Poisson-oracle, Ruelle and cluster-expansion checks.
    Validate(RunArgs),
    /// Simulate birth-death or hopping dynamics and test stationarity.
    Dynamics(RunArgs),
    /// Run the scaling study and the factorization check.
    Scaling(RunArgs),
    /// Re-render the artifacts of a previous run from its raw record.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Multiplies all sample and quadrature budgets.
    #[arg(long)]
    budget_scale: Option<f64>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_)
            | Error::RadiusTooLarge { .. }
            | Error::InadmissibleEps { .. }
            | Error::OrderTooLarge(_)
            | Error::StabilityFalsified { .. }
            | Error::UnknownTerm(_)
            | Error::Precondition(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn prepare(args: &RunArgs) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| match e {
        Error::Io(m) => Failure::Runtime(format!("reading {}: {m}", args.config.display())),
        other => Failure::from(other),
    })?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(k) = args.budget_scale {
        cfg.scale_budgets(k)?;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Failure::Validation("no output directory: pass --out or set `output`".into()))?;
    cfg.output = Some(out.clone());
    cfg.check()?;
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<bool, Failure> {
    let (args, runner): (&RunArgs, fn(&RunConfig, &std::path::Path) -> hopscale_core::Result<run::RawRun>) = match &cli.command {
        Command::Sample(a) => (a, run::run_sample),
        Command::Validate(a) => (a, run::run_validate),
        Command::Dynamics(a) => (a, run::run_dynamics),
        Command::Scaling(a) => (a, run::run_scaling),
        Command::Report { out } => {
            let raw = run::report(out)?;
            println!("re-rendered {} run in {}", raw.payload.command(), out.display());
            return Ok(true);
        }
    };
    let (cfg, out) = prepare(args)?;
    let raw = runner(&cfg, &out)?;
    run::persist(&raw, &out)?;
    println!("{} run written to {} ({})", raw.payload.command(), out.display(), if raw.passed { "passed" } else { "FAILED" });
    Ok(raw.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
