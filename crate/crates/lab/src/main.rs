use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::Value;

use exvar::commands::{self, ChaosArgs, Cov2WalkArgs, DiffusionArgs, HeatArgs, SimulateArgs, ValidateRatesArgs};
use exvar::config::{Experiment, ExperimentConfig};
use exvar::experiments;
use exvar::output::{manifest, write_pair, RunOutput};
use exvar::{LabError, LabResult};

#[derive(Parser, Debug)]
#[command(name = "exvar", version, about = "Variance decay experiments for reversible exclusion processes")]
struct Cli {
    /// Write <OUT>.csv|json and <OUT>.manifest.json instead of printing to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for replicas (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a rate family on its full window and report λ.
    ValidateRates(ValidateRatesArgs),
    /// Design a finite-range jump kernel with a prescribed covariance.
    Cov2walk(Cov2WalkArgs),
    /// Compare the heat kernel norm with its Gaussian prediction.
    HeatAsymptotics(HeatArgs),
    /// Chaos coefficients of an observable.
    Chaos(ChaosArgs),
    /// Finite-volume diffusion matrix from the cell problem.
    DiffusionMatrix(DiffusionArgs),
    /// Monte Carlo estimate of Var[P_t u].
    Simulate(SimulateArgs),
    /// Var[P_t u] against the Gaussian prediction.
    VarianceDecay(ConfigArg),
    /// Per-level variance of a symmetric exclusion process.
    SepDecay(ConfigArg),
    /// Distance between the semigroup and its homogenized counterpart.
    HomogGap(ConfigArg),
}

#[derive(clap::Args, Debug)]
struct ConfigArg {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
}

fn experiment(path: &Path, expected: Experiment) -> LabResult<ExperimentConfig> {
    let cfg = ExperimentConfig::from_file(path)?;
    if cfg.experiment != expected {
        return Err(LabError::Config(format!("config is for {:?}, subcommand expects {:?}", cfg.experiment, expected)));
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> LabResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    }
    let start = Instant::now();
    let mut out_path = cli.out.clone();
    let (name, config, result): (&str, Value, RunOutput) = match &cli.command {
        Command::ValidateRates(a) => ("validate-rates", serde_json::to_value(a)?, commands::validate_rates(a)?),
        Command::Cov2walk(a) => ("cov2walk", serde_json::to_value(a)?, commands::cov2walk(a)?),
        Command::HeatAsymptotics(a) => ("heat-asymptotics", serde_json::to_value(a)?, commands::heat_asymptotics(a)?),
        Command::Chaos(a) => ("chaos", serde_json::to_value(a)?, commands::chaos(a)?),
        Command::DiffusionMatrix(a) => ("diffusion-matrix", serde_json::to_value(a)?, commands::diffusion(a)?),
        Command::Simulate(a) => ("simulate", serde_json::to_value(a)?, commands::simulate(a)?),
        Command::VarianceDecay(c) => {
            let cfg = experiment(&c.config, Experiment::VarianceDecay)?;
            out_path = out_path.or(cfg.output.clone());
            ("variance-decay", serde_json::to_value(&cfg)?, experiments::variance_decay(&cfg)?)
        }
        Command::SepDecay(c) => {
            let cfg = experiment(&c.config, Experiment::SepDecay)?;
            out_path = out_path.or(cfg.output.clone());
            ("sep-decay", serde_json::to_value(&cfg)?, experiments::sep_decay(&cfg)?)
        }
        Command::HomogGap(c) => {
            let cfg = experiment(&c.config, Experiment::HomogGap)?;
            out_path = out_path.or(cfg.output.clone());
            ("homog-gap", serde_json::to_value(&cfg)?, experiments::homogenization_gap(&cfg)?)
        }
    };
    let man = manifest(name, &config, &result, start.elapsed().as_secs_f64());
    match out_path {
        Some(prefix) => {
            let (data, m) = write_pair(&prefix, &result, &man)?;
            eprintln!("wrote {} and {}", data.display(), m.display());
        }
        None => {
            print!("{}", result.rendered());
            eprintln!("{}", serde_json::to_string(&man)?);
        }
    }
    // a rate family that fails validation is reported, then signalled as a config error
    if let Command::ValidateRates(_) = cli.command {
        if result.summary["passed"] == Value::Bool(false) {
            return Err(LabError::Config("rate family failed validation".into()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
