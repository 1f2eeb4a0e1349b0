//! `agp`: fit, predict, simulate and validate additive-interactive GP models.

mod commands;
mod config;
mod error;
mod io;
mod oracle_check;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{DataFlags, RunConfig, SamplerFlags, SimulationFlags};
use crate::error::{usage, CliError, Result};
use crate::oracle_check::OracleArgs;

#[derive(Debug, Parser)]
#[command(name = "agp", version, about = "Bayesian additive-interactive Gaussian process regression")]
struct Cli {
    /// Worker threads (default: one per core)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: $AGP_OUTPUT_DIR, else ./agp-out)
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// `key = value` configuration file; flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the posterior for a CSV data set and write chain and summaries
    Fit {
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Posterior predictive mean and 95% band for new rows from a saved fit
    Predict {
        /// Directory written by `fit`
        #[arg(long)]
        fit_dir: PathBuf,
        /// Headered CSV of new predictor values
        #[arg(long)]
        data: PathBuf,
        /// Predictions file (default: <fit-dir>/predictions.csv)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed of the band draws (default: derived from the fit seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replicated simulation study on one of the benchmark functions
    Simulate {
        #[command(flatten)]
        sim: SimulationFlags,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Also run every replicate without inter-component moves
        #[arg(long)]
        icm_ablation: bool,
        /// Save each replicate as a fit directory with its test set
        #[arg(long)]
        save_fits: bool,
    },
    /// Validate the sampler kernels against exact enumeration
    OracleCheck(OracleArgs),
}

fn config(cli: &Cli, pairs: Vec<(&str, &str)>) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), pairs)?;
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Fit { data, sampler } => {
            let mut pairs = data.pairs();
            pairs.extend(sampler.pairs());
            commands::fit(&config(cli, pairs)?)
        }
        Command::Predict {
            fit_dir,
            data,
            out,
            seed,
        } => {
            let out = out.clone().or_else(|| cli.output_dir.as_ref().map(|d| d.join("predictions.csv")));
            commands::predict_from_fit(fit_dir, data, out.as_deref(), *seed).map(|_| ())
        }
        Command::Simulate {
            sim,
            sampler,
            icm_ablation,
            save_fits,
        } => {
            let mut pairs = sim.pairs();
            pairs.extend(sampler.pairs());
            if *icm_ablation {
                pairs.push(("icm-ablation", "true"));
            }
            commands::simulate(&config(cli, pairs)?, *save_fits).map(|_| ())
        }
        Command::OracleCheck(args) => {
            let cfg = config(cli, Vec::new())?;
            oracle_check::oracle_check(args, &cfg.output_dir())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match &e {
                CliError::Usage(_) => "usage error",
                CliError::CheckFailed(_) => "check failed",
                CliError::Core(c) if c.is_numerical() => "numerical failure",
                CliError::Core(_) => "error",
            };
            eprintln!("agp: {kind}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
