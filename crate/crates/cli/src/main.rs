use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use llpco_cli::commands;
use llpco_cli::error::CliError;
use llpco_cli::ExperimentConfig;

/// Learning from label proportions: generate synthetic data, train a
/// scenario, evaluate it and compare runs.
///
/// `LLP_THREADS` caps the worker threads.
#[derive(Parser, Debug)]
#[command(name = "llpco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (`--seed` replaces the generator seed).
    Generate(RunArgs),
    /// Train a scenario (`--seed` replaces the training seed).
    Train(RunArgs),
    /// Score a checkpoint on the test split (`--seed` shifts the k-means seeds).
    Eval(RunArgs),
    /// Compare `metrics.json` files or run directories, best Acc_H first.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; also the default location of the dataset and checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Directory for `report.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("LLP_THREADS") else { return Ok(()) };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("LLP_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn load(args: &RunArgs, apply_seed: impl FnOnce(&mut ExperimentConfig, u64) -> Result<(), CliError>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        apply_seed(&mut cfg, seed)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Generate(args) => {
            let cfg = load(&args, |c, s| {
                match (&mut c.data.blobs, &mut c.data.raster) {
                    (Some(b), _) => b.seed = s,
                    (_, Some(r)) => r.seed = s,
                    _ => {}
                }
                Ok(())
            })?;
            commands::generate(&cfg, &args.out)?;
        }
        Command::Train(args) => {
            let cfg = load(&args, |c, s| {
                c.train.as_mut().ok_or_else(|| CliError::Config("missing train block".into()))?.seed = s;
                Ok(())
            })?;
            commands::train(&cfg, &args.out)?;
        }
        Command::Eval(args) => {
            let cfg = load(&args, |c, s| {
                let n = c.eval.kmeans_seeds.len() as u64;
                c.eval.kmeans_seeds = (s..s + n).collect();
                Ok(())
            })?;
            commands::eval(&cfg, &args.out)?;
        }
        Command::Report(args) => {
            commands::report(&args.inputs, args.out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
