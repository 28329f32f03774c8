//! `sonospeck`: simulate, train, apply and evaluate log-domain despeckling networks.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sonospeck::config::RunConfig;

use crate::error::{CliError, ExitKind};

/// Environment variable capping the number of worker threads.
const THREADS_ENV: &str = "SONOSPECK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sonospeck", version, about = "Self-supervised despeckling for sonar and SAR imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Settings {
    /// Config file of `key = value` lines (`#` starts a comment).
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs using config key names, e.g. `--epochs 10 --corpus data/`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic clean/noisy pairs and a manifest (needs `output`).
    Simulate(Settings),
    /// Train a network on a corpus (needs `corpus`, `output`; `--no-augment` disables augmentation).
    Train(Settings),
    /// Despeckle images with a checkpoint (needs `checkpoint`, `input`, `output`).
    Denoise(Settings),
    /// Score denoised images against their noisy inputs (needs `noisy`, `denoised`; optional `clean`).
    Evaluate(Settings),
    /// Choose the target variance by short runs over a range of looks (needs `corpus`).
    SweepVariance(Settings),
    /// Short runs over a grid of structural weights (needs `corpus`).
    SweepLambda(Settings),
    /// Finite-difference check of every operation and of the full network.
    Gradcheck(Settings),
    /// Forward-pass throughput and multiply-accumulate count.
    Bench(Settings),
    /// Inspect a checkpoint (needs `checkpoint`).
    Info(Settings),
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Invalid(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(format!("cannot start {n} worker threads: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let (settings, run): (&Settings, fn(&RunConfig) -> commands::Result<()>) = match &cli.command {
        Command::Simulate(s) => (s, commands::simulate),
        Command::Train(s) => (s, commands::train),
        Command::Denoise(s) => (s, commands::denoise),
        Command::Evaluate(s) => (s, commands::evaluate),
        Command::SweepVariance(s) => (s, commands::sweep_variance),
        Command::SweepLambda(s) => (s, commands::sweep_lambda),
        Command::Gradcheck(s) => (s, commands::gradcheck),
        Command::Bench(s) => (s, commands::bench),
        Command::Info(s) => (s, commands::info),
    };
    let cfg = RunConfig::load(settings.config.as_deref(), &settings.overrides)?;
    run(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(ExitKind::Validation as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind() as u8)
        }
    }
}
