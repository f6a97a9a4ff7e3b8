//! `ivector`: batch front end for the extractor library. Subcommands cover
//! the whole pipeline: synthesize data, train a background model, train an
//! extractor, extract vectors, evaluate bounds, and recalibrate posteriors.
//!
//! Exit codes are a stable contract: 0 success, 2 usage or configuration
//! error, 3 data or format error, 4 numerical failure.

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ivector::{Error, ErrorClass};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "ivector", version, about = "i-vector extractor pipeline")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Deterministic reductions and bit-identical outputs, at some speed cost.
    #[arg(long, global = true)]
    reproducible: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a random model.
    Synth(commands::synth::Args),
    /// Train a background mixture model with EM.
    TrainUbm(commands::train_ubm::Args),
    /// Train an extractor with one of the four recipes.
    Train(commands::train::Args),
    /// Extract latent posterior means (and covariances) per segment.
    Extract(commands::extract::Args),
    /// Print the per-segment evidence lower bound and its total.
    Elbo(commands::elbo::Args),
    /// Re-fit the posterior calibration at a fixed model.
    Calibrate(commands::calibrate::Args),
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let repro = cli.reproducible;
    match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::TrainUbm(args) => commands::train_ubm::run(args, repro),
        Command::Train(args) => commands::train::run(args, repro),
        Command::Extract(args) => commands::extract::run(args, repro),
        Command::Elbo(args) => commands::elbo::run(args, repro),
        Command::Calibrate(args) => commands::calibrate::run(args, repro),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2u8,
                ErrorClass::Data => 3u8,
                ErrorClass::Numerical => 4u8,
            })
        }
    }
}
