//! `warpforge`: synthesize datasets, register pairs, evaluate and run seeded
//! experiments.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical abort, 4 partial
//! experiment failure. `WARPFORGE_THREADS` caps the worker pool.

mod config;
mod error;
mod eval;
mod experiment;
mod overlay;
mod pipeline;
mod register;
mod synth;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "warpforge",
    version,
    about = "Deformable 2-D image registration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset of synthetic deformation pairs.
    Synth(synth::SynthArgs),
    /// Register one moving image onto a fixed image.
    Register(register::RegisterArgs),
    /// Evaluate every pair of a dataset into a CSV table.
    Eval(eval::EvalArgs),
    /// Run a multi-domain experiment from a JSON spec.
    Experiment(experiment::ExperimentArgs),
}

fn init_pool() -> CliResult<()> {
    let Ok(raw) = std::env::var("WARPFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::invalid(format!(
            "WARPFORGE_THREADS={raw:?} is not a positive integer"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::invalid)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_pool().and_then(|()| match &cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Register(a) => register::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Experiment(a) => experiment::run(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("warpforge: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
