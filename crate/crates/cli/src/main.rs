//! `bdbf`: synthetic scenes, per-image Bayesian basis fitting, calibration
//! and uncertainty evaluation from the command line.
//!
//! Exit codes: 0 success, 2 usage or invalid input, 3 file I/O or format,
//! 4 numerical failure.

mod calibrate;
mod config;
mod error;
mod eval;
mod fit;
mod prior;
mod sweep;
mod synth;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{usage, CliResult, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "bdbf", version, about = "Bayesian basis fitting for depth completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes: basis, sparse measurements and ground truth.
    Synth(synth::SynthArgs),
    /// Estimate a shared prior from maximum-likelihood fits of training scenes.
    Prior(prior::PriorArgs),
    /// Fit one scene and write the dense latent mean and variance.
    Fit(fit::FitArgs),
    /// Score a prediction against ground truth and write the curves.
    Eval(eval::EvalArgs),
    /// Measure the mean NEES of a batch of predictions.
    Calibrate(calibrate::CalibrateArgs),
    /// Fit nested sparsity levels over many seeds and tabulate the metrics.
    Sweep(sweep::SweepArgs),
}

/// Prints a line to stdout; a closed pipe is not an error.
pub(crate) fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("BDBF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("BDBF_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| usage(e.to_string()))
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    init_threads()?;
    match &cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Prior(a) => prior::run(a),
        Command::Fit(a) => fit::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Calibrate(a) => calibrate::run(a),
        Command::Sweep(a) => sweep::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
