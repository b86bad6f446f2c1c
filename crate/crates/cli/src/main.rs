//! `mixscribe`: transcribe DJ mixes, render synthetic mixes, score results.

mod config;
mod eval;
mod synth;
mod transcribe;

use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

const THREADS_ENV: &str = "MIXSCRIBE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "mixscribe",
    version,
    about = "Recover time-warp and gain curves of the tracks in a DJ mix"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decompose a mix against its source tracks and write gain/warp curves.
    Transcribe(transcribe::TranscribeArgs),
    /// Render a mix and its exact ground truth from a manifest.
    Synth(synth::SynthArgs),
    /// Score a transcription against ground-truth curves.
    Eval(eval::EvalArgs),
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("config error: {THREADS_ENV}={value:?} is not a thread count"))?;
    if n == 0 {
        bail!("config error: {THREADS_ENV} must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("config error: cannot start the worker pool")
}

pub(crate) fn init_logging(verbose: bool) {
    let level = if verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Transcribe(args) => transcribe::run(args),
        Command::Synth(args) => synth::run(args),
        Command::Eval(args) => eval::run(args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
