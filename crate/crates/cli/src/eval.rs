//! `mixscribe eval`

use std::fs::File;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use mixscribe::estimators::{read_curves_csv, TranscriptionResult};
use mixscribe::eval::evaluate;
use mixscribe::mixgen::{GroundTruth, TrackTruth};

use crate::config::{create_dir, require_file, staged, write_text};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// result.json written by `transcribe`.
    #[arg(long)]
    pub result: PathBuf,
    /// Ground-truth curve CSVs, one per track in track order.
    #[arg(long = "ground-truth", num_args = 1.., required = true)]
    pub ground_truth: Vec<PathBuf>,
    /// Directory for metrics.json; defaults to the directory of the result.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub verbose: bool,
}

pub fn run(args: EvalArgs) -> anyhow::Result<()> {
    crate::init_logging(args.verbose);
    require_file(&args.result, "result")?;
    let text = std::fs::read_to_string(&args.result)
        .with_context(|| format!("I/O error while reading {}", args.result.display()))?;
    let result = TranscriptionResult::from_json(&text)
        .map_err(|e| staged(e, format_args!("parsing {}", args.result.display())))?;
    if result.tracks.len() != args.ground_truth.len() {
        bail!(
            "input error: {} has {} tracks but {} ground-truth files were given",
            args.result.display(),
            result.tracks.len(),
            args.ground_truth.len()
        );
    }

    let mut tracks = Vec::with_capacity(args.ground_truth.len());
    for (track_id, path) in args.ground_truth.iter().enumerate() {
        require_file(path, "ground-truth file")?;
        let file = File::open(path)
            .with_context(|| format!("I/O error while opening {}", path.display()))?;
        let (gain, warp) = read_curves_csv(file, &result.grid).map_err(|e| {
            staged(
                e,
                format_args!("reading ground truth {} on the result grid", path.display()),
            )
        })?;
        tracks.push(TrackTruth {
            track_id,
            gain,
            warp,
        });
    }
    let truth = GroundTruth {
        grid: result.grid,
        tracks,
    };
    let metrics = evaluate(&result, &truth).map_err(|e| staged(e, "computing metrics"))?;

    metrics
        .write_table(std::io::stdout().lock())
        .context("I/O error while printing metrics")?;
    let out = match args.out {
        Some(o) => o,
        None => args
            .result
            .parent()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    create_dir(&out)?;
    write_text(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(&metrics)?,
    )
}
