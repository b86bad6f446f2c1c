//! `mixscribe synth`

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use mixscribe::audio::write_wav;
use mixscribe::estimators::GridInfo;
use mixscribe::eval::write_truth_csv;
use mixscribe::mixgen::{render_mix, sample_ground_truth, MixManifest};
use mixscribe::spectral::frame_count;
use serde::{Deserialize, Serialize};

use crate::config::{
    create_dir, create_file, require_file, staged, write_text, GridArgs, RunConfig,
};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Mix manifest (JSON).
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the manifest's noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid on which the ground truth is sampled.
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub verbose: bool,
}

/// Facts about a rendered mix needed to interpret its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthInfo {
    pub grid: GridInfo,
    /// Factor applied to the mix (and the reference gains) to keep its peak at or below 1.
    pub scale: f64,
    pub mix_samples: usize,
    pub track_samples: Vec<usize>,
}

pub fn run(args: SynthArgs) -> anyhow::Result<()> {
    crate::init_logging(args.verbose);
    require_file(&args.manifest, "manifest")?;
    let text = std::fs::read_to_string(&args.manifest).with_context(|| {
        format!(
            "I/O error while reading manifest {}",
            args.manifest.display()
        )
    })?;
    let mut manifest = MixManifest::from_json(&text).map_err(|e| {
        staged(
            e,
            format_args!("parsing manifest {}", args.manifest.display()),
        )
    })?;
    if let Some(s) = args.seed {
        manifest.seed = s;
    }
    let run_cfg = args.grid.resolve()?;
    run_cfg
        .multipass
        .validate()
        .map_err(|e| staged(e, "validating the grid configuration"))?;
    let Some(params) = run_cfg.multipass.final_params() else {
        bail!("config error: empty hop schedule");
    };

    let base = args.manifest.parent().unwrap_or(Path::new(""));
    let tracks = manifest
        .load_tracks(base)
        .map_err(|e| staged(e, "loading manifest tracks"))?;
    let rendered = render_mix(&tracks, &manifest).map_err(|e| staged(e, "rendering the mix"))?;
    let n_frames = frame_count(rendered.audio.len(), &params)
        .map_err(|e| staged(e, "framing the mix on the final grid"))?;
    let grid = GridInfo {
        hlen: params.hlen,
        wlen: params.wlen,
        sample_rate: rendered.audio.sample_rate,
        n_frames,
    };
    let track_samples: Vec<usize> = tracks.iter().map(|t| t.len()).collect();
    let truth = sample_ground_truth(&manifest.tracks, &track_samples, &grid, rendered.scale)
        .map_err(|e| staged(e, "sampling the ground truth"))?;
    log::info!(
        "rendered {:.1} s mix of {} tracks (scale {:.4}), {} frames of hop {}",
        rendered.audio.duration_s(),
        tracks.len(),
        rendered.scale,
        n_frames,
        params.hlen
    );

    let out = &args.out;
    create_dir(out)?;
    let wav = |path: PathBuf, audio| {
        write_wav(&path, audio).map_err(|e| staged(e, format_args!("writing {}", path.display())))
    };
    wav(out.join("mix.wav"), &rendered.audio)?;
    let mut track_paths = Vec::with_capacity(tracks.len());
    for (i, t) in tracks.iter().enumerate() {
        let name = format!("track_{i}.wav");
        wav(out.join(&name), t)?;
        track_paths.push(PathBuf::from(name));
        let path = out.join(format!("gt_{i}.csv"));
        write_truth_csv(&truth, i, create_file(&path)?)
            .map_err(|e| staged(e, format_args!("writing {}", path.display())))?;
    }
    write_text(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    let info = SynthInfo {
        grid,
        scale: rendered.scale,
        mix_samples: rendered.audio.len(),
        track_samples,
    };
    write_text(
        &out.join("truth.json"),
        &serde_json::to_string_pretty(&info)?,
    )?;

    // Ready-made transcription config; its paths are relative to `out`.
    let transcribe_cfg = RunConfig {
        mix: Some("mix.wav".into()),
        tracks: track_paths,
        out: None,
        verbose: false,
        dump_activations: false,
        multipass: run_cfg.multipass,
    };
    write_text(&out.join("transcribe.json"), &transcribe_cfg.to_json()?)?;
    Ok(())
}
