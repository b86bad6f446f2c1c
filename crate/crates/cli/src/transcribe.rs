//! `mixscribe transcribe`

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use mixscribe::blocksparse::BlockKind;
use mixscribe::estimators::{transcribe, write_gain_csv, write_warp_csv};
use mixscribe::multipass::{multipass_nmf, MultipassOutput};

use crate::config::{create_dir, create_file, read_wav, staged, write_text, GridArgs, RunConfig};

/// Largest side of the exported activation heatmaps, in pixels.
const HEATMAP_MAX_SIDE: usize = 1024;

#[derive(Debug, Args)]
pub struct TranscribeArgs {
    /// Mix WAV file.
    #[arg(long)]
    pub mix: Option<PathBuf>,
    /// Source track WAV files, in track order.
    #[arg(long = "tracks", num_args = 1..)]
    pub tracks: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the random initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Also write each track's final activation block (.bsa and .pgm).
    #[arg(long)]
    pub dump_activations: bool,
    /// Report progress on standard error.
    #[arg(long)]
    pub verbose: bool,
}

impl TranscribeArgs {
    pub fn effective_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = self.grid.resolve()?;
        if let Some(m) = &self.mix {
            cfg.mix = Some(m.clone());
        }
        if !self.tracks.is_empty() {
            cfg.tracks = self.tracks.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.multipass.seed = s;
        }
        cfg.dump_activations |= self.dump_activations;
        cfg.verbose |= self.verbose;
        Ok(cfg)
    }
}

pub fn run(args: TranscribeArgs) -> anyhow::Result<()> {
    let cfg = args.effective_config()?;
    crate::init_logging(cfg.verbose);
    let Some(mix_path) = cfg.mix.clone() else {
        bail!("config error: no mix given (--mix or \"mix\" in --config)");
    };
    if cfg.tracks.is_empty() {
        bail!("config error: no tracks given (--tracks or \"tracks\" in --config)");
    }
    let Some(out) = cfg.out.clone() else {
        bail!("config error: no output directory given (--out or \"out\" in --config)");
    };
    cfg.multipass
        .validate()
        .map_err(|e| staged(e, "validating the configuration"))?;

    let mix = read_wav(&mix_path, "mix")?;
    let tracks = cfg
        .tracks
        .iter()
        .enumerate()
        .map(|(i, p)| read_wav(p, &format!("track {i}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    create_dir(&out)?;
    write_text(&out.join("config.json"), &cfg.to_json()?)?;

    log::info!(
        "transcribing {} ({:.1} s) against {} tracks",
        mix_path.display(),
        mix.duration_s(),
        tracks.len()
    );
    let output = multipass_nmf(&mix, &tracks, &cfg.multipass)
        .map_err(|e| staged(e, "running the multi-pass decomposition"))?;
    write_outputs(&output, &out, cfg.dump_activations)
}

fn write_outputs(output: &MultipassOutput, out: &Path, dump: bool) -> anyhow::Result<()> {
    let grid = output.grid();
    let result = transcribe(&output.activations, grid)
        .map_err(|e| staged(e, "estimating gain and warp curves"))?;
    let writing = |path: &Path| format!("writing {}", path.display());
    for t in &result.tracks {
        let i = t.track_id;
        let path = out.join(format!("track_{i}.csv"));
        t.write_csv(&grid, create_file(&path)?)
            .map_err(|e| staged(e, writing(&path)))?;
        let path = out.join(format!("gain_{i}.csv"));
        write_gain_csv(&t.gain, &grid, create_file(&path)?)
            .map_err(|e| staged(e, writing(&path)))?;
        let path = out.join(format!("warp_{i}.csv"));
        write_warp_csv(&t.warp, &grid, create_file(&path)?)
            .map_err(|e| staged(e, writing(&path)))?;
    }
    let json = result
        .to_json()
        .map_err(|e| staged(e, "encoding result.json"))?;
    write_text(&out.join("result.json"), &json)?;
    write_text(
        &out.join("passes.json"),
        &serde_json::to_string_pretty(&output.passes)?,
    )?;

    if dump {
        for b in output.activations.track_blocks() {
            let BlockKind::Track(i) = b.kind else {
                continue;
            };
            let path = out.join(format!("activations_{i}.bsa"));
            let mut w = create_file(&path)?;
            b.write_bsa(&mut w).map_err(|e| staged(e, writing(&path)))?;
            w.flush()
                .with_context(|| format!("I/O error while writing {}", path.display()))?;
            let path = out.join(format!("activations_{i}.pgm"));
            let mut w = create_file(&path)?;
            b.write_pgm(&mut w, HEATMAP_MAX_SIDE)
                .map_err(|e| staged(e, writing(&path)))?;
            w.flush()
                .with_context(|| format!("I/O error while writing {}", path.display()))?;
        }
    }
    log::info!("wrote {}", out.display());
    Ok(())
}
