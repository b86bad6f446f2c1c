//! Run configuration, flag precedence and error staging.

use std::fmt::Display;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::Args;
use mixscribe::multipass::MultipassConfig;
use serde::{Deserialize, Serialize};

/// Everything a transcription run needs; the file form of the CLI flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mix: Option<PathBuf>,
    pub tracks: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub verbose: bool,
    pub dump_activations: bool,
    #[serde(flatten)]
    pub multipass: MultipassConfig,
}

impl RunConfig {
    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("I/O error while reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("config error in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.mix.as_mut() {
            resolve(m);
        }
        cfg.tracks.iter_mut().for_each(resolve);
        if let Some(o) = cfg.out.as_mut() {
            resolve(o);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Analysis grid flags shared by `transcribe` and `synth`.
#[derive(Debug, Clone, Default, Args)]
pub struct GridArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hop size of the first (coarsest) pass, in samples.
    #[arg(long)]
    pub hlen_init: Option<usize>,
    /// Passes run while the hop exceeds this value.
    #[arg(long)]
    pub hlen_target: Option<usize>,
    /// Window length as a multiple of the hop.
    #[arg(long)]
    pub overlap: Option<usize>,
}

impl GridArgs {
    /// Config file values (or defaults) with the grid flags applied.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let m = &mut cfg.multipass;
        if let Some(v) = self.hlen_init {
            m.hlen_init = v;
        }
        if let Some(v) = self.hlen_target {
            m.hlen_target = v;
        }
        if let Some(v) = self.overlap {
            m.overlap = v;
        }
        Ok(cfg)
    }
}

/// Pipeline stage a library error belongs to.
pub fn stage(e: &mixscribe::Error) -> &'static str {
    use mixscribe::Error::*;
    match e {
        Io(_) | Wav(_) | Csv(_) | Json(_) => "I/O",
        ShapeMismatch { .. } => "shape",
        Numerical { .. } => "numerical",
        InvalidParams(_) => "config",
        InvalidInput(_) | InvalidSpec(_) => "input",
    }
}

pub fn staged(e: mixscribe::Error, action: impl Display) -> anyhow::Error {
    anyhow!("{} error while {action}: {e}", stage(&e))
}

pub fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("I/O error: {what} {} does not exist", path.display());
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| {
        format!(
            "I/O error while creating output directory {}",
            path.display()
        )
    })
}

pub fn create_file(path: &Path) -> anyhow::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("I/O error while creating {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text)
        .with_context(|| format!("I/O error while writing {}", path.display()))
}

pub fn read_wav(path: &Path, what: &str) -> anyhow::Result<mixscribe::audio::AudioBuffer> {
    require_file(path, what)?;
    mixscribe::audio::read_wav(path)
        .map_err(|e| staged(e, format_args!("reading {what} {}", path.display())))
}
