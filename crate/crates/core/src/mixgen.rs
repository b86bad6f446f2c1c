//! Synthetic DJ mixes with exact ground truth.
//!
//! A mix is a sum of tracks, each played through a list of warp segments
//! (mix interval, track start, speed) and scaled by a piecewise-linear gain.
//! Speed changes are rendered by linear-interpolation resampling, so they
//! also shift pitch.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::estimators::{GainCurve, GridInfo, WarpCurve};
use crate::spectral::frame_count;

/// Ground-truth gain below which a track counts as absent.
pub const ACTIVITY_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpSegment {
    pub mix_start_s: f64,
    pub mix_end_s: f64,
    pub track_start_s: f64,
    #[serde(default = "unit_speed")]
    pub speed: f64,
}

fn unit_speed() -> f64 {
    1.0
}

impl WarpSegment {
    /// Track position in seconds at mix time `t`.
    pub fn track_time(&self, t: f64) -> f64 {
        self.track_start_s + (t - self.mix_start_s) * self.speed
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.mix_start_s && t < self.mix_end_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainPoint {
    pub time_s: f64,
    pub gain: f64,
}

/// Piecewise-linear gain; constant beyond the outer breakpoints, 1 when empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GainSpec(pub Vec<GainPoint>);

impl GainSpec {
    pub fn constant(gain: f64) -> Self {
        Self(vec![GainPoint { time_s: 0.0, gain }])
    }

    pub fn from_points(points: &[(f64, f64)]) -> Self {
        Self(
            points
                .iter()
                .map(|&(time_s, gain)| GainPoint { time_s, gain })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (j, p) in self.0.iter().enumerate() {
            if !p.time_s.is_finite() || !p.gain.is_finite() || p.gain < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "gain breakpoint {j} ({}, {}) must be finite with gain >= 0",
                    p.time_s, p.gain
                )));
            }
        }
        if let Some(j) = self.0.windows(2).position(|w| w[1].time_s <= w[0].time_s) {
            return Err(Error::InvalidSpec(format!(
                "gain breakpoint {} is not after breakpoint {j}",
                j + 1
            )));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> f64 {
        let pts = &self.0;
        match pts.len() {
            0 => return 1.0,
            _ if t <= pts[0].time_s => return pts[0].gain,
            n if t >= pts[n - 1].time_s => return pts[n - 1].gain,
            _ => {}
        }
        let j = pts.partition_point(|p| p.time_s <= t);
        let (a, b) = (pts[j - 1], pts[j]);
        a.gain + (b.gain - a.gain) * (t - a.time_s) / (b.time_s - a.time_s)
    }
}

/// Parameters of [`synth_track`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrack {
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    /// WAV file, relative to the manifest when not absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Generated track used when no path is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTrack>,
    pub warp: Vec<WarpSegment>,
    #[serde(default)]
    pub gain: GainSpec,
}

impl TrackSpec {
    pub fn validate(&self, index: usize) -> Result<()> {
        let name = |j: usize| format!("track {index} segment {j}");
        for (j, s) in self.warp.iter().enumerate() {
            let finite = [s.mix_start_s, s.mix_end_s, s.track_start_s, s.speed]
                .iter()
                .all(|v| v.is_finite());
            if !finite || s.mix_start_s < 0.0 || s.mix_end_s <= s.mix_start_s {
                return Err(Error::InvalidSpec(format!(
                    "{}: mix interval [{}, {}) is empty or invalid",
                    name(j),
                    s.mix_start_s,
                    s.mix_end_s
                )));
            }
            if s.speed <= 0.0 || s.track_start_s < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "{}: speed {} and track start {} must be positive",
                    name(j),
                    s.speed,
                    s.track_start_s
                )));
            }
            if j > 0 && s.mix_start_s < self.warp[j - 1].mix_end_s {
                return Err(Error::InvalidSpec(format!(
                    "{} overlaps or precedes segment {}",
                    name(j),
                    j - 1
                )));
            }
        }
        self.gain
            .validate()
            .map_err(|e| Error::InvalidSpec(format!("track {index}: {e}")))
    }

    pub fn segment_at(&self, t: f64) -> Option<&WarpSegment> {
        self.warp.iter().find(|s| s.contains(t))
    }
}

/// Everything needed to regenerate a mix bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifest {
    pub tracks: Vec<TrackSpec>,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
    /// Mix length; defaults to the end of the last segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

impl MixManifest {
    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tracks.is_empty() {
            return Err(Error::InvalidSpec("manifest lists no tracks".into()));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "noise_level {} must be finite and >= 0",
                self.noise_level
            )));
        }
        if let Some(d) = self.duration_s {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "duration_s {d} must be positive"
                )));
            }
        }
        for (i, t) in self.tracks.iter().enumerate() {
            if t.path.is_some() == t.synthetic.is_some() {
                return Err(Error::InvalidSpec(format!(
                    "track {i} needs exactly one of path or synthetic"
                )));
            }
            t.validate(i)?;
        }
        Ok(())
    }

    /// Loads or generates the source tracks; relative paths resolve against `base`.
    pub fn load_tracks(&self, base: &Path) -> Result<Vec<AudioBuffer>> {
        self.tracks
            .iter()
            .map(|t| match (&t.path, &t.synthetic) {
                (Some(p), _) => {
                    let p = PathBuf::from(p);
                    let full = if p.is_absolute() { p } else { base.join(p) };
                    crate::audio::read_wav(&full)
                        .map_err(|e| Error::InvalidInput(format!("{}: {e}", full.display())))
                }
                (None, Some(s)) => synth_track(s),
                (None, None) => unreachable!("validated"),
            })
            .collect()
    }
}

/// A rendered mix and the factor applied to keep its peak at or below 1.
#[derive(Debug, Clone)]
pub struct RenderedMix {
    pub audio: AudioBuffer,
    pub scale: f64,
}

fn mix_length(specs: &[TrackSpec], sample_rate: u32, duration_s: Option<f64>) -> usize {
    let sr = sample_rate as f64;
    match duration_s {
        Some(d) => (d * sr).round() as usize,
        None => specs
            .iter()
            .flat_map(|t| &t.warp)
            .map(|s| (s.mix_end_s * sr).ceil() as usize)
            .max()
            .unwrap_or(0),
    }
}

fn render_track(
    track: &AudioBuffer,
    spec: &TrackSpec,
    index: usize,
    len: usize,
) -> Result<Vec<f64>> {
    let sr = track.sample_rate as f64;
    let src = &track.samples;
    let mut out = vec![0.0; len];
    for (j, seg) in spec.warp.iter().enumerate() {
        let start = ((seg.mix_start_s * sr).ceil() as usize).min(len);
        let end = ((seg.mix_end_s * sr).ceil() as usize).min(len);
        if start >= end {
            continue;
        }
        let origin = seg.mix_start_s * sr;
        let pos = |n: usize| seg.track_start_s * sr + (n as f64 - origin) * seg.speed;
        let last = pos(end - 1);
        if src.is_empty() || last > (src.len() - 1) as f64 + 1e-6 {
            return Err(Error::InvalidSpec(format!(
                "track {index} segment {j} reads up to {:.3} s but the track lasts {:.3} s",
                last / sr,
                track.duration_s()
            )));
        }
        for (n, o) in out.iter_mut().enumerate().take(end).skip(start) {
            let p = pos(n).max(0.0);
            let i = p.floor() as usize;
            let frac = p - i as f64;
            let a = src[i.min(src.len() - 1)] as f64;
            let x = if frac == 0.0 || i + 1 >= src.len() {
                a
            } else {
                a + (src[i + 1] as f64 - a) * frac
            };
            *o = x * spec.gain.at(n as f64 / sr);
        }
    }
    Ok(out)
}

/// The mix before noise and peak normalization, in double precision.
pub fn render_unnormalized(
    tracks: &[AudioBuffer],
    specs: &[TrackSpec],
    duration_s: Option<f64>,
) -> Result<Vec<f64>> {
    if tracks.len() != specs.len() || tracks.is_empty() {
        return Err(Error::InvalidSpec(format!(
            "{} tracks but {} track specs",
            tracks.len(),
            specs.len()
        )));
    }
    let sample_rate = tracks[0].sample_rate;
    if let Some(i) = tracks.iter().position(|t| t.sample_rate != sample_rate) {
        return Err(Error::InvalidInput(format!(
            "track {i} has sample rate {} Hz, track 0 has {sample_rate} Hz",
            tracks[i].sample_rate
        )));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate(i)?;
    }
    let len = mix_length(specs, sample_rate, duration_s);
    let parts = tracks
        .par_iter()
        .zip(specs)
        .enumerate()
        .map(|(i, (t, s))| render_track(t, s, i, len))
        .collect::<Result<Vec<_>>>()?;
    let mut mix = vec![0.0; len];
    for p in parts {
        mix.iter_mut().zip(p).for_each(|(m, v)| *m += v);
    }
    Ok(mix)
}

/// Renders the mix described by `manifest` from already loaded tracks.
pub fn render_mix(tracks: &[AudioBuffer], manifest: &MixManifest) -> Result<RenderedMix> {
    manifest.validate()?;
    let mut mix = render_unnormalized(tracks, &manifest.tracks, manifest.duration_s)?;
    if manifest.noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
        for m in mix.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *m += manifest.noise_level * z;
        }
    }
    let peak = mix.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let samples = mix.iter().map(|&v| (v * scale) as f32).collect();
    Ok(RenderedMix {
        audio: AudioBuffer::new(samples, tracks[0].sample_rate)?,
        scale,
    })
}

/// Exact curves of one track on the analysis grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTruth {
    pub track_id: usize,
    pub gain: GainCurve,
    /// `None` where the ground-truth gain is at most [`ACTIVITY_EPS`].
    pub warp: WarpCurve,
}

impl TrackTruth {
    pub fn is_active(&self, frame: usize) -> bool {
        self.warp.0[frame].is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub grid: GridInfo,
    pub tracks: Vec<TrackTruth>,
}

/// Samples the gain and warp of every track at the mix frame centers.
///
/// `scale` is the normalization factor of the rendered mix; `track_lens`
/// are source lengths in samples. A track position maps to the frame whose
/// center is nearest.
pub fn sample_ground_truth(
    specs: &[TrackSpec],
    track_lens: &[usize],
    grid: &GridInfo,
    scale: f64,
) -> Result<GroundTruth> {
    if specs.len() != track_lens.len() {
        return Err(Error::InvalidInput(format!(
            "{} track specs but {} track lengths",
            specs.len(),
            track_lens.len()
        )));
    }
    let params = grid.params();
    params.validate()?;
    let sr = grid.sample_rate as f64;
    let tracks = specs
        .iter()
        .zip(track_lens)
        .enumerate()
        .map(|(track_id, (spec, &len))| {
            let frames = frame_count(len, &params).unwrap_or(0);
            let (gain, warp) = (0..grid.n_frames)
                .map(|tau| {
                    let t = grid.frame_time(tau);
                    let Some(seg) = spec.segment_at(t) else {
                        return (0.0, None);
                    };
                    let g = spec.gain.at(t) * scale;
                    if g <= ACTIVITY_EPS || frames == 0 {
                        return (g, None);
                    }
                    let center = seg.track_time(t) * sr - grid.wlen as f64 / 2.0;
                    let f = (center / grid.hlen as f64).round().max(0.0) as usize;
                    (g, Some(f.min(frames - 1)))
                })
                .unzip();
            TrackTruth {
                track_id,
                gain: GainCurve(gain),
                warp: WarpCurve(warp),
            }
        })
        .collect();
    Ok(GroundTruth {
        grid: *grid,
        tracks,
    })
}

/// Second-order band-pass section (constant 0 dB peak gain).
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    fn bandpass(center_hz: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * center_hz / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Seeded test track: band-limited noise bursts and decaying harmonic tones
/// over a quiet broadband bed, peak-normalized to 0.5.
///
/// Events are dense and random in band, pitch and length, so any two
/// stretches of the track (or of two tracks with different seeds) differ
/// spectrally.
pub fn synth_track(spec: &SyntheticTrack) -> Result<AudioBuffer> {
    if !(spec.duration_s > 0.0) || spec.sample_rate == 0 {
        return Err(Error::InvalidSpec(format!(
            "synthetic track needs a positive duration and sample rate, got {spec:?}"
        )));
    }
    let sr = spec.sample_rate as f64;
    let len = (spec.duration_s * sr).round() as usize;
    let nyquist = sr / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = vec![0.0f64; len];

    for o in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *o = 0.01 * z;
    }

    let mut t = 0.0;
    while t < spec.duration_s {
        let start = (t * sr) as usize;
        let dur = rng.gen_range(0.08..0.6);
        let n = ((dur * sr) as usize).min(len - start);
        let amp = log_uniform(&mut rng, 0.1, 1.0);
        let attack = (0.005 * sr).max(1.0);
        let decay = dur * rng.gen_range(0.2..0.6) * sr;
        let env = |k: usize| {
            let k = k as f64;
            (k / attack).min(1.0) * (-k / decay).exp()
        };
        if rng.gen_bool(0.7) {
            let center = log_uniform(&mut rng, 150.0, nyquist * 0.6);
            let mut bp = Biquad::bandpass(center, rng.gen_range(0.7..2.0), sr);
            for k in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                out[start + k] += 2.0 * amp * env(k) * bp.process(z);
            }
        } else {
            let f0 = log_uniform(&mut rng, 80.0, 900.0);
            let harmonics: Vec<(f64, f64)> = (1..=8)
                .map(|h| h as f64 * f0)
                .filter(|&f| f < nyquist * 0.9)
                .map(|f| (f, rng.gen_range(0.0..1.0) / (f / f0)))
                .collect();
            let w = 2.0 * std::f64::consts::PI / sr;
            for k in 0..n {
                let s: f64 = harmonics
                    .iter()
                    .map(|&(f, a)| a * (w * f * k as f64).sin())
                    .sum();
                out[start + k] += 0.5 * amp * env(k) * s;
            }
        }
        t += rng.gen_range(0.05..0.25);
    }

    let peak = out.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    let norm = if peak > 0.0 { 0.5 / peak } else { 1.0 };
    AudioBuffer::new(
        out.iter().map(|&v| (v * norm) as f32).collect(),
        spec.sample_rate,
    )
}
