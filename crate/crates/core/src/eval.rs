//! Mean absolute error of estimated curves against ground truth.
//!
//! Gain error averages over every track and mix frame, with the reference
//! gain at 0 where a track is absent. Warp error only counts frames where
//! both the reference and the estimate are active; reference-active frames
//! the estimate misses are reported separately as a miss rate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{write_curves_csv, TranscriptionResult};
use crate::mixgen::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub track_id: usize,
    pub gain_mae: f64,
    /// Seconds; 0 when no frame is jointly active.
    pub warp_mae_s: f64,
    pub miss_rate: f64,
    pub reference_active_frames: usize,
    pub jointly_active_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tracks: Vec<TrackMetrics>,
    pub gain_mae: f64,
    pub warp_mae_s: f64,
    pub miss_rate: f64,
}

impl Metrics {
    pub fn write_table(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{:<8} {:>10} {:>12} {:>10} {:>8}",
            "track", "gain_mae", "warp_mae_s", "miss_rate", "active"
        )?;
        for t in &self.tracks {
            writeln!(
                w,
                "{:<8} {:>10.4} {:>12.4} {:>10.4} {:>8}",
                t.track_id, t.gain_mae, t.warp_mae_s, t.miss_rate, t.reference_active_frames
            )?;
        }
        let active: usize = self.tracks.iter().map(|t| t.reference_active_frames).sum();
        writeln!(
            w,
            "{:<8} {:>10.4} {:>12.4} {:>10.4} {:>8}",
            "all", self.gain_mae, self.warp_mae_s, self.miss_rate, active
        )
    }
}

fn check_grids(est: &TranscriptionResult, truth: &GroundTruth) -> Result<()> {
    let (a, b) = (&est.grid, &truth.grid);
    if (a.hlen, a.wlen, a.sample_rate, a.n_frames) != (b.hlen, b.wlen, b.sample_rate, b.n_frames) {
        return Err(Error::InvalidInput(format!(
            "estimate grid {a:?} does not match reference grid {b:?}"
        )));
    }
    for t in &truth.tracks {
        let e = est
            .track(t.track_id)
            .ok_or_else(|| Error::InvalidInput(format!("estimate has no track {}", t.track_id)))?;
        let k = a.n_frames;
        if [e.gain.len(), e.warp.len(), t.gain.len(), t.warp.len()] != [k; 4] {
            return Err(Error::InvalidInput(format!(
                "track {} curves do not span the {k} grid frames",
                t.track_id
            )));
        }
    }
    Ok(())
}

/// Per-track and pooled gain MAE.
pub fn mae_gain(est: &TranscriptionResult, truth: &GroundTruth) -> Result<(Vec<f64>, f64)> {
    check_grids(est, truth)?;
    let per: Vec<f64> = truth
        .tracks
        .iter()
        .map(|t| {
            let e = est.track(t.track_id).expect("checked");
            let sum: f64 = e
                .gain
                .0
                .iter()
                .zip(&t.gain.0)
                .map(|(a, b)| (a - b).abs())
                .sum();
            if t.gain.is_empty() {
                0.0
            } else {
                sum / t.gain.len() as f64
            }
        })
        .collect();
    let all = if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    };
    Ok((per, all))
}

/// Warp error counts for one track: (sum of |df| in frames, joint, reference active).
fn warp_counts(est: &TranscriptionResult, truth: &GroundTruth, idx: usize) -> (f64, usize, usize) {
    let t = &truth.tracks[idx];
    let e = est.track(t.track_id).expect("checked");
    let (mut sum, mut joint, mut active) = (0.0, 0, 0);
    for (r, x) in t.warp.0.iter().zip(&e.warp.0) {
        if let Some(r) = r {
            active += 1;
            if let Some(x) = x {
                joint += 1;
                sum += (*x as f64 - *r as f64).abs();
            }
        }
    }
    (sum, joint, active)
}

fn ratio(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// `(warp MAE in seconds, miss rate)`.
pub type WarpScore = (f64, f64);

/// Per-track and pooled warp scores.
pub fn mae_warp(
    est: &TranscriptionResult,
    truth: &GroundTruth,
) -> Result<(Vec<WarpScore>, WarpScore)> {
    check_grids(est, truth)?;
    let hop = truth.grid.hop_seconds();
    let counts: Vec<_> = (0..truth.tracks.len())
        .map(|i| warp_counts(est, truth, i))
        .collect();
    let per = counts
        .iter()
        .map(|&(sum, joint, active)| {
            (
                ratio(sum, joint) * hop,
                ratio((active - joint) as f64, active),
            )
        })
        .collect();
    let sum: f64 = counts.iter().map(|c| c.0).sum();
    let joint: usize = counts.iter().map(|c| c.1).sum();
    let active: usize = counts.iter().map(|c| c.2).sum();
    Ok((
        per,
        (
            ratio(sum, joint) * hop,
            ratio((active - joint) as f64, active),
        ),
    ))
}

pub fn evaluate(est: &TranscriptionResult, truth: &GroundTruth) -> Result<Metrics> {
    let (gain, gain_all) = mae_gain(est, truth)?;
    let (warp, (warp_all, miss_all)) = mae_warp(est, truth)?;
    let tracks = truth
        .tracks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (_, joint, active) = warp_counts(est, truth, i);
            TrackMetrics {
                track_id: t.track_id,
                gain_mae: gain[i],
                warp_mae_s: warp[i].0,
                miss_rate: warp[i].1,
                reference_active_frames: active,
                jointly_active_frames: joint,
            }
        })
        .collect();
    Ok(Metrics {
        tracks,
        gain_mae: gain_all,
        warp_mae_s: warp_all,
        miss_rate: miss_all,
    })
}

/// Writes one ground-truth track in the transcription CSV schema.
pub fn write_truth_csv(truth: &GroundTruth, idx: usize, w: impl Write) -> Result<()> {
    let t = &truth.tracks[idx];
    write_curves_csv(&t.gain, &t.warp, &truth.grid, w)
}
