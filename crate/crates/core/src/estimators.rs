//! Gain and time-warp curves read off activation blocks.
//!
//! For a track block `H` (track frames x mix frames) the gain at mix frame
//! `tau` is `sqrt(sum_t H[t, tau])` and the warp is the row of the largest
//! entry. Columns without any positive entry mark the track as inactive.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::blocksparse::{ActivationBlock, BlockKind, BlockSparseActivations};
use crate::error::{Error, Result};
use crate::spectral::{frame_to_time, SpectrogramParams, Window};

pub const CSV_HEADER: &str = "mix_time_s,gain,track_time_s";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GainCurve(pub Vec<f64>);

/// Track frame per mix frame; `None` where the track is inactive.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WarpCurve(pub Vec<Option<usize>>);

impl GainCurve {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl WarpCurve {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active_frames(&self) -> usize {
        self.0.iter().filter(|f| f.is_some()).count()
    }
}

pub fn estimate_gain(block: &ActivationBlock) -> GainCurve {
    GainCurve(
        (0..block.n_cols())
            .map(|c| block.column(c).1.iter().fold(0.0, |s, v| s + v).sqrt())
            .collect(),
    )
}

/// Row of the column maximum; the first row wins ties.
pub fn estimate_warp(block: &ActivationBlock) -> WarpCurve {
    WarpCurve(
        (0..block.n_cols())
            .map(|c| {
                let (rows, values) = block.column(c);
                let mut best: Option<(u32, f64)> = None;
                for (&r, &v) in rows.iter().zip(values) {
                    if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                        best = Some((r, v));
                    }
                }
                best.map(|(r, _)| r as usize)
            })
            .collect(),
    )
}

/// Activation block with `gain[tau]^2` at row `warp[tau]` in each active column.
pub fn ideal_activation(
    gain: &GainCurve,
    warp: &WarpCurve,
    track_frames: usize,
    row_offset: usize,
    kind: BlockKind,
) -> Result<ActivationBlock> {
    if gain.len() != warp.len() {
        return Err(Error::ShapeMismatch {
            context: "ideal_activation curves",
            expected: (gain.len(), 1),
            actual: (warp.len(), 1),
        });
    }
    let columns = gain
        .0
        .iter()
        .zip(&warp.0)
        .enumerate()
        .map(|(tau, (&g, f))| match *f {
            None => Ok(Vec::new()),
            Some(t) if t >= track_frames => Err(Error::InvalidInput(format!(
                "warp index {t} at mix frame {tau} is outside the {track_frames} track frames"
            ))),
            Some(_) if !(g >= 0.0) || !g.is_finite() => Err(Error::InvalidInput(format!(
                "gain {g} at mix frame {tau} must be finite and non-negative"
            ))),
            Some(t) => Ok(if g > 0.0 {
                vec![(t as u32, g * g)]
            } else {
                Vec::new()
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationBlock::from_columns(
        track_frames,
        row_offset,
        kind,
        columns,
    ))
}

/// Frame grid shared by the mix and all tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridInfo {
    pub hlen: usize,
    pub wlen: usize,
    pub sample_rate: u32,
    pub n_frames: usize,
}

impl GridInfo {
    pub fn params(&self) -> SpectrogramParams {
        SpectrogramParams {
            wlen: self.wlen,
            hlen: self.hlen,
            window: Window::Hann,
        }
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame_to_time(frame, &self.params(), self.sample_rate)
    }

    /// Duration of one hop in seconds.
    pub fn hop_seconds(&self) -> f64 {
        self.hlen as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackTranscription {
    pub track_id: usize,
    pub gain: GainCurve,
    pub warp: WarpCurve,
}

impl TrackTranscription {
    pub fn write_csv(&self, grid: &GridInfo, w: impl Write) -> Result<()> {
        write_curves_csv(&self.gain, &self.warp, grid, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionResult {
    pub grid: GridInfo,
    pub tracks: Vec<TrackTranscription>,
}

impl TranscriptionResult {
    pub fn track(&self, track_id: usize) -> Option<&TrackTranscription> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let result: Self = serde_json::from_str(s)?;
        for t in &result.tracks {
            if t.gain.len() != result.grid.n_frames || t.warp.len() != result.grid.n_frames {
                return Err(Error::InvalidInput(format!(
                    "track {} curves do not have the {} frames of the grid",
                    t.track_id, result.grid.n_frames
                )));
            }
        }
        Ok(result)
    }
}

/// Applies both estimators to every track block.
pub fn transcribe(h: &BlockSparseActivations, grid: GridInfo) -> Result<TranscriptionResult> {
    if h.n_cols() != grid.n_frames {
        return Err(Error::ShapeMismatch {
            context: "transcribe grid",
            expected: (grid.n_frames, 1),
            actual: (h.n_cols(), 1),
        });
    }
    let tracks = h
        .track_blocks()
        .map(|b| {
            let BlockKind::Track(track_id) = b.kind else {
                unreachable!("track_blocks yields track blocks only")
            };
            TrackTranscription {
                track_id,
                gain: estimate_gain(b),
                warp: estimate_warp(b),
            }
        })
        .collect();
    Ok(TranscriptionResult { grid, tracks })
}

fn write_columns(
    gain: Option<&GainCurve>,
    warp: Option<&WarpCurve>,
    grid: &GridInfo,
    w: impl Write,
) -> Result<()> {
    let frames = gain
        .map(GainCurve::len)
        .or(warp.map(WarpCurve::len))
        .unwrap_or(0);
    if let (Some(g), Some(f)) = (gain, warp) {
        if g.len() != f.len() {
            return Err(Error::ShapeMismatch {
                context: "curve csv",
                expected: (g.len(), 1),
                actual: (f.len(), 1),
            });
        }
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["mix_time_s"];
    if gain.is_some() {
        header.push("gain");
    }
    if warp.is_some() {
        header.push("track_time_s");
    }
    out.write_record(&header)?;
    for tau in 0..frames {
        let mut row = vec![format!("{:.6}", grid.frame_time(tau))];
        if let Some(g) = gain {
            row.push(format!("{:.9}", g.0[tau]));
        }
        if let Some(f) = warp {
            row.push(match f.0[tau] {
                Some(t) => format!("{:.6}", grid.frame_time(t)),
                None => "NA".to_string(),
            });
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per mix frame: `mix_time_s,gain,track_time_s` (`NA` when inactive).
pub fn write_curves_csv(
    gain: &GainCurve,
    warp: &WarpCurve,
    grid: &GridInfo,
    w: impl Write,
) -> Result<()> {
    write_columns(Some(gain), Some(warp), grid, w)
}

/// Gain curve alone: `mix_time_s,gain`.
pub fn write_gain_csv(gain: &GainCurve, grid: &GridInfo, w: impl Write) -> Result<()> {
    write_columns(Some(gain), None, grid, w)
}

/// Warp curve alone: `mix_time_s,track_time_s`.
pub fn write_warp_csv(warp: &WarpCurve, grid: &GridInfo, w: impl Write) -> Result<()> {
    write_columns(None, Some(warp), grid, w)
}

/// Reads curves written by [`write_curves_csv`] back onto `grid`.
///
/// Track times are mapped to the frame whose center is nearest.
pub fn read_curves_csv(r: impl Read, grid: &GridInfo) -> Result<(GainCurve, WarpCurve)> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidInput(format!(
            "unexpected csv header {:?}, expected {CSV_HEADER:?}",
            header.join(",")
        )));
    }
    let half = grid.wlen as f64 / 2.0;
    let (mut gain, mut warp) = (Vec::new(), Vec::new());
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let bad = || Error::InvalidInput(format!("malformed csv row {}: {record:?}", n + 1));
        if record.len() != 3 {
            return Err(bad());
        }
        let mix_time: f64 = record[0].trim().parse().map_err(|_| bad())?;
        if (mix_time - grid.frame_time(n)).abs() > 0.5 * grid.hop_seconds() {
            return Err(Error::InvalidInput(format!(
                "csv row {} is at {mix_time} s but grid frame {n} is at {:.6} s",
                n + 1,
                grid.frame_time(n)
            )));
        }
        gain.push(record[1].trim().parse::<f64>().map_err(|_| bad())?);
        warp.push(match record[2].trim() {
            "NA" => None,
            s => {
                let t: f64 = s.parse().map_err(|_| bad())?;
                let frame = ((t * grid.sample_rate as f64 - half) / grid.hlen as f64).round();
                if !(frame >= 0.0) {
                    return Err(bad());
                }
                Some(frame as usize)
            }
        });
    }
    if gain.len() != grid.n_frames {
        return Err(Error::InvalidInput(format!(
            "curve csv has {} rows but the grid has {} frames",
            gain.len(),
            grid.n_frames
        )));
    }
    Ok((GainCurve(gain), WarpCurve(warp)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn block(m: Array2<f64>) -> ActivationBlock {
        ActivationBlock::from_dense(m.view(), 0, BlockKind::Track(0)).unwrap()
    }

    fn grid(n_frames: usize) -> GridInfo {
        GridInfo {
            hlen: 1024,
            wlen: 8192,
            sample_rate: 44100,
            n_frames,
        }
    }

    #[test]
    fn gain_examples() {
        let b = block(array![[0.0, 0.0, 1.0], [4.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
        let g = estimate_gain(&b);
        assert_eq!(g.0[0], 2.0);
        assert_eq!(g.0[1], 0.0);
        assert!((g.0[2] - 1.732_050_8).abs() < 1e-7);
    }

    #[test]
    fn warp_examples() {
        let b = block(array![[0.1, 0.0, 2.0], [3.0, 0.0, 2.0], [0.2, 0.0, 0.0]]);
        assert_eq!(estimate_warp(&b).0, vec![Some(1), None, Some(0)]);
    }

    #[test]
    fn ideal_examples() {
        let k = 4;
        let g = GainCurve(vec![1.0; k]);
        let f = WarpCurve((0..k).map(Some).collect());
        let b = ideal_activation(&g, &f, k, 0, BlockKind::Track(0)).unwrap();
        assert_eq!(b.to_dense(), Array2::<f64>::eye(k));

        let b = ideal_activation(
            &GainCurve(vec![2.0]),
            &WarpCurve(vec![Some(3)]),
            5,
            0,
            BlockKind::Track(0),
        )
        .unwrap();
        assert_eq!(b.nnz(), 1);
        assert_eq!(b.column(0), (&[3u32][..], &[4.0][..]));

        let err = ideal_activation(
            &GainCurve(vec![1.0]),
            &WarpCurve(vec![Some(5)]),
            5,
            0,
            BlockKind::Track(0),
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn transcribe_skips_noise_and_handles_empty() {
        let t = array![[0.0, 1.0], [9.0, 0.0]];
        let n = array![[5.0, 5.0]];
        let h = BlockSparseActivations::from_dense_blocks(&[
            (BlockKind::Track(0), t.view()),
            (BlockKind::Noise, n.view()),
        ])
        .unwrap();
        let r = transcribe(&h, grid(2)).unwrap();
        assert_eq!(r.tracks.len(), 1);
        assert_eq!(r.tracks[0].gain.0, vec![3.0, 1.0]);
        assert_eq!(r.tracks[0].warp.0, vec![Some(1), Some(0)]);

        let z = Array2::<f64>::zeros((3, 2));
        let h =
            BlockSparseActivations::from_dense_blocks(&[(BlockKind::Track(0), z.view())]).unwrap();
        let r = transcribe(&h, grid(2)).unwrap();
        assert_eq!(r.tracks[0].gain.0, vec![0.0, 0.0]);
        assert_eq!(r.tracks[0].warp.0, vec![None, None]);
        assert!(transcribe(&h, grid(3)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = grid(4);
        let gain = GainCurve(vec![0.5, 1.0, 0.0, 0.25]);
        let warp = WarpCurve(vec![Some(0), Some(7), None, Some(123)]);
        let mut buf = Vec::new();
        write_curves_csv(&gain, &warp, &g, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("mix_time_s,gain,track_time_s\n"));
        assert!(text.lines().nth(3).unwrap().ends_with(",NA"));
        let (g2, w2) = read_curves_csv(&buf[..], &g).unwrap();
        assert_eq!(w2, warp);
        for (a, b) in g2.0.iter().zip(&gain.0) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(read_curves_csv(&buf[..], &grid(5)).is_err());
        assert!(read_curves_csv(&b"a,b,c\n"[..], &g).is_err());
        let mut only = Vec::new();
        write_gain_csv(&gain, &g, &mut only).unwrap();
        let text = String::from_utf8(only).unwrap();
        assert_eq!(text.lines().next(), Some("mix_time_s,gain"));
        assert_eq!(text.lines().count(), 5);
        let mut only = Vec::new();
        write_warp_csv(&warp, &g, &mut only).unwrap();
        let text = String::from_utf8(only).unwrap();
        assert_eq!(text.lines().next(), Some("mix_time_s,track_time_s"));
        assert!(text.lines().nth(3).unwrap().ends_with(",NA"));
        let mut other = g;
        other.hlen = 2048;
        assert!(read_curves_csv(&buf[..], &other).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = TranscriptionResult {
            grid: grid(2),
            tracks: vec![TrackTranscription {
                track_id: 0,
                gain: GainCurve(vec![1.0, 0.0]),
                warp: WarpCurve(vec![Some(3), None]),
            }],
        };
        let s = r.to_json().unwrap();
        assert!(s.contains("\"sample_rate\""));
        assert!(s.contains("null"));
        assert_eq!(TranscriptionResult::from_json(&s).unwrap(), r);
    }

    fn curves(k: usize, t: usize) -> impl Strategy<Value = (Vec<f64>, Vec<Option<usize>>)> {
        (
            prop::collection::vec(0.01f64..10.0, k),
            prop::collection::vec(prop::option::weighted(0.8, 0..t), k),
        )
    }

    proptest! {
        #[test]
        fn ideal_round_trip((g, f) in curves(24, 40)) {
            let gain = GainCurve(g);
            let warp = WarpCurve(f);
            let b = ideal_activation(&gain, &warp, 40, 0, BlockKind::Track(0)).unwrap();
            let ge = estimate_gain(&b);
            prop_assert_eq!(&estimate_warp(&b), &warp);
            for (tau, w) in warp.0.iter().enumerate() {
                if w.is_some() {
                    prop_assert!((ge.0[tau] - gain.0[tau]).abs() <= 1e-12 * gain.0[tau]);
                } else {
                    prop_assert_eq!(ge.0[tau], 0.0);
                }
            }
        }

        #[test]
        fn scale_covariance(
            vals in prop::collection::vec(0.0f64..5.0, 30),
            c in 0.1f64..10.0,
        ) {
            let m = Array2::from_shape_vec((5, 6), vals).unwrap();
            let scaled = m.mapv(|v| v * c * c);
            let (b, bs) = (block(m), block(scaled));
            prop_assert_eq!(estimate_warp(&b), estimate_warp(&bs));
            for (x, y) in estimate_gain(&b).0.iter().zip(estimate_gain(&bs).0) {
                prop_assert!((y - c * x).abs() <= 1e-12 * (1.0 + y));
            }
        }
    }
}
