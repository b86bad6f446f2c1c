//! Power spectrograms on a parameterized frame grid.
//!
//! Frames are taken without padding: frame `n` covers samples
//! `[n * hlen, n * hlen + wlen)` and a trailing partial window is dropped.
//! Only the one-sided spectrum (`wlen / 2 + 1` bins) is kept.

use std::f64::consts::PI;

use ndarray::{Array2, ShapeBuilder};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann window.
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrogramParams {
    pub wlen: usize,
    pub hlen: usize,
    #[serde(default)]
    pub window: Window,
}

impl SpectrogramParams {
    pub fn new(wlen: usize, hlen: usize, window: Window) -> Result<Self> {
        let params = Self { wlen, hlen, window };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hlen == 0 || self.wlen == 0 {
            return Err(Error::InvalidParams(format!(
                "wlen and hlen must be positive (wlen={}, hlen={})",
                self.wlen, self.hlen
            )));
        }
        if self.hlen > self.wlen {
            return Err(Error::InvalidParams(format!(
                "hop {} exceeds window length {}",
                self.hlen, self.wlen
            )));
        }
        if !self.wlen.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!(
                "window length {} must be even",
                self.wlen
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.wlen / 2 + 1
    }
}

/// Number of complete frames in a signal of `signal_len` samples.
pub fn frame_count(signal_len: usize, params: &SpectrogramParams) -> Result<usize> {
    params.validate()?;
    if signal_len < params.wlen {
        return Err(Error::InvalidInput(format!(
            "signal of {signal_len} samples is shorter than one window ({} samples)",
            params.wlen
        )));
    }
    Ok(1 + (signal_len - params.wlen) / params.hlen)
}

/// Time in seconds of the center of frame `frame_index`.
pub fn frame_to_time(frame_index: usize, params: &SpectrogramParams, sample_rate: u32) -> f64 {
    (frame_index * params.hlen + params.wlen / 2) as f64 / sample_rate as f64
}

/// Non-negative `bins x frames` power spectrogram.
///
/// `data` is stored column-major so every frame is contiguous.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub data: Array2<f64>,
    pub params: SpectrogramParams,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Squared magnitude of the windowed one-sided STFT.
pub fn stft_power(audio: &AudioBuffer, params: &SpectrogramParams) -> Result<Spectrogram> {
    let n_frames = frame_count(audio.len(), params)?;
    let wlen = params.wlen;
    let n_bins = params.n_bins();
    let window = params.window.coefficients(wlen);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(wlen);

    let columns: Vec<Vec<f64>> = (0..n_frames)
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![Complex::default(); wlen],
                    vec![Complex::default(); fft.get_inplace_scratch_len()],
                )
            },
            |(buf, scratch), n| {
                let frame = &audio.samples[n * params.hlen..n * params.hlen + wlen];
                for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
                    *b = Complex::new(x as f64 * w, 0.0);
                }
                fft.process_with_scratch(buf, scratch);
                buf[..n_bins].iter().map(|c| c.norm_sqr()).collect()
            },
        )
        .collect();

    let mut data = Array2::zeros((n_bins, n_frames).f());
    for (n, col) in columns.iter().enumerate() {
        data.column_mut(n)
            .iter_mut()
            .zip(col)
            .for_each(|(d, &v)| *d = v);
    }
    Ok(Spectrogram {
        data,
        params: *params,
        sample_rate: audio.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(wlen: usize, hlen: usize, window: Window) -> SpectrogramParams {
        SpectrogramParams::new(wlen, hlen, window).unwrap()
    }

    /// Direct O(N^2) DFT of a single windowed frame.
    fn dft_power(frame: &[f64], window: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|m| {
                let (mut re, mut im) = (0.0, 0.0);
                for k in 0..n {
                    let phi = -2.0 * PI * (k * m) as f64 / n as f64;
                    re += frame[k] * window[k] * phi.cos();
                    im += frame[k] * window[k] * phi.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn frame_count_examples() {
        let p = params(1024, 256, Window::Hann);
        assert_eq!(frame_count(1024, &p).unwrap(), 1);
        assert_eq!(frame_count(2048, &p).unwrap(), 5);
        assert_eq!(frame_count(2047, &p).unwrap(), 4);
        assert!(matches!(frame_count(1023, &p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn frame_to_time_examples() {
        let p = params(1024, 256, Window::Hann);
        assert_relative_eq!(frame_to_time(0, &p, 44100), 512.0 / 44100.0);
        assert_relative_eq!(frame_to_time(4, &p, 44100), 1536.0 / 44100.0);
        assert_relative_eq!(frame_to_time(4, &p, 44100), 0.034_829, epsilon = 1e-5);
        assert_eq!(frame_to_time(0, &params(2, 1, Window::Hann), 1), 1.0);
    }

    #[test]
    fn params_validation() {
        assert!(matches!(
            SpectrogramParams::new(256, 512, Window::Hann),
            Err(Error::InvalidParams(_))
        ));
        assert!(SpectrogramParams::new(255, 64, Window::Hann).is_err());
        assert!(SpectrogramParams::new(256, 0, Window::Hann).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let audio = AudioBuffer::new(vec![0.0; 4096], 44100).unwrap();
        let s = stft_power(&audio, &params(1024, 256, Window::Hann)).unwrap();
        assert_eq!(s.n_bins(), 513);
        assert_eq!(s.n_frames(), 13);
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_at_bin_eight() {
        let wlen = 64;
        let samples = (0..wlen)
            .map(|k| (2.0 * PI * 8.0 * k as f64 / wlen as f64).cos() as f32)
            .collect();
        let audio = AudioBuffer::new(samples, 8000).unwrap();
        let s = stft_power(&audio, &params(wlen, 16, Window::Rectangular)).unwrap();
        let col = s.data.column(0);
        let expected = (wlen as f64 / 2.0).powi(2);
        assert_relative_eq!(col[8], expected, max_relative = 1e-6);
        assert_relative_eq!(col[8], 1024.0, max_relative = 1e-6);
        for (m, &v) in col.iter().enumerate() {
            if m != 8 {
                assert!(v < 1e-6, "bin {m} has {v}");
            }
        }
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let audio = AudioBuffer::new(vec![1.0; 64], 8000).unwrap();
        let s = stft_power(&audio, &params(64, 32, Window::Rectangular)).unwrap();
        let col = s.data.column(0);
        assert_relative_eq!(col[0], 4096.0, max_relative = 1e-12);
        assert!(col.iter().skip(1).all(|&v| v < 1e-18));
    }

    #[test]
    fn matches_direct_dft() {
        let samples: Vec<f32> = (0..200)
            .map(|k| ((k * 37 % 101) as f32 / 50.0) - 1.0)
            .collect();
        let audio = AudioBuffer::new(samples.clone(), 8000).unwrap();
        let p = params(64, 24, Window::Hann);
        let s = stft_power(&audio, &p).unwrap();
        let window = Window::Hann.coefficients(64);
        for n in 0..s.n_frames() {
            let frame: Vec<f64> = samples[n * 24..n * 24 + 64]
                .iter()
                .map(|&x| x as f64)
                .collect();
            let oracle = dft_power(&frame, &window);
            for (m, &o) in oracle.iter().enumerate() {
                assert_relative_eq!(s.data[[m, n]], o, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn data_is_column_major() {
        let audio = AudioBuffer::new(vec![0.5; 300], 8000).unwrap();
        let s = stft_power(&audio, &params(64, 32, Window::Hann)).unwrap();
        assert!(s.data.column(2).as_slice().is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn power_is_nonnegative_and_scales_quadratically(
            samples in prop::collection::vec(-1.0f32..1.0, 128..400),
            c in 0.0f32..4.0,
            hlen in 1usize..64,
        ) {
            let p = params(64, hlen, Window::Hann);
            let audio = AudioBuffer::new(samples.clone(), 8000).unwrap();
            let scaled = AudioBuffer::new(samples.iter().map(|s| s * c).collect(), 8000).unwrap();
            let a = stft_power(&audio, &p).unwrap();
            let b = stft_power(&scaled, &p).unwrap();
            prop_assert_eq!(a.n_frames(), frame_count(samples.len(), &p).unwrap());
            prop_assert!(a.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
            let peak = a.data.iter().cloned().fold(0.0, f64::max);
            let c2 = (c as f64).powi(2);
            for (&x, &y) in a.data.iter().zip(b.data.iter()) {
                prop_assert!((y - c2 * x).abs() <= 1e-6 * c2 * peak.max(x) + 1e-12);
            }
        }
    }
}
