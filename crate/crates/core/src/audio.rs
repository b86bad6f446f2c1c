//! Mono audio buffers and WAV file I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// A mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// Reads a WAV file (16/24-bit PCM or 32-bit float), averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::InvalidInput(format!(
            "{}: zero channels",
            path.display()
        )));
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
        (format, bits) => {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported sample format {format:?}/{bits} bits",
                path.display()
            )))
        }
    };

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Loads a mix and its source tracks, requiring one shared sample rate.
pub fn load_session(
    mix: impl AsRef<Path>,
    tracks: &[impl AsRef<Path>],
) -> Result<(AudioBuffer, Vec<AudioBuffer>)> {
    let mix_path = mix.as_ref();
    let mix = read_wav(mix_path)?;
    let mut out = Vec::with_capacity(tracks.len());
    for path in tracks {
        let path = path.as_ref();
        let track = read_wav(path)?;
        if track.sample_rate != mix.sample_rate {
            return Err(Error::InvalidInput(format!(
                "sample rate mismatch: {} is {} Hz but mix {} is {} Hz",
                path.display(),
                track.sample_rate,
                mix_path.display(),
                mix.sample_rate
            )));
        }
        out.push(track);
    }
    Ok((mix, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let audio = AudioBuffer::new(vec![0.0, 0.25, -0.5, 1.0e-7, 0.999], 22050).unwrap();
        write_wav(&path, &audio).unwrap();
        assert_eq!(read_wav(&path).unwrap(), audio);
    }

    #[test]
    fn stereo_pcm16_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(16384i16, 0i16), (-32768, -32768)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let audio = read_wav(&path).unwrap();
        assert_eq!(audio.sample_rate, 8000);
        assert_eq!(audio.samples, vec![0.25, -1.0]);
    }

    #[test]
    fn pcm24_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p24.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(1i32 << 22).unwrap();
        w.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().samples, vec![0.5]);
    }

    #[test]
    fn mismatched_rates_fail() {
        let dir = tempfile::tempdir().unwrap();
        let mix = dir.path().join("mix.wav");
        let track = dir.path().join("t.wav");
        write_wav(&mix, &AudioBuffer::new(vec![0.0; 4], 22050).unwrap()).unwrap();
        write_wav(&track, &AudioBuffer::new(vec![0.0; 4], 44100).unwrap()).unwrap();
        let err = load_session(&mix, &[&track]).unwrap_err();
        assert!(err.to_string().contains("sample rate mismatch"));
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
    }
}
