//! RIFF/WAVE ingestion (PCM-16 and IEEE float32) on top of `hound`.

use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const MIN_RATE: u32 = 4_000;
pub const MAX_RATE: u32 = 48_000;

/// Decoded recording, one sample vector per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
    pub source_path: PathBuf,
}

impl RawRecording {
    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            channels: vec![samples],
            sample_rate,
            source_path: PathBuf::new(),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Frames per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn wav_err(path: &Path, reason: impl ToString) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads a WAV file. PCM-16 samples are scaled by 1/32768 into [-1, 1).
pub fn load_wav(path: impl AsRef<Path>) -> Result<RawRecording> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if !(MIN_RATE..=MAX_RATE).contains(&spec.sample_rate) {
        return Err(wav_err(
            path,
            format!("sample rate {} outside [{MIN_RATE}, {MAX_RATE}]", spec.sample_rate),
        ));
    }
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(wav_err(path, "zero channels"));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(wav_err(
                path,
                format!("unsupported codec {fmt:?} {bits}-bit; expected PCM-16 or float32"),
            ))
        }
    };
    if interleaved.is_empty() {
        return Err(wav_err(path, "zero-length payload"));
    }
    if interleaved.len() % n_ch != 0 {
        return Err(wav_err(path, "truncated frame"));
    }
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks(n_ch) {
        for (c, &v) in frame.iter().enumerate() {
            channels[c].push(v);
        }
    }
    Ok(RawRecording {
        channels,
        sample_rate: spec.sample_rate,
        source_path: path.to_path_buf(),
    })
}

/// Writes mono PCM-16. Samples are clamped to [-1, 1] and rounded.
pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

/// Writes interleaved float32 frames.
pub fn write_wav_f32(path: impl AsRef<Path>, channels: &[Vec<f32>], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    let frames = channels.first().map_or(0, Vec::len);
    for i in 0..frames {
        for ch in channels {
            w.write_sample(ch[i]).map_err(|e| wav_err(path, e))?;
        }
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pcm16_stereo(path: &Path, frames: usize, rate: u32) {
        let spec = WavSpec {
            channels: 2,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for i in 0..frames {
            w.write_sample((i % 100) as i16).unwrap();
            w.write_sample(-((i % 100) as i16)).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn stereo_pcm16_header_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_pcm16_stereo(&p, 44_100, 44_100);
        let r = load_wav(&p).unwrap();
        assert_eq!(r.n_channels(), 2);
        assert_eq!(r.len(), 44_100);
        assert_eq!(r.sample_rate, 44_100);
        assert_eq!(r.channels[0][5], 5.0 / 32768.0);
        assert_eq!(r.channels[1][5], -5.0 / 32768.0);
    }

    #[test]
    fn truncated_file_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_pcm16_stereo(&p, 1000, 8000);
        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.path().join("cut.wav");
        std::fs::write(&cut, &bytes[..bytes.len() - 1001]).unwrap();
        assert!(matches!(load_wav(&cut), Err(Error::Wav { .. })));
        let header_only = dir.path().join("hdr.wav");
        std::fs::write(&header_only, &bytes[..20]).unwrap();
        assert!(matches!(load_wav(&header_only), Err(Error::Wav { .. })));
    }

    #[test]
    fn float32_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let vals: Vec<f32> = (0..500).map(|i| ((i as f32) * 0.37).sin() * 0.9).collect();
        write_wav_f32(&p, &[vals.clone()], 16_000).unwrap();
        let r = load_wav(&p).unwrap();
        let back: Vec<f32> = r.channels[0].iter().map(|&v| v as f32).collect();
        assert_eq!(back, vals);
    }

    #[test]
    fn empty_payload_and_bad_rate_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.wav");
        write_wav_pcm16(&p, &[], 16_000).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Wav { .. })));
        let q = dir.path().join("r.wav");
        write_wav_pcm16(&q, &[0.1; 10], 2_000).unwrap();
        assert!(matches!(load_wav(&q), Err(Error::Wav { .. })));
    }

    #[test]
    fn unsupported_codec() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u8.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        let err = load_wav(&p).unwrap_err();
        assert!(err.to_string().contains("unsupported codec"), "{err}");
    }
}
