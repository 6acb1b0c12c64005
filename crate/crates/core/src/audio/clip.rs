//! Fixed-contract clips and their binary file format.
//!
//! Clip file layout (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `AQCL` |
//! | 4     | version (`u32`, currently 1) |
//! | 8     | `valid_len` (`u64`) |
//! | 8     | `length` (`u64`) |
//! | 4 + n | site: `u32` byte count, then UTF-8 |
//! | 4 + n | patient id: `u32` byte count, then UTF-8 |
//! | 8 · length | samples, `f64` |

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::dsp::{resample_16k, to_mono, TARGET_RATE};
use super::wav::{load_wav, RawRecording};
use crate::error::{Error, Result};

pub const PATCH_SAMPLES: usize = 640;
pub const MAX_SECONDS: f64 = 30.0;
pub const MAX_SAMPLES: usize = 480_000;
pub const NORM_EPS: f64 = 1e-8;

const CLIP_MAGIC: &[u8; 4] = b"AQCL";
const CLIP_VERSION: u32 = 1;

/// Preprocessed 16 kHz mono waveform. Samples past `valid_len` are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub waveform: Vec<f64>,
    pub valid_len: usize,
    pub site: String,
    pub patient_id: String,
}

impl AudioClip {
    pub fn len(&self) -> usize {
        self.waveform.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waveform.is_empty()
    }

    pub fn n_patches(&self) -> usize {
        self.waveform.len() / PATCH_SAMPLES
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(CLIP_MAGIC)?;
        put(&CLIP_VERSION.to_le_bytes())?;
        put(&(self.valid_len as u64).to_le_bytes())?;
        put(&(self.waveform.len() as u64).to_le_bytes())?;
        for s in [&self.site, &self.patient_id] {
            put(&(s.len() as u32).to_le_bytes())?;
            put(s.as_bytes())?;
        }
        for v in &self.waveform {
            put(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: &str| Error::ClipFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
            Ok(buf)
        };
        if take(4)? != CLIP_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CLIP_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let valid_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let length = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if length > MAX_SAMPLES || valid_len > length {
            return Err(bad("inconsistent lengths"));
        }
        let mut text = || -> Result<String> {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            String::from_utf8(take(n)?).map_err(|_| bad("invalid utf-8"))
        };
        let site = text()?;
        let patient_id = text()?;
        let raw = take(length * 8)?;
        let waveform = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            waveform,
            valid_len,
            site,
            patient_id,
        })
    }
}

/// Truncates (keeping the head) to `max_seconds`, z-scores the retained samples,
/// then zero-pads up to the next multiple of [`PATCH_SAMPLES`].
pub fn normalize_pad(
    r: &RawRecording,
    max_seconds: f64,
    site: &str,
    patient_id: &str,
) -> Result<AudioClip> {
    if r.n_channels() != 1 || r.sample_rate != TARGET_RATE {
        return Err(Error::InvalidArgument(format!(
            "normalize_pad expects 16 kHz mono, got {} Hz x {} channels",
            r.sample_rate,
            r.n_channels()
        )));
    }
    if !(max_seconds > 0.0 && max_seconds <= MAX_SECONDS) {
        return Err(Error::InvalidArgument(format!(
            "max_seconds must be in (0, {MAX_SECONDS}], got {max_seconds}"
        )));
    }
    let x = &r.channels[0];
    if x.is_empty() {
        return Err(Error::Empty("normalize_pad signal"));
    }
    let cap = (max_seconds * f64::from(TARGET_RATE)).round() as usize;
    let valid_len = x.len().min(cap);
    let kept = &x[..valid_len];
    let n = valid_len as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + NORM_EPS;
    let padded_len = valid_len.div_ceil(PATCH_SAMPLES) * PATCH_SAMPLES;
    let mut waveform = Vec::with_capacity(padded_len);
    let constant = kept.iter().all(|&v| v == kept[0]);
    if constant {
        // mean rounding would otherwise leave ~1e-8 residue after dividing by eps
        waveform.resize(valid_len, 0.0);
    } else {
        waveform.extend(kept.iter().map(|v| (v - mean) / denom));
    }
    waveform.resize(padded_len, 0.0);
    Ok(AudioClip {
        waveform,
        valid_len,
        site: site.to_string(),
        patient_id: patient_id.to_string(),
    })
}

/// Full chain for one file: decode, average channels, resample to 16 kHz, normalise and pad.
pub fn preprocess_file(
    path: impl AsRef<Path>,
    max_seconds: f64,
    site: &str,
    patient_id: &str,
) -> Result<AudioClip> {
    let raw = load_wav(path)?;
    let mono = resample_16k(&to_mono(&raw))?;
    normalize_pad(&mono, max_seconds, site, patient_id)
}
