//! Channel averaging and band-limited polyphase resampling.

use super::wav::RawRecording;
use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 16_000;

/// Taps per polyphase branch.
pub const TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;

/// Averages all channels into one.
pub fn to_mono(r: &RawRecording) -> RawRecording {
    if r.n_channels() == 1 {
        return r.clone();
    }
    let n = r.n_channels() as f64;
    let mono = (0..r.len())
        .map(|i| r.channels.iter().map(|c| c[i]).sum::<f64>() / n)
        .collect();
    RawRecording {
        channels: vec![mono],
        sample_rate: r.sample_rate,
        source_path: r.source_path.clone(),
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase bank for resampling by `up/down`. Branch `phase` holds the taps
/// for fractional input offset `phase/up`.
struct PolyphaseBank {
    up: u64,
    down: u64,
    branches: Vec<[f64; TAPS]>,
}

impl PolyphaseBank {
    fn new(in_rate: u32, out_rate: u32) -> Self {
        let g = gcd(u64::from(in_rate), u64::from(out_rate));
        let up = u64::from(out_rate) / g;
        let down = u64::from(in_rate) / g;
        // cutoff relative to the input Nyquist; below 1 when decimating
        let cutoff = (out_rate as f64 / in_rate as f64).min(1.0);
        let half = (TAPS / 2) as f64;
        let i0b = bessel_i0(KAISER_BETA);
        let branches = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                let mut taps = [0.0; TAPS];
                for (k, tap) in taps.iter_mut().enumerate() {
                    // input index offset relative to floor(t): k - (TAPS/2 - 1)
                    let dist = frac - (k as f64 - (half - 1.0));
                    let u = dist / half;
                    let w = if u.abs() >= 1.0 {
                        0.0
                    } else {
                        bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0b
                    };
                    *tap = cutoff * sinc(cutoff * dist) * w;
                }
                let s: f64 = taps.iter().sum();
                for t in &mut taps {
                    *t /= s;
                }
                taps
            })
            .collect();
        Self { up, down, branches }
    }

    fn apply(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let n_in = x.len() as i64;
        let offset = TAPS as i64 / 2 - 1;
        (0..out_len as u64)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as i64;
                let taps = &self.branches[(pos % self.up) as usize];
                let start = base - offset;
                let mut acc = 0.0;
                for (k, &h) in taps.iter().enumerate() {
                    let j = start + k as i64;
                    if (0..n_in).contains(&j) {
                        acc += h * x[j as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Resamples `x` from `in_rate` to `out_rate` with a Kaiser-windowed sinc
/// polyphase filter. Output length is `round(len * out_rate / in_rate)`.
/// Equal rates return the input unchanged.
pub fn resample(x: &[f64], in_rate: u32, out_rate: u32) -> Result<Vec<f64>> {
    if in_rate == 0 || out_rate == 0 {
        return Err(Error::InvalidArgument(format!(
            "sample rates must be positive (got {in_rate} -> {out_rate})"
        )));
    }
    if in_rate == out_rate {
        return Ok(x.to_vec());
    }
    let out_len = ((x.len() as u128 * u128::from(out_rate) * 2 + u128::from(in_rate)) / (2 * u128::from(in_rate))) as usize;
    Ok(PolyphaseBank::new(in_rate, out_rate).apply(x, out_len))
}

/// Resamples a mono recording to 16 kHz.
pub fn resample_16k(r: &RawRecording) -> Result<RawRecording> {
    if r.n_channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "resample_16k expects mono input, got {} channels",
            r.n_channels()
        )));
    }
    Ok(RawRecording {
        channels: vec![resample(&r.channels[0], r.sample_rate, TARGET_RATE)?],
        sample_rate: TARGET_RATE,
        source_path: r.source_path.clone(),
    })
}
