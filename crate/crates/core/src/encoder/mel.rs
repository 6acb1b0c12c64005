//! Log-mel spectrogram plus the 2-D CNN front-end.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, TokenSequence};
use crate::audio::{AudioClip, TARGET_RATE};
use crate::error::{Error, Result};
use crate::numeric::{GroupId, ParamId, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub n_mels: usize,
    pub win: usize,
    pub hop: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            win: 400,
            hop: 160,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK filters, `[n_mels][win/2 + 1]`, peak value 1.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = cfg.win / 2 + 1;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / cfg.win as f64;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Number of STFT frames without centring.
pub fn n_frames(len: usize, cfg: &MelConfig) -> usize {
    if len < cfg.win {
        0
    } else {
        (len - cfg.win) / cfg.hop + 1
    }
}

/// `ln(max(mel power, log_floor))` as a `[frames, n_mels]` tensor. Periodic Hann window.
pub fn log_mel_spectrogram(x: &[f64], cfg: &MelConfig) -> Result<Tensor> {
    if cfg.win == 0 || cfg.hop == 0 || cfg.n_mels == 0 {
        return Err(Error::Config("mel win, hop and n_mels must be positive".into()));
    }
    if x.len() < cfg.win {
        return Err(Error::InvalidArgument(format!(
            "signal of {} samples is shorter than one {}-sample window",
            x.len(),
            cfg.win
        )));
    }
    let frames = n_frames(x.len(), cfg);
    let window: Vec<f64> = (0..cfg.win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg, f64::from(TARGET_RATE));
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.win);
    let n_bins = cfg.win / 2 + 1;
    let floor_ln = cfg.log_floor.ln();
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.win];
    let mut power = vec![0.0; n_bins];
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let seg = &x[t * cfg.hop..t * cfg.hop + cfg.win];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(if e > cfg.log_floor { e.ln() } else { floor_ln });
        }
    }
    Tensor::new(vec![frames, cfg.n_mels], out)
}

/// `e_n = AvgPool_freq(CNN(S))_n + p_n`: two "same"-padded stride-2 conv
/// stages with GELU, then mean over the frequency axis.
#[derive(Clone, Debug)]
pub struct MelTokenizer {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub positions: ParamId,
    pub mel: MelConfig,
    pub stride: usize,
}

impl MelTokenizer {
    pub fn new<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        store: &mut ParamStore,
        group: GroupId,
        rng: &mut R,
    ) -> Result<Self> {
        let c = &cfg.cnn;
        if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
            return Err(Error::Config("cnn channels, kernel and stride must be positive".into()));
        }
        let k2 = c.kernel * c.kernel;
        let w1 = Tensor::randn(&[c.channels, 1, c.kernel, c.kernel], (1.0 / k2 as f64).sqrt(), rng);
        let w2 = Tensor::randn(
            &[cfg.d_embed, c.channels, c.kernel, c.kernel],
            (1.0 / (k2 * c.channels) as f64).sqrt(),
            rng,
        );
        Ok(Self {
            conv1: (
                store.add("encoder.mel.conv1.kernel", w1, group),
                store.add("encoder.mel.conv1.bias", Tensor::zeros(&[c.channels]), group),
            ),
            conv2: (
                store.add("encoder.mel.conv2.kernel", w2, group),
                store.add("encoder.mel.conv2.bias", Tensor::zeros(&[cfg.d_embed]), group),
            ),
            positions: store.add(
                "encoder.mel.positions",
                Tensor::randn(&[cfg.max_positions, cfg.d_embed], 0.02, rng),
                group,
            ),
            mel: cfg.mel.clone(),
            stride: c.stride,
        })
    }

    /// Token count for `len` samples: frames divided by `stride²`, rounded up.
    pub fn n_tokens(&self, len: usize) -> usize {
        n_frames(len, &self.mel).div_ceil(self.stride).div_ceil(self.stride)
    }

    pub fn tokenize(&self, tape: &mut Tape, store: &ParamStore, clip: &AudioClip) -> Result<TokenSequence> {
        let spec = log_mel_spectrogram(&clip.waveform, &self.mel)?;
        let (frames, n_mels) = (spec.rows(), spec.cols());
        let n = self.n_tokens(clip.len());
        let table = store.get(self.positions).rows();
        if n > table {
            return Err(Error::InvalidArgument(format!(
                "clip has {n} mel tokens but the positional table holds {table}"
            )));
        }
        let x = tape.constant(spec.reshape(vec![1, frames, n_mels])?);
        let mut h = x;
        for (k, b) in [self.conv1, self.conv2] {
            let k = tape.param(store, k);
            let b = tape.param(store, b);
            h = tape.conv2d(h, k, b, self.stride)?;
            h = tape.gelu(h)?;
        }
        // [d_embed, T, F] -> [d_embed, T] -> [T, d_embed]
        let pooled = tape.mean_last(h)?;
        let e = tape.transpose(pooled)?;
        let pos_table = tape.param(store, self.positions);
        let idx: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(pos_table, &idx)?;
        let tokens = tape.add(e, pos)?;
        // token t starts at sample t·stride²·hop
        let span = self.stride * self.stride * self.mel.hop;
        let n_valid = clip.valid_len.div_ceil(span).min(n);
        Ok(TokenSequence {
            tokens,
            mask: TokenSequence::prefix_mask(n, n_valid),
            site: clip.site.clone(),
            n_valid,
        })
    }
}
