use std::f64::consts::PI;

use rand::Rng;

use super::mel::{hz_to_mel, mel_to_hz};
use super::{EncoderConfig, RawInit, TokenSequence};
use crate::audio::{AudioClip, TARGET_RATE};
use crate::error::{Error, Result};
use crate::numeric::{GroupId, ParamId, ParamStore, Tape, Tensor};

/// Unit-norm Hann-windowed cosine/sine pairs at `ceil(d/2)` mel-spaced
/// frequencies in `hz`, for a 16 kHz patch of `p` samples. Row `2i` is the
/// cosine and row `2i + 1` the sine of frequency `i`.
pub fn filterbank_kernel(d: usize, p: usize, hz: (f64, f64)) -> Result<Tensor> {
    let nyquist = f64::from(TARGET_RATE) / 2.0;
    if !(hz.0 >= 0.0 && hz.0 < hz.1 && hz.1 <= nyquist) {
        return Err(Error::Config(format!("filterbank range {hz:?} must lie in [0, {nyquist}]")));
    }
    let n_freq = d.div_ceil(2);
    let (lo, hi) = (hz_to_mel(hz.0), hz_to_mel(hz.1));
    let mut data = Vec::with_capacity(d * p);
    for r in 0..d {
        let i = r / 2;
        let frac = if n_freq > 1 { i as f64 / (n_freq - 1) as f64 } else { 0.5 };
        let f = mel_to_hz(lo + (hi - lo) * frac);
        let row: Vec<f64> = (0..p)
            .map(|t| {
                let w = 0.5 - 0.5 * (2.0 * PI * (t as f64 + 0.5) / p as f64).cos();
                let ph = 2.0 * PI * f * t as f64 / f64::from(TARGET_RATE);
                w * if r % 2 == 0 { ph.cos() } else { ph.sin() }
            })
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        data.extend(row.into_iter().map(|v| v / norm));
    }
    Tensor::new(vec![d, p], data)
}

/// `e_n = W_patch · x[nP..(n+1)P] + p_n`, no bias.
#[derive(Clone, Debug)]
pub struct RawTokenizer {
    /// `[d_embed, patch_samples]`
    pub kernel: ParamId,
    /// `[max_positions, d_embed]`, indexed per clip from 0.
    pub positions: ParamId,
    pub patch_samples: usize,
}

impl RawTokenizer {
    pub fn new<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        store: &mut ParamStore,
        group: GroupId,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.patch_samples == 0 {
            return Err(Error::Config("patch_samples must be positive".into()));
        }
        let init = match cfg.raw_init {
            RawInit::Random => {
                let std = (1.0 / cfg.patch_samples as f64).sqrt();
                Tensor::randn(&[cfg.d_embed, cfg.patch_samples], std, rng)
            }
            RawInit::Filterbank => filterbank_kernel(cfg.d_embed, cfg.patch_samples, cfg.filterbank_hz)?,
        };
        let kernel = store.add("encoder.raw.kernel", init, group);
        let positions = store.add(
            "encoder.raw.positions",
            Tensor::randn(&[cfg.max_positions, cfg.d_embed], 0.02, rng),
            group,
        );
        Ok(Self {
            kernel,
            positions,
            patch_samples: cfg.patch_samples,
        })
    }

    pub fn tokenize(&self, tape: &mut Tape, store: &ParamStore, clip: &AudioClip) -> Result<TokenSequence> {
        let p = self.patch_samples;
        if clip.len() % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "clip length {} is not a multiple of the patch size {p}",
                clip.len()
            )));
        }
        let n = clip.len() / p;
        let table = store.get(self.positions).rows();
        if n > table {
            return Err(Error::InvalidArgument(format!(
                "clip has {n} patches but the positional table holds {table}"
            )));
        }
        let x = tape.constant(Tensor::new(vec![clip.len()], clip.waveform.clone())?);
        let k = tape.param(store, self.kernel);
        let e = tape.conv1d_nonoverlap(x, k, p)?;
        let pos_table = tape.param(store, self.positions);
        let idx: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(pos_table, &idx)?;
        let tokens = tape.add(e, pos)?;
        // a patch is valid when at least one real sample falls inside it
        let n_valid = clip.valid_len.div_ceil(p);
        Ok(TokenSequence {
            tokens,
            mask: TokenSequence::prefix_mask(n, n_valid),
            site: clip.site.clone(),
            n_valid,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn filterbank_rows_are_unit_tones() {
        let k = filterbank_kernel(16, 640, (20.0, 2000.0)).unwrap();
        assert_eq!(k.shape(), &[16, 640]);
        for r in 0..16 {
            let n: f64 = k.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let lo = hz_to_mel(20.0);
        let f = mel_to_hz(lo + (hz_to_mel(2000.0) - lo) * 5.0 / 7.0);
        let tone: Vec<f64> = (0..640).map(|t| (2.0 * PI * f * t as f64 / 16_000.0 + 0.3).sin()).collect();
        let energy: Vec<f64> = (0..8)
            .map(|i| {
                let dot = |r: usize| k.row(r).iter().zip(&tone).map(|(a, b)| a * b).sum::<f64>();
                dot(2 * i).powi(2) + dot(2 * i + 1).powi(2)
            })
            .collect();
        let best = (0..8).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
        assert_eq!(best, 5, "{energy:?}");
        assert!(filterbank_kernel(16, 640, (100.0, 9000.0)).is_err());
        assert!(filterbank_kernel(16, 640, (500.0, 400.0)).is_err());
    }

    fn setup() -> (ParamStore, RawTokenizer) {
        let mut store = ParamStore::new();
        let g = store.group("encoder", 5e-6, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tok = RawTokenizer::new(&EncoderConfig::default(), &mut store, g, &mut rng).unwrap();
        (store, tok)
    }

    fn clip(len: usize, valid: usize) -> AudioClip {
        AudioClip {
            waveform: (0..len).map(|i| if i < valid { (i as f64).sin() } else { 0.0 }).collect(),
            valid_len: valid,
            site: "AV".into(),
            patient_id: "p".into(),
        }
    }

    #[test]
    fn thirty_seconds_is_750_tokens() {
        let (store, tok) = setup();
        let mut tape = Tape::new();
        let s = tok.tokenize(&mut tape, &store, &clip(480_000, 480_000)).unwrap();
        assert_eq!(tape.shape(s.tokens), &[750, 64]);
        assert_eq!(s.n_valid, 750);
        assert!(s.mask.iter().all(|&m| m));
    }

    #[test]
    fn short_clip_mask() {
        let (store, tok) = setup();
        let mut tape = Tape::new();
        let s = tok.tokenize(&mut tape, &store, &clip(16_640, 16_160)).unwrap();
        assert_eq!(s.len(), 26);
        // 16_160 / 640 = 25.25 -> the 26th patch still holds real samples
        assert_eq!(s.n_valid, 26);
        let s = tok.tokenize(&mut tape, &store, &clip(16_640, 15_360)).unwrap();
        assert_eq!(s.n_valid, 24);
        assert!(!s.mask[24] && !s.mask[25] && s.mask[23]);
    }

    #[test]
    fn zero_waveform_and_zero_positions_give_zero_tokens() {
        let (mut store, tok) = setup();
        *store.get_mut(tok.positions) = Tensor::zeros(&[750, 64]);
        let mut tape = Tape::new();
        let s = tok.tokenize(&mut tape, &store, &clip(6400, 0)).unwrap();
        assert!(tape.value(s.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn over_long_clip_is_rejected() {
        let (store, tok) = setup();
        let mut tape = Tape::new();
        assert!(tok.tokenize(&mut tape, &store, &clip(480_640, 480_640)).is_err());
        assert!(tok.tokenize(&mut tape, &store, &clip(1000, 1000)).is_err());
    }
}
