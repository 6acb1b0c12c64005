//! Acoustic front-ends: turn an [`AudioClip`] into projected token sequences.
//!
//! Three token sources share one projection MLP (`GELU(LayerNorm(e) W + b)`):
//!
//! * [`RawTokenizer`]: non-overlapping 40 ms patches through a linear kernel
//!   plus a learned per-clip positional table;
//! * [`MelTokenizer`]: log-mel spectrogram, two stride-2 3x3 conv stages,
//!   frequency average pooling, learned positions;
//! * [`EmbeddingStore`]: precomputed embeddings from an external encoder.

pub mod external;
pub mod mel;
pub mod projection;
pub mod raw;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use external::EmbeddingStore;
pub use mel::{log_mel_spectrogram, MelConfig, MelTokenizer};
pub use projection::Projection;
pub use raw::RawTokenizer;

use crate::audio::{AudioClip, PATCH_SAMPLES};
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tape, Tensor, Var};

pub const ENCODER_GROUP: &str = "encoder";
/// Learning rate of the encoder group.
pub const ENCODER_LR: f64 = 5e-6;
/// Positional table size: 30 s of 40 ms tokens.
pub const MAX_POSITIONS: usize = 750;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Raw,
    Mel,
    External,
}

/// Initial patch kernel of the raw tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawInit {
    /// Gaussian rows with std `1/√P`.
    Random,
    /// Windowed sinusoids, see [`raw::filterbank_kernel`].
    Filterbank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            kernel: 3,
            stride: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_embed: usize,
    pub d_proj: usize,
    pub patch_samples: usize,
    pub max_positions: usize,
    pub raw_init: RawInit,
    /// Frequency range of the filterbank initialisation.
    pub filterbank_hz: (f64, f64),
    pub mel: MelConfig,
    pub cnn: CnnConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Raw,
            d_embed: 64,
            d_proj: 128,
            patch_samples: PATCH_SAMPLES,
            max_positions: MAX_POSITIONS,
            raw_init: RawInit::Filterbank,
            filterbank_hz: (20.0, 2000.0),
            mel: MelConfig::default(),
            cnn: CnnConfig::default(),
        }
    }
}

/// Tokens of one clip, recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[N, width]`
    pub tokens: Var,
    /// `true` for tokens that overlap real (pre-padding) samples.
    pub mask: Vec<bool>,
    pub site: String,
    pub n_valid: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub(crate) fn prefix_mask(n: usize, n_valid: usize) -> Vec<bool> {
        (0..n).map(|i| i < n_valid).collect()
    }
}

/// Token source plus the shared projection. All parameters are registered in
/// the `encoder` group.
#[derive(Clone, Debug)]
pub struct AcousticEncoder {
    pub config: EncoderConfig,
    pub raw: Option<RawTokenizer>,
    pub mel: Option<MelTokenizer>,
    pub projection: Projection,
}

impl AcousticEncoder {
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if config.d_embed == 0 || config.d_proj == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let group = store.group(ENCODER_GROUP, lr, false);
        let raw = (config.kind == EncoderKind::Raw)
            .then(|| RawTokenizer::new(&config, store, group, rng))
            .transpose()?;
        let mel = (config.kind == EncoderKind::Mel)
            .then(|| MelTokenizer::new(&config, store, group, rng))
            .transpose()?;
        let projection = Projection::new(store, group, config.d_embed, config.d_proj, rng);
        Ok(Self {
            config,
            raw,
            mel,
            projection,
        })
    }

    /// Unprojected tokens `e_n` for a clip.
    pub fn tokenize(&self, tape: &mut Tape, store: &ParamStore, clip: &AudioClip) -> Result<TokenSequence> {
        match (self.config.kind, &self.raw, &self.mel) {
            (EncoderKind::Raw, Some(raw), _) => raw.tokenize(tape, store, clip),
            (EncoderKind::Mel, _, Some(mel)) => mel.tokenize(tape, store, clip),
            (EncoderKind::External, ..) => Err(Error::Config(
                "external encoder reads tokens from an embedding store; use encode_external".into(),
            )),
            _ => Err(Error::Config("encoder kind has no tokenizer parameters".into())),
        }
    }

    /// Tokenize and project one clip.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, clip: &AudioClip) -> Result<TokenSequence> {
        let seq = self.tokenize(tape, store, clip)?;
        self.projection.project(tape, store, seq)
    }

    /// Project a precomputed embedding matrix.
    pub fn encode_external(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embeddings: Tensor,
        site: &str,
    ) -> Result<TokenSequence> {
        if embeddings.cols() != self.config.d_embed {
            return Err(Error::Config(format!(
                "external embedding width {} differs from d_embed {}",
                embeddings.cols(),
                self.config.d_embed
            )));
        }
        let n = embeddings.rows();
        let tokens = tape.constant(embeddings);
        let seq = TokenSequence {
            tokens,
            mask: vec![true; n],
            site: site.to_string(),
            n_valid: n,
        };
        self.projection.project(tape, store, seq)
    }
}
