//! Multi-instance pooling: a patient's clips are flattened into one masked
//! token matrix and compressed to `K` latents by Perceiver cross-attention.

pub mod bag;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use bag::{assemble_bag, BagMatrix, PatientBag, QaKind, QaPair};

use crate::error::{Error, Result};
use crate::numeric::nn::{Attention, FeedForward, LayerNorm};
use crate::numeric::{GroupId, ParamId, ParamStore, Tape, Tensor, Var};

pub const ADAPTER_GROUP: &str = "adapter";
pub const ADAPTER_LR: f64 = 1.5e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResamplerConfig {
    pub n_latents: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub ffn_mult: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            n_latents: 64,
            n_heads: 4,
            depth: 1,
            ffn_mult: 4,
        }
    }
}

/// `Z′`, shape `[K, D]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentBundle {
    pub z: Var,
    pub k: usize,
}

/// `Z ← Z + Attn(LN(Z), LN(X)); Z ← Z + FFN(LN(Z))`.
#[derive(Clone, Debug)]
pub struct ResamplerBlock {
    pub ln_latents: LayerNorm,
    pub ln_media: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl ResamplerBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        d: usize,
        cfg: &ResamplerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_latents: LayerNorm::new(store, group, &format!("{name}.ln_latents"), d),
            ln_media: LayerNorm::new(store, group, &format!("{name}.ln_media"), d),
            attn: Attention::new(store, group, &format!("{name}.attn"), d, cfg.n_heads, rng)?,
            ln_ffn: LayerNorm::new(store, group, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, group, &format!("{name}.ffn"), d, d * cfg.ffn_mult, rng),
        })
    }

    /// The cross-attention sublayer alone: `softmax(Q Kᵀ/√d_k) V` per head,
    /// concatenated and output-projected. Masked keys get zero weight.
    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        latents: Var,
        x: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let q = self.ln_latents.forward(tape, store, latents)?;
        let kv = self.ln_media.forward(tape, store, x)?;
        self.attn.forward(tape, store, q, kv, Some(mask), false)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, x: Var, mask: &[bool]) -> Result<Var> {
        let a = self.cross_attend(tape, store, z, x, mask)?;
        let z = tape.add(z, a)?;
        let h = self.ln_ffn.forward(tape, store, z)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(z, f)
    }
}

#[derive(Clone, Debug)]
pub struct Resampler {
    pub config: ResamplerConfig,
    pub latents: ParamId,
    pub blocks: Vec<ResamplerBlock>,
    pub ln_out: LayerNorm,
    pub d_model: usize,
}

impl Resampler {
    /// Registers parameters in the `adapter` group (created with `lr` if absent).
    pub fn new<R: Rng + ?Sized>(
        config: ResamplerConfig,
        d_model: usize,
        store: &mut ParamStore,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if config.n_latents == 0 || config.depth == 0 || config.ffn_mult == 0 {
            return Err(Error::Config("resampler needs K, depth and ffn_mult >= 1".into()));
        }
        let group = store.group(ADAPTER_GROUP, lr, false);
        let latents = store.add(
            "resampler.latents",
            Tensor::randn(&[config.n_latents, d_model], 1.0, rng),
            group,
        );
        let blocks = (0..config.depth)
            .map(|i| ResamplerBlock::new(store, group, &format!("resampler.block{i}"), d_model, &config, rng))
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(store, group, "resampler.ln_out", d_model);
        Ok(Self {
            config,
            latents,
            blocks,
            ln_out,
            d_model,
        })
    }

    pub fn resample(&self, tape: &mut Tape, store: &ParamStore, bag: &BagMatrix) -> Result<LatentBundle> {
        let shape = tape.shape(bag.x);
        if shape.len() != 2 || shape[1] != self.d_model || shape[0] != bag.mask.len() {
            return Err(Error::shape(
                "resample",
                format!("bag {shape:?} with {} mask flags, width {}", bag.mask.len(), self.d_model),
            ));
        }
        if !bag.mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("bag has no valid token rows".into()));
        }
        let mut z = tape.param(store, self.latents);
        for b in &self.blocks {
            z = b.forward(tape, store, z, bag.x, &bag.mask)?;
        }
        let z = self.ln_out.forward(tape, store, z)?;
        Ok(LatentBundle {
            z,
            k: self.config.n_latents,
        })
    }
}
