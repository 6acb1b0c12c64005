use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::EOS;
use crate::error::{Error, Result};
use crate::numeric::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::numeric::{GroupId, ParamId, ParamStore, Tape, Tensor, Var};
use crate::resampler::ADAPTER_GROUP;

pub const LM_GROUP: &str = "lm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub cross_attn_every: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ffn: 512,
            max_seq: 512,
            cross_attn_every: 1,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 || self.max_seq == 0 {
            return Err(Error::Config("LM sizes must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.cross_attn_every == 0 {
            return Err(Error::Config("cross_attn_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pre-LN causal transformer block.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, g: GroupId, name: &str, cfg: &LmConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, g, &format!("{name}.ln_attn"), cfg.d_model),
            attn: Attention::new(store, g, &format!("{name}.attn"), cfg.d_model, cfg.n_heads, rng)?,
            ln_ffn: LayerNorm::new(store, g, &format!("{name}.ln_ffn"), cfg.d_model),
            ffn: FeedForward::new(store, g, &format!("{name}.ffn"), cfg.d_model, cfg.d_ffn, rng),
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let x = self.ln_attn.forward(tape, store, h)?;
        let a = self.attn.forward(tape, store, x, x, None, true)?;
        let h = tape.add(h, a)?;
        let x = self.ln_ffn.forward(tape, store, h)?;
        let f = self.ffn.forward(tape, store, x)?;
        tape.add(h, f)
    }
}

/// `H ← H + tanh(α)·CrossAttn(LN(H), Z′)`, then `H ← H + tanh(β)·FFN(LN(H))`.
#[derive(Clone, Debug)]
pub struct GatedCrossBlock {
    /// Attention gate, shape `[1]`, initialised to 0.
    pub alpha: ParamId,
    /// Feed-forward gate, shape `[1]`, initialised to 0.
    pub alpha_ffn: ParamId,
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl GatedCrossBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, g: GroupId, name: &str, cfg: &LmConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            alpha: store.add(format!("{name}.alpha"), Tensor::zeros(&[1]), g),
            alpha_ffn: store.add(format!("{name}.alpha_ffn"), Tensor::zeros(&[1]), g),
            ln_attn: LayerNorm::new(store, g, &format!("{name}.ln_attn"), cfg.d_model),
            attn: Attention::new(store, g, &format!("{name}.attn"), cfg.d_model, cfg.n_heads, rng)?,
            ln_ffn: LayerNorm::new(store, g, &format!("{name}.ln_ffn"), cfg.d_model),
            ffn: FeedForward::new(store, g, &format!("{name}.ffn"), cfg.d_model, cfg.d_ffn, rng),
        })
    }

    pub fn gate(&self, store: &ParamStore) -> f64 {
        store.get(self.alpha).data()[0].tanh()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, z: Var) -> Result<Var> {
        let alpha = tape.param(store, self.alpha);
        let gate = tape.tanh(alpha)?;
        let x = self.ln_attn.forward(tape, store, h)?;
        let a = self.attn.forward(tape, store, x, z, None, false)?;
        let a = tape.mul_scalar(a, gate)?;
        let h = tape.add(h, a)?;
        let beta = tape.param(store, self.alpha_ffn);
        let gate_ffn = tape.tanh(beta)?;
        let x = self.ln_ffn.forward(tape, store, h)?;
        let f = self.ffn.forward(tape, store, x)?;
        let f = tape.mul_scalar(f, gate_ffn)?;
        tape.add(h, f)
    }
}

/// Decoder LM with gated cross-attention adapters in front of its blocks.
/// With no latents the adapters are skipped and it is a plain text LM.
#[derive(Clone, Debug)]
pub struct FusionLm {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    /// One entry per decoder block; `Some` every `cross_attn_every` layers.
    pub cross: Vec<Option<GatedCrossBlock>>,
}

impl FusionLm {
    /// Decoder weights go to `lm`, adapters to `adapter`. Pass `with_adapters =
    /// false` for a text-only model.
    pub fn new<R: Rng + ?Sized>(
        config: LmConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        lm_lr: f64,
        adapter_lr: f64,
        with_adapters: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let g = store.group(LM_GROUP, lm_lr, false);
        let d = config.d_model;
        let tok_emb = store.add("lm.tok_emb", Tensor::randn(&[vocab_size, d], 0.1, rng), g);
        let pos_emb = store.add("lm.pos_emb", Tensor::randn(&[config.max_seq, d], 0.02, rng), g);
        let blocks = (0..config.n_layers)
            .map(|i| DecoderBlock::new(store, g, &format!("lm.block{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, g, "lm.ln_f", d);
        let head = Linear::new(store, g, "lm.head", d, vocab_size, true, rng);
        let cross = if with_adapters {
            let ga = store.group(ADAPTER_GROUP, adapter_lr, false);
            (0..config.n_layers)
                .map(|i| {
                    (i % config.cross_attn_every == 0)
                        .then(|| GatedCrossBlock::new(store, ga, &format!("xattn.block{i}"), &config, rng))
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; config.n_layers]
        };
        Ok(Self {
            config,
            vocab_size,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
            cross,
        })
    }

    /// Ids of the decoder (non-adapter) parameters.
    pub fn lm_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| store.param(id).name.starts_with("lm."))
            .collect()
    }

    /// `tanh(α_ℓ)` for each adapter, in layer order.
    pub fn gate_values(&self, store: &ParamStore) -> Vec<f64> {
        self.cross.iter().flatten().map(|c| c.gate(store)).collect()
    }

    /// Logits `[T, V]`. `z = None` runs the text-only decoder.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], z: Option<Var>) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("LM input"));
        }
        if ids.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        if let Some(z) = z {
            let s = tape.shape(z);
            if s.len() != 2 || s[1] != self.config.d_model {
                return Err(Error::shape("lm cross-attention", format!("latents {s:?}")));
            }
        }
        let emb = tape.param(store, self.tok_emb);
        let tok = tape.gather_rows(emb, ids)?;
        let pos_table = tape.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut h = tape.add(tok, pos)?;
        for (blk, cross) in self.blocks.iter().zip(&self.cross) {
            if let (Some(z), Some(c)) = (z, cross) {
                h = c.forward(tape, store, h, z)?;
            }
            h = blk.forward(tape, store, h)?;
        }
        let h = self.ln_f.forward(tape, store, h)?;
        self.head.forward(tape, store, h)
    }

    /// Greedy decoding of up to `max_new` tokens. The EOS that stops decoding is not returned.
    pub fn generate(&self, store: &ParamStore, prompt: &[usize], z: Option<&Tensor>, max_new: usize) -> Result<Vec<usize>> {
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if ids.len() >= self.config.max_seq {
                break;
            }
            let mut tape = Tape::new();
            let zv = z.map(|t| tape.constant(t.clone()));
            let logits = self.forward(&mut tape, store, &ids, zv)?;
            let lv = tape.value(logits);
            let last = lv.row(lv.rows() - 1);
            let mut best = 0;
            for (j, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = j;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            ids.push(best);
        }
        Ok(out)
    }
}

/// Mean cross-entropy over positions with a target.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}
