//! One JSON file configuring a whole workflow, section by section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, PretrainConfig};
use crate::resampler::ResamplerConfig;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

/// Every section and key is optional. [`RunConfig::from_json_str`] overlays
/// the given keys on the desk-scale defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub lm: LmConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Sizes and learning rates that train in minutes on one CPU core.
    fn default() -> Self {
        let lm = LmConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            max_seq: 64,
            cross_attn_every: 1,
        };
        Self {
            synth: SynthSpec {
                sample_rate: 16_000,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                epochs: 10,
                ..Default::default()
            },
            train: TrainConfig {
                lr_encoder: 5e-4,
                lr_adapter: 2e-3,
                micro_batch: 4,
                accum_steps: 1,
                epochs: 16,
                encoder: EncoderConfig {
                    d_embed: 64,
                    d_proj: lm.d_model,
                    ..Default::default()
                },
                resampler: ResamplerConfig {
                    n_latents: 16,
                    ..Default::default()
                },
                ..Default::default()
            },
            lm,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Unknown keys at any depth are errors.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = serde_json::to_value(Self::default())?;
        overlay(&mut merged, user, "")?;
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.lm.validate()?;
        self.train.validate()?;
        if self.train.encoder.d_proj != self.lm.d_model {
            return Err(Error::Config(format!(
                "train.encoder.d_proj {} must equal lm.d_model {}",
                self.train.encoder.d_proj, self.lm.d_model
            )));
        }
        Ok(())
    }

    /// Points every seeded component at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self
    }
}

fn overlay(base: &mut Value, user: Value, at: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown key `{here}`"))),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_fill_from_defaults() {
        let d = RunConfig::default();
        let c = RunConfig::from_json_str(r#"{"train": {"epochs": 2, "max_steps": 5}, "synth": {"n_patients": 12}}"#).unwrap();
        assert_eq!((c.train.epochs, c.train.max_steps), (2, Some(5)));
        assert_eq!(c.train.lr_adapter, d.train.lr_adapter);
        assert_eq!(c.synth.n_patients, 12);
        assert_eq!(c.synth.sample_rate, d.synth.sample_rate);
        assert_eq!(c.lm, d.lm);
        assert_eq!(RunConfig::from_json_str("{}").unwrap(), d);
        for bad in [r#"{"trian": {}}"#, r#"{"train": {"encoder": {"d_embd": 3}}}"#, "[1]"] {
            assert!(matches!(RunConfig::from_json_str(bad), Err(Error::Config(_))), "{bad}");
        }
        let s = RunConfig::default().with_seed(9);
        assert_eq!((s.synth.seed, s.pretrain.seed, s.train.seed), (9, 9, 9));
    }

    #[test]
    fn width_mismatch_fails_validation() {
        let mut c = RunConfig::default();
        c.lm.d_model = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
