use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::model::{lm_loss, FusionLm, LmConfig, LM_GROUP};
use super::vocab::TextVocab;
use crate::error::{Error, Result};
use crate::numeric::{AdamW, AdamWConfig, Gradients, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 3e-3,
            batch: 16,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_perplexity: f64,
    pub final_perplexity: f64,
    pub epoch_losses: Vec<f64>,
}

fn next_token_targets(seq: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let inputs = seq[..seq.len() - 1].to_vec();
    let targets = seq[1..].iter().map(|&t| Some(t)).collect();
    (inputs, targets)
}

/// Token-weighted perplexity of the text-only decoder.
pub fn perplexity(model: &FusionLm, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs.iter().filter(|s| s.len() >= 2) {
        let (inp, tgt) = next_token_targets(s);
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, store, &inp, None)?;
        let l = lm_loss(&mut tape, logits, &tgt)?;
        total += tape.value(l).item()? * tgt.len() as f64;
        count += tgt.len();
    }
    if count == 0 {
        return Err(Error::Empty("perplexity corpus"));
    }
    Ok((total / count as f64).exp())
}

/// Trains a text-only decoder on token sequences (each `BOS … EOS`) with
/// next-token loss on every position, then freezes the `lm` group.
pub fn pretrain_text_lm(
    train: &[Vec<usize>],
    heldout: &[Vec<usize>],
    lm_config: LmConfig,
    vocab_size: usize,
    cfg: &PretrainConfig,
) -> Result<(ParamStore, FusionLm, PretrainReport)> {
    let usable: Vec<&Vec<usize>> = train.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Data("pretraining corpus has no sequences of length >= 2".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("pretrain batch must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = FusionLm::new(lm_config, vocab_size, &mut store, cfg.lr, 0.0, false, &mut rng)?;
    let eval_set = if heldout.is_empty() { train } else { heldout };
    let initial_perplexity = perplexity(&model, &store, eval_set)?;
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut acc = Gradients::new(store.len());
            for &i in chunk {
                let (inp, tgt) = next_token_targets(usable[i]);
                let mut tape = Tape::new();
                let logits = model.forward(&mut tape, &store, &inp, None)?;
                let loss = lm_loss(&mut tape, logits, &tgt)?;
                let lv = tape.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: opt.steps_taken() as usize,
                        detail: "text LM pretraining".into(),
                    });
                }
                sum += lv;
                acc.accumulate(&tape.backward(loss)?);
            }
            acc.scale(1.0 / chunk.len() as f64);
            acc.clip_global_norm(cfg.clip_norm);
            opt.step(&mut store, &acc)?;
        }
        epoch_losses.push(sum / usable.len() as f64);
    }
    let final_perplexity = perplexity(&model, &store, eval_set)?;
    let g = store.group(LM_GROUP, cfg.lr, false);
    store.set_frozen(g, true);
    Ok((
        store,
        model,
        PretrainReport {
            initial_perplexity,
            final_perplexity,
            epoch_losses,
        },
    ))
}

pub const TEXT_LM_KIND: &str = "text-lm";

/// Saves a pretrained decoder with its config and vocabulary.
pub fn save_text_lm(
    path: impl AsRef<Path>,
    config: &LmConfig,
    vocab: &TextVocab,
    store: &ParamStore,
    report: Option<&PretrainReport>,
) -> Result<String> {
    let cfg = serde_json::json!({ "kind": TEXT_LM_KIND, "lm": config });
    save_checkpoint(path, cfg, Some(vocab), store, serde_json::to_value(report)?)
}

pub fn load_text_lm(path: impl AsRef<Path>) -> Result<(LmConfig, TextVocab, ParamStore)> {
    let path = path.as_ref();
    let (header, store) = load_checkpoint(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if header.config.get("kind").and_then(|k| k.as_str()) != Some(TEXT_LM_KIND) {
        return Err(bad("not a text LM checkpoint"));
    }
    let config: LmConfig = serde_json::from_value(header.config["lm"].clone())?;
    let vocab = header.vocab.ok_or_else(|| bad("no vocabulary"))?;
    Ok((config, vocab, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::vocab::{TextVocab, BOS, EOS};

    fn corpus() -> (TextVocab, Vec<Vec<usize>>) {
        let lines: Vec<String> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    "question: is a murmur present? answer: yes".to_string()
                } else {
                    "question: which site shows the abnormality? answer: mitral".to_string()
                }
            })
            .collect();
        let v = TextVocab::build(&lines, 2).unwrap();
        let seqs = lines
            .iter()
            .map(|l| {
                let mut s = vec![BOS];
                s.extend(v.encode(l));
                s.push(EOS);
                s
            })
            .collect();
        (v, seqs)
    }

    #[test]
    fn pretraining_lowers_perplexity_and_freezes() {
        let (v, seqs) = corpus();
        let cfg = LmConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            max_seq: 32,
            cross_attn_every: 1,
        };
        let pc = PretrainConfig {
            epochs: 3,
            batch: 4,
            ..Default::default()
        };
        let (store, model, rep) = pretrain_text_lm(&seqs[..30], &seqs[30..], cfg.clone(), v.len(), &pc).unwrap();
        assert!(rep.final_perplexity < rep.initial_perplexity, "{rep:?}");
        for id in model.lm_params(&store) {
            assert!(store.group_of(id).frozen);
        }
        assert_eq!(store.trainable_count(), 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.ckpt");
        save_text_lm(&p, &cfg, &v, &store, Some(&rep)).unwrap();
        let (c2, v2, s2) = load_text_lm(&p).unwrap();
        assert_eq!((c2, v2), (cfg, v));
        let g = s2.find_group(LM_GROUP).unwrap();
        assert_eq!(s2.group_digest(g), store.group_digest(store.find_group(LM_GROUP).unwrap()));
    }
}
