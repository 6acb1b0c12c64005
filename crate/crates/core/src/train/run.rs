use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::FusionModel;
use super::source::BagSource;
use super::{balanced_batches, SplitManifest};
use crate::encoder::ENCODER_GROUP;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Embedder, MetricReport, Prediction};
use crate::lm::LM_GROUP;
use crate::numeric::{AdamW, AdamWConfig, Gradients, ParamStore, Tape};
use crate::resampler::{PatientBag, ADAPTER_GROUP};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Learning rate per trainable group.
    pub lr: BTreeMap<String, f64>,
    /// `tanh(α)` per adapter layer.
    pub gate_means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub lm_digest_before: String,
    pub lm_digest_after: String,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Vec<LogRecord>,
}

fn lr_map(store: &ParamStore) -> BTreeMap<String, f64> {
    [ENCODER_GROUP, ADAPTER_GROUP]
        .iter()
        .filter_map(|&n| store.find_group(n).map(|g| (n.to_string(), store.group_info(g).learning_rate)))
        .collect()
}

/// Gradients of `Σ loss_p / n_total` over one micro-batch, and the unscaled loss sum.
fn micro_batch(model: &FusionModel, store: &ParamStore, bags: &[PatientBag], n_total: usize) -> Result<(Gradients, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(bags.len());
    let mut vals = Vec::with_capacity(bags.len());
    for b in bags {
        let l = model.patient_loss(&mut tape, store, b)?;
        vals.push(tape.value(l).item()?);
        losses.push(l);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let total = tape.scale(total, 1.0 / n_total as f64)?;
    Ok((tape.backward(total)?, vals))
}

/// Accumulated gradient of the mean patient loss over `micro_batches`, as
/// used for one optimizer step. Also returns that mean loss.
pub fn step_gradients(model: &FusionModel, store: &ParamStore, micro_batches: &[Vec<PatientBag>]) -> Result<(Gradients, f64)> {
    let n: usize = micro_batches.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Empty("training step"));
    }
    let mut acc = Gradients::new(store.len());
    let mut sum = 0.0;
    for mb in micro_batches.iter().filter(|m| !m.is_empty()) {
        let (g, vals) = micro_batch(model, store, mb, n)?;
        sum += vals.iter().sum::<f64>();
        acc.accumulate(&g);
    }
    Ok((acc, sum / n as f64))
}

/// Mean patient loss without gradients.
pub fn mean_loss(model: &FusionModel, store: &ParamStore, source: &dyn BagSource, ids: &[String]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Empty("loss evaluation set"));
    }
    let mut sum = 0.0;
    for id in ids {
        let bag = source.bag(id)?;
        let mut tape = Tape::new();
        let l = model.patient_loss(&mut tape, store, &bag)?;
        sum += tape.value(l).item()?;
    }
    Ok(sum / ids.len() as f64)
}

struct LogSink {
    file: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
}

impl LogSink {
    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&r)?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(LOG_FILE, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Fusion training on the `train` split with per-epoch validation.
///
/// Each step draws `micro_batch · accum_steps` patients, accumulates the
/// gradient of their mean loss over `accum_steps` micro-batches, clips and
/// applies one AdamW update. The decoder stays frozen. With `out`, writes the
/// metric log plus `epoch{e}.ckpt` and `best.ckpt`. On return `store` holds
/// the best-validation parameters.
pub fn train(
    model: &FusionModel,
    store: &mut ParamStore,
    source: &dyn BagSource,
    split: &SplitManifest,
    out: Option<&Path>,
) -> Result<TrainReport> {
    let cfg = &model.config;
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    model.configure_groups(store);
    let lm_group = store
        .find_group(LM_GROUP)
        .ok_or_else(|| Error::Config("model has no lm group".into()))?;
    let lm_digest_before = store.group_digest(lm_group);

    let mut sink = LogSink {
        file: None,
        records: Vec::new(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(LOG_FILE);
        sink.file = Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?));
    }

    let mut by_tag: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in split.train.iter().enumerate() {
        let tag = split.tags.get(id).map_or("", String::as_str);
        by_tag.entry(tag).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_tag.into_values().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut step = 0usize;
    let mut val_losses = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut best_checkpoint = None;

    'epochs: for epoch in 0..cfg.epochs {
        let batches = balanced_batches(&groups, cfg.effective_batch(), cfg.balanced_sampling, &mut rng)?;
        for batch in batches {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let micro = batch
                .chunks(cfg.micro_batch)
                .map(|c| c.iter().map(|&i| source.bag(&split.train[i])).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let (mut grads, loss) = step_gradients(model, store, &micro)?;
            if !loss.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| split.train[i].as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("batch {ids:?}"),
                });
            }
            grads.check_finite(store)?;
            if cfg.clip_norm > 0.0 {
                grads.clip_global_norm(cfg.clip_norm);
            }
            opt.step(store, &grads)?;
            step += 1;
            sink.push(LogRecord {
                step,
                epoch,
                split: "train".into(),
                loss,
                lr: lr_map(store),
                gate_means: model.lm.gate_values(store),
            })?;
        }
        let val = if split.val.is_empty() {
            sink.records.last().map_or(f64::NAN, |r| r.loss)
        } else {
            mean_loss(model, store, source, &split.val)?
        };
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("validation loss after epoch {epoch}"),
            });
        }
        val_losses.push(val);
        sink.push(LogRecord {
            step,
            epoch,
            split: "val".into(),
            loss: val,
            lr: lr_map(store),
            gate_means: model.lm.gate_values(store),
        })?;
        let extra = serde_json::json!({ "epoch": epoch, "step": step, "val_loss": val });
        if let Some(dir) = out {
            model.save(store, dir.join(format!("epoch{epoch}.ckpt")), extra.clone())?;
        }
        if best.as_ref().is_none_or(|b| val < b.1) {
            if let Some(dir) = out {
                let p = dir.join(BEST_CHECKPOINT);
                model.save(store, &p, extra)?;
                best_checkpoint = Some(p);
            }
            best = Some((epoch, val, store.clone()));
        }
    }

    let (best_epoch, best_val_loss) = match best {
        Some((e, v, s)) => {
            *store = s;
            (e, v)
        }
        None => (0, f64::NAN),
    };
    let lm_digest_after = store.group_digest(lm_group);
    if lm_digest_after != lm_digest_before {
        return Err(Error::Checkpoint("frozen decoder parameters changed during training".into()));
    }
    Ok(TrainReport {
        steps: step,
        val_losses,
        best_epoch,
        best_val_loss,
        lm_digest_before,
        lm_digest_after,
        best_checkpoint,
        log: sink.records,
    })
}

/// Greedy answers for every question of the given patients. With `audio`
/// false the decoder runs without latents, i.e. the audio-blind baseline.
pub fn predict(
    model: &FusionModel,
    store: &ParamStore,
    source: &dyn BagSource,
    ids: &[String],
    audio: bool,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for id in ids {
        let bag = source.bag(id)?;
        let z = if audio { Some(model.latents_value(store, &bag)?) } else { None };
        for qa in &bag.qa_pairs {
            let (_, hyp) = model.answer(store, &bag, &qa.question, z.as_ref())?;
            out.push(Prediction {
                patient_id: bag.patient_id.clone(),
                dataset_tag: bag.dataset_tag.clone(),
                kind: qa.kind,
                question: qa.question.clone(),
                gold: qa.answer.clone(),
                hyp,
            });
        }
    }
    Ok(out)
}

pub fn evaluate_split(
    model: &FusionModel,
    store: &ParamStore,
    source: &dyn BagSource,
    ids: &[String],
    audio: bool,
    embedder: &dyn Embedder,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let preds = predict(model, store, source, ids, audio)?;
    Ok((evaluate(&preds, embedder)?, preds))
}
