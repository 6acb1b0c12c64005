//! Fusion training: splits, balanced sampling, the training loop, inference
//! helpers and the context-length ablation.

pub mod ablate;
pub mod model;
pub mod pipeline;
pub mod run;
pub mod source;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate_context, AblationReport, AblationRow, MainRun};
pub use model::{FusionConfig, FusionModel};
pub use pipeline::{pretrain_on_split, transcripts};
pub use run::{evaluate_split, mean_loss, predict, step_gradients, train, LogRecord, TrainReport, BEST_CHECKPOINT, LOG_FILE};
pub use source::{BagSource, ManifestSource, MemorySource};

use crate::encoder::{EncoderConfig, ENCODER_LR};
use crate::error::{Error, Result};
use crate::resampler::{ResamplerConfig, ADAPTER_LR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_adapter: f64,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub max_seconds: f64,
    pub balanced_sampling: bool,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    pub max_answer_tokens: usize,
    pub encoder: EncoderConfig,
    pub resampler: ResamplerConfig,
    /// Embedding store for `encoder.kind = "external"`.
    pub embeddings_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: ENCODER_LR,
            lr_adapter: ADAPTER_LR,
            micro_batch: 4,
            accum_steps: 4,
            epochs: 10,
            max_steps: None,
            seed: 0,
            max_seconds: 30.0,
            balanced_sampling: true,
            weight_decay: 0.01,
            clip_norm: 1.0,
            split: [0.7, 0.1, 0.2],
            max_answer_tokens: 8,
            encoder: EncoderConfig::default(),
            resampler: ResamplerConfig::default(),
            embeddings_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.micro_batch == 0 || self.accum_steps == 0 {
            return bad("micro_batch and accum_steps must be >= 1".into());
        }
        if !(self.max_seconds > 0.0 && self.max_seconds <= 30.0) {
            return bad(format!("max_seconds must be in (0, 30], got {}", self.max_seconds));
        }
        if !(self.lr_encoder >= 0.0 && self.lr_adapter >= 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return bad("learning rates, weight decay and clip norm must be non-negative".into());
        }
        check_ratios(&self.split)
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {r:?} must be in [0, 1] and sum to 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Patient id to dataset tag.
    pub tags: BTreeMap<String, String>,
}

impl SplitManifest {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Patient-level split stratified by dataset tag. Within each tag, ids are
/// sorted, shuffled under `seed`, and cut into `round(n·r)` sized val/test
/// slices with the remainder in train.
pub fn make_splits(patients: &[(String, String)], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    check_ratios(&ratios)?;
    let mut by_tag: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut tags = BTreeMap::new();
    for (id, tag) in patients {
        if tags.insert(id.clone(), tag.clone()).is_some() {
            return Err(Error::Data(format!("patient {id} listed twice")));
        }
        by_tag.entry(tag).or_default().push(id);
    }
    let needed = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitManifest {
        tags,
        ..Default::default()
    };
    for (tag, mut ids) in by_tag {
        if ids.len() < needed {
            return Err(Error::Data(format!(
                "dataset {tag} has {} patients, fewer than the {needed} splits",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        let size = |r: f64| if r > 0.0 { ((n * r).round() as usize).max(1) } else { 0 };
        let n_val = size(ratios[1]);
        let n_test = size(ratios[2]).min(ids.len() - n_val - usize::from(ratios[0] > 0.0));
        let (val, rest) = ids.split_at(n_val);
        let (test, train) = rest.split_at(n_test);
        out.train.extend(train.iter().map(|s| s.to_string()));
        out.val.extend(val.iter().map(|s| s.to_string()));
        out.test.extend(test.iter().map(|s| s.to_string()));
    }
    Ok(out)
}

/// Draws dataset tags uniformly, then patients from a per-tag queue that is
/// reshuffled each time it runs dry.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    pools: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    /// `groups` holds item indices per tag; empty groups are ignored.
    pub fn new(groups: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let pools: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
        if pools.is_empty() {
            return Err(Error::Empty("balanced sampler"));
        }
        let queues = vec![Vec::new(); pools.len()];
        Ok(Self {
            pools,
            queues,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> usize {
        let t = self.rng.random_range(0..self.pools.len());
        if self.queues[t].is_empty() {
            let mut q = self.pools[t].clone();
            q.shuffle(&mut self.rng);
            q.reverse();
            self.queues[t] = q;
        }
        self.queues[t].pop().expect("pools are non-empty")
    }
}

/// One epoch of draws (as many as there are items) cut into batches.
/// Without balancing this is a plain shuffle.
pub fn balanced_batches(
    groups: &[Vec<usize>],
    batch: usize,
    balanced: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let draws: Vec<usize> = if balanced && groups.iter().filter(|g| !g.is_empty()).count() > 1 {
        let mut s = BalancedSampler::new(groups.to_vec(), rng.random())?;
        (0..n).map(|_| s.draw()).collect()
    } else {
        let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
        all.shuffle(rng);
        all
    };
    Ok(draws.chunks(batch).map(<[usize]>::to_vec).collect())
}
