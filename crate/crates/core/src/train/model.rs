use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::encoder::{AcousticEncoder, EmbeddingStore, EncoderKind, ENCODER_GROUP};
use crate::error::{Error, Result};
use crate::lm::checkpoint::{load_checkpoint, save_checkpoint};
use crate::lm::vocab::{split_words, EOS};
use crate::lm::{assemble_prompt, lm_loss, load_text_lm, training_sequence, FusionLm, LmConfig, Prompt, TextVocab, LM_GROUP};
use crate::numeric::{ParamStore, Tape, Tensor, Var};
use crate::resampler::{assemble_bag, PatientBag, QaPair, Resampler, ADAPTER_GROUP};

pub const FUSION_KIND: &str = "fusion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: String,
    pub train: TrainConfig,
    pub lm: LmConfig,
}

/// Encoder, resampler and adapter-equipped decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub encoder: AcousticEncoder,
    pub resampler: Resampler,
    pub lm: FusionLm,
    pub vocab: TextVocab,
    pub config: TrainConfig,
    pub embeddings: Option<EmbeddingStore>,
}

/// Token ids of a full text-only transcript: prompt, answer, EOS.
pub fn transcript_ids(vocab: &TextVocab, sites: &[&str], qa: &QaPair, max_seq: usize) -> Result<Vec<usize>> {
    let p = assemble_prompt(vocab, sites, &qa.question, max_seq)?;
    let mut ids = p.ids;
    ids.extend(split_words(&qa.answer).map(|w| vocab.id(&w)));
    ids.push(EOS);
    Ok(ids)
}

impl FusionModel {
    /// Builds fresh adapters and encoder with `config.seed`. The decoder is
    /// randomly initialised here; see [`Self::from_text_lm`].
    pub fn build(config: &TrainConfig, lm_config: LmConfig, vocab: TextVocab) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if config.encoder.d_proj != lm_config.d_model {
            return Err(Error::Config(format!(
                "encoder.d_proj {} must equal the LM width {}",
                config.encoder.d_proj, lm_config.d_model
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let lm = FusionLm::new(lm_config, vocab.len(), &mut store, 0.0, config.lr_adapter, true, &mut rng)?;
        let resampler = Resampler::new(
            config.resampler.clone(),
            lm.config.d_model,
            &mut store,
            config.lr_adapter,
            &mut rng,
        )?;
        let encoder = AcousticEncoder::new(config.encoder.clone(), &mut store, config.lr_encoder, &mut rng)?;
        let embeddings = match (config.encoder.kind, &config.embeddings_dir) {
            (EncoderKind::External, Some(dir)) => Some(EmbeddingStore::open(dir)?),
            (EncoderKind::External, None) => {
                return Err(Error::Config("external encoder needs embeddings_dir".into()));
            }
            _ => None,
        };
        let lm_group = store.group(LM_GROUP, 0.0, true);
        store.set_frozen(lm_group, true);
        Ok((
            Self {
                encoder,
                resampler,
                lm,
                vocab,
                config: config.clone(),
                embeddings,
            },
            store,
        ))
    }

    /// Fusion model whose decoder weights come from a pretrained text LM. The
    /// `lm` group is frozen.
    pub fn from_text_lm(
        config: &TrainConfig,
        lm_config: LmConfig,
        vocab: TextVocab,
        lm_store: &ParamStore,
    ) -> Result<(Self, ParamStore)> {
        let (model, mut store) = Self::build(config, lm_config, vocab)?;
        store.copy_values_from(lm_store, |n| n.starts_with("lm."))?;
        Ok((model, store))
    }

    pub fn from_text_lm_file(config: &TrainConfig, path: impl AsRef<Path>) -> Result<(Self, ParamStore)> {
        let (lm_config, vocab, lm_store) = load_text_lm(path)?;
        Self::from_text_lm(config, lm_config, vocab, &lm_store)
    }

    pub fn save(&self, store: &ParamStore, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<String> {
        let cfg = FusionConfig {
            kind: FUSION_KIND.into(),
            train: self.config.clone(),
            lm: self.lm.config.clone(),
        };
        save_checkpoint(path, serde_json::to_value(cfg)?, Some(&self.vocab), store, extra)
    }

    /// Restores a fusion checkpoint, including group learning rates and freeze flags.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, ParamStore)> {
        let path = path.as_ref();
        let (header, saved) = load_checkpoint(path)?;
        let cfg: FusionConfig = serde_json::from_value(header.config)
            .map_err(|e| Error::Checkpoint(format!("{}: not a fusion checkpoint ({e})", path.display())))?;
        if cfg.kind != FUSION_KIND {
            return Err(Error::Checkpoint(format!("{}: kind {}", path.display(), cfg.kind)));
        }
        let vocab = header
            .vocab
            .ok_or_else(|| Error::Checkpoint(format!("{}: no vocabulary", path.display())))?;
        let (model, mut store) = Self::build(&cfg.train, cfg.lm, vocab)?;
        let n = store.copy_values_from(&saved, |_| true)?;
        if n != saved.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} saved parameters, model has {n}",
                path.display(),
                saved.len()
            )));
        }
        for g in &header.groups {
            if let Some(id) = store.find_group(&g.name) {
                store.set_learning_rate(id, g.learning_rate);
                store.set_frozen(id, g.frozen);
            }
        }
        Ok((model, store))
    }

    /// Applies the configured per-group learning rates and freezes the decoder.
    pub fn configure_groups(&self, store: &mut ParamStore) {
        for (name, lr, frozen) in [
            (ENCODER_GROUP, self.config.lr_encoder, false),
            (ADAPTER_GROUP, self.config.lr_adapter, false),
            (LM_GROUP, 0.0, true),
        ] {
            if let Some(g) = store.find_group(name) {
                store.set_learning_rate(g, lr);
                store.set_frozen(g, frozen);
            }
        }
    }

    /// `Z′ = Resample(assemble(project(tokenize(clip))))` for the whole bag.
    pub fn latents(&self, tape: &mut Tape, store: &ParamStore, bag: &PatientBag) -> Result<Var> {
        let seqs = bag
            .clips
            .iter()
            .enumerate()
            .map(|(k, clip)| match &self.embeddings {
                Some(es) => {
                    let e = es.load(&format!("{}_{k}", bag.patient_id), self.encoder.config.d_embed)?;
                    self.encoder.encode_external(tape, store, e, &clip.site)
                }
                None => self.encoder.encode(tape, store, clip),
            })
            .collect::<Result<Vec<_>>>()?;
        let m = assemble_bag(tape, &seqs)?;
        Ok(self.resampler.resample(tape, store, &m)?.z)
    }

    pub fn latents_value(&self, store: &ParamStore, bag: &PatientBag) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = self.latents(&mut tape, store, bag)?;
        Ok(tape.value(z).clone())
    }

    pub fn prompt(&self, bag: &PatientBag, question: &str) -> Result<Prompt> {
        assemble_prompt(&self.vocab, &bag.sites(), question, self.lm.config.max_seq)
    }

    /// Teacher-forced answer loss for one question given the bag's latents.
    pub fn qa_loss(&self, tape: &mut Tape, store: &ParamStore, bag: &PatientBag, z: Var, qa: &QaPair) -> Result<Var> {
        let prompt = self.prompt(bag, &qa.question)?;
        let (inputs, targets) = training_sequence(&self.vocab, &prompt, &qa.answer, self.lm.config.max_seq)?;
        let logits = self.lm.forward(tape, store, &inputs, Some(z))?;
        lm_loss(tape, logits, &targets)
    }

    /// Mean answer loss over the bag's questions, sharing one `Z′`.
    pub fn patient_loss(&self, tape: &mut Tape, store: &ParamStore, bag: &PatientBag) -> Result<Var> {
        if bag.qa_pairs.is_empty() {
            return Err(Error::Data(format!("patient {} has no questions", bag.patient_id)));
        }
        let z = self.latents(tape, store, bag)?;
        let losses = bag
            .qa_pairs
            .iter()
            .map(|qa| self.qa_loss(tape, store, bag, z, qa))
            .collect::<Result<Vec<_>>>()?;
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        tape.scale(total, 1.0 / losses.len() as f64)
    }

    /// Greedy answer. `z = None` gives the audio-blind text-only decoder.
    pub fn answer(&self, store: &ParamStore, bag: &PatientBag, question: &str, z: Option<&Tensor>) -> Result<(Prompt, String)> {
        let prompt = self.prompt(bag, question)?;
        let out = self.lm.generate(store, &prompt.ids, z, self.config.max_answer_tokens)?;
        let text = self.vocab.decode(&out);
        Ok((prompt, text))
    }
}
