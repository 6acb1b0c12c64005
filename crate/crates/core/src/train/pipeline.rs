use super::model::transcript_ids;
use super::SplitManifest;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::lm::vocab::DEFAULT_MIN_FREQ;
use crate::lm::{pretrain_text_lm, prompt_text, LmConfig, PretrainConfig, PretrainReport, TextVocab};
use crate::numeric::ParamStore;

/// Prompt plus gold answer for every question of the given patients.
pub fn transcripts(manifest: &Manifest, ids: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for id in ids {
        let e = manifest.get(id).ok_or_else(|| Error::MissingId(id.clone()))?;
        for q in &e.qa {
            out.push(format!("{} {}", prompt_text(&e.sites(), &q.question), q.answer));
        }
    }
    Ok(out)
}

fn sequences(manifest: &Manifest, ids: &[String], vocab: &TextVocab, max_seq: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for id in ids {
        let e = manifest.get(id).ok_or_else(|| Error::MissingId(id.clone()))?;
        for qa in e.qa_pairs()? {
            out.push(transcript_ids(vocab, &e.sites(), &qa, max_seq)?);
        }
    }
    Ok(out)
}

/// Builds the vocabulary from train transcripts and pretrains the text-only
/// decoder on them, reporting perplexity on the validation patients.
pub fn pretrain_on_split(
    manifest: &Manifest,
    split: &SplitManifest,
    lm_config: LmConfig,
    cfg: &PretrainConfig,
) -> Result<(TextVocab, ParamStore, PretrainReport)> {
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let vocab = TextVocab::build(&transcripts(manifest, &split.train)?, DEFAULT_MIN_FREQ)?;
    let train = sequences(manifest, &split.train, &vocab, lm_config.max_seq)?;
    let val = sequences(manifest, &split.val, &vocab, lm_config.max_seq)?;
    let (store, _, report) = pretrain_text_lm(&train, &val, lm_config, vocab.len(), cfg)?;
    Ok((vocab, store, report))
}
