use super::vocab::{split_words, TextVocab, AUDIO, BOS, EOS};
use crate::error::{Error, Result};

pub const INSTRUCTION: &str =
    "you are a clinical assistant . listen to the auscultation recordings and answer the question .";

/// Prompt token ids; `answer_start` is the index right after `answer:`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub ids: Vec<usize>,
    pub answer_start: usize,
}

/// Plain-text rendering of the prompt, as fed to the vocabulary builder.
pub fn prompt_text(sites: &[&str], question: &str) -> String {
    let mut s = String::from(INSTRUCTION);
    for site in sites {
        s.push_str(" <audio> ");
        s.push_str(site);
    }
    s.push_str(" question: ");
    s.push_str(question);
    s.push_str(" answer:");
    s
}

/// `BOS instruction (<audio> site)* question: Q answer:`
pub fn assemble_prompt(vocab: &TextVocab, sites: &[&str], question: &str, max_seq: usize) -> Result<Prompt> {
    if sites.is_empty() {
        return Err(Error::InvalidArgument("prompt needs at least one clip".into()));
    }
    if question.trim().is_empty() {
        return Err(Error::InvalidArgument("empty question".into()));
    }
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(INSTRUCTION));
    for site in sites {
        ids.push(AUDIO);
        ids.extend(vocab.encode(site));
    }
    ids.push(vocab.id("question:"));
    ids.extend(vocab.encode(question));
    ids.push(vocab.id("answer:"));
    if ids.len() > max_seq {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: max_seq,
        });
    }
    let answer_start = ids.len();
    Ok(Prompt { ids, answer_start })
}

/// Teacher-forcing pair: inputs are `prompt ++ answer`, and position `t`
/// predicts token `t + 1` only inside the answer span (which ends with EOS).
pub fn training_sequence(
    vocab: &TextVocab,
    prompt: &Prompt,
    answer: &str,
    max_seq: usize,
) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let mut full = prompt.ids.clone();
    full.extend(split_words(answer).map(|w| vocab.id(&w)));
    full.push(EOS);
    // the final EOS is only ever a target, never an input
    let inputs = full[..full.len() - 1].to_vec();
    if inputs.len() > max_seq {
        return Err(Error::SequenceTooLong {
            len: inputs.len(),
            max: max_seq,
        });
    }
    let targets = (0..inputs.len())
        .map(|t| (t + 1 >= prompt.answer_start).then(|| full[t + 1]))
        .collect();
    Ok((inputs, targets))
}
