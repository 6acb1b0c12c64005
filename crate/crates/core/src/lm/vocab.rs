use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const AUDIO: usize = 3;
pub const UNK: usize = 4;
pub const AUDIO_TOKEN: &str = "<audio>";
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", AUDIO_TOKEN, "<unk>"];
pub const DEFAULT_MIN_FREQ: usize = 2;

/// Whitespace tokens, lower-cased.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Word-level vocabulary. Ids 0 to 4 are the reserved specials.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TextVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TextVocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<TextVocab> for Vec<String> {
    fn from(v: TextVocab) -> Self {
        v.tokens
    }
}

impl TextVocab {
    /// Keeps words seen at least `min_freq` times, ordered by descending
    /// frequency then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for line in corpus {
            for w in split_words(line.as_ref()) {
                any = true;
                *counts.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !SPECIALS.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect::<Vec<_>>();
        Ok(tokens.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text).map(|w| self.id(&w)).collect()
    }

    /// Joins tokens up to the first EOS, dropping PAD/BOS/AUDIO.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| !matches!(i, PAD | BOS | AUDIO))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
