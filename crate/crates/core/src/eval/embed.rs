//! Greedy max-cosine P/R/F1 over word embeddings from an injected [`Embedder`].

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::text::words;
use crate::error::{Error, Result};

pub trait Embedder {
    /// Unit-norm (or zero) vector for one normalised word.
    fn embed(&self, word: &str) -> Result<Vec<f64>>;
}

/// Deterministic toy embedder: each word type gets a Gaussian vector seeded
/// from SHA-256(seed ‖ word), normalised to unit length.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, word: &str) -> Result<Vec<f64>> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.as_bytes());
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| x / n).collect())
    }
}

/// Text embeddings: one `word v1 v2 …` line per word. Unknown words map to zero.
#[derive(Clone, Debug)]
pub struct FileEmbedder {
    table: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl FileEmbedder {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::EmbedderUnavailable(format!("{}: {e}", path.display())))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default().to_string();
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::EmbedderUnavailable(format!("line {}: {e}", n + 1)))?;
            if *dim.get_or_insert(v.len()) != v.len() || v.is_empty() {
                return Err(Error::EmbedderUnavailable(format!("line {}: inconsistent width", n + 1)));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v = if norm > 0.0 { v.into_iter().map(|x| x / norm).collect() } else { v };
            table.insert(word, v);
        }
        let dim = dim.ok_or_else(|| Error::EmbedderUnavailable(format!("{} is empty", path.display())))?;
        Ok(Self { table, dim })
    }
}

impl Embedder for FileEmbedder {
    fn embed(&self, word: &str) -> Result<Vec<f64>> {
        Ok(self.table.get(word).cloned().unwrap_or_else(|| vec![0.0; self.dim]))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// F1 of greedy max-cosine precision and recall, clamped to `[0, 1]`.
/// Returns 0 when either side is empty after normalisation.
pub fn embed_score(gold: &str, hyp: &str, embedder: &dyn Embedder) -> Result<f64> {
    let g: Vec<Vec<f64>> = words(gold).iter().map(|w| embedder.embed(w)).collect::<Result<_>>()?;
    let h: Vec<Vec<f64>> = words(hyp).iter().map(|w| embedder.embed(w)).collect::<Result<_>>()?;
    if g.is_empty() || h.is_empty() {
        return Ok(0.0);
    }
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| {
        from.iter()
            .map(|a| to.iter().map(|b| dot(a, b)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(&h, &g);
    let r = best(&g, &h);
    if p + r <= 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * p * r / (p + r)).clamp(0.0, 1.0))
}
