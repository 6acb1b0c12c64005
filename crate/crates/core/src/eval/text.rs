use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{Error, Result};

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Lower-cases, drops characters that are neither alphanumeric nor
/// whitespace, and collapses whitespace runs.
pub fn normalize_text(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn words(s: &str) -> Vec<String> {
    normalize_text(s).split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect()
}

/// `normalize(gold)` occurs inside `normalize(hyp)`.
pub fn contains_match(gold: &str, hyp: &str) -> Result<bool> {
    let g = normalize_text(gold);
    if g.is_empty() {
        return Err(Error::InvalidArgument("contains_match: empty gold answer".into()));
    }
    Ok(normalize_text(hyp).contains(&g))
}

/// Longest common subsequence length, two-row DP.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_f1(gold: &str, hyp: &str) -> f64 {
    let (g, h) = (words(gold), words(hyp));
    if g.is_empty() || h.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&g, &h) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / h.len() as f64;
    let r = l / g.len() as f64;
    2.0 * p * r / (p + r)
}

/// METEOR with exact then Porter-stem matching. Within a stage each hypothesis
/// word takes the unmatched reference word that extends the current chunk if
/// possible, otherwise the leftmost one.
pub fn meteor(gold: &str, hyp: &str) -> f64 {
    let (g, h) = (words(gold), words(hyp));
    if g.is_empty() || h.is_empty() {
        return 0.0;
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let gs: Vec<String> = g.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let hs: Vec<String> = h.iter().map(|w| stemmer.stem(w).into_owned()).collect();

    let mut align: Vec<Option<usize>> = vec![None; h.len()];
    let mut used = vec![false; g.len()];
    for (hf, gf) in [(&h, &g), (&hs, &gs)] {
        for i in 0..h.len() {
            if align[i].is_some() {
                continue;
            }
            let want_next = i.checked_sub(1).and_then(|p| align[p]).map(|j| j + 1);
            let cands = |j: usize| !used[j] && gf[j] == hf[i];
            let pick = want_next
                .filter(|&j| j < g.len() && cands(j))
                .or_else(|| (0..g.len()).find(|&j| cands(j)));
            if let Some(j) = pick {
                used[j] = true;
                align[i] = Some(j);
            }
        }
    }
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (prev, a) {
            (Some(p), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let mf = m as f64;
    let p = mf / h.len() as f64;
    let r = mf / g.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / mf).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}
