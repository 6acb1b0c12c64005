use serde::{Deserialize, Serialize};

use super::text::words;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum YesNo {
    Yes,
    No,
}

/// First word that reads `yes` or `no`, scanning left to right.
pub fn extract_yes_no(text: &str) -> Option<YesNo> {
    words(text).iter().find_map(|w| match w.as_str() {
        "yes" => Some(YesNo::Yes),
        "no" => Some(YesNo::No),
        _ => None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Hypotheses with neither `yes` nor `no`.
    pub unparsed: usize,
    /// Set when any ratio had an empty denominator and was reported as 0.
    pub zero_division: bool,
}

/// Confusion-matrix metrics with `yes` as the positive class. A hypothesis
/// without a yes/no word is wrong for accuracy and for its gold class's recall.
pub fn binary_metrics(pairs: &[(&str, &str)]) -> BinaryMetrics {
    let (mut tp, mut tn, mut pred_yes, mut pred_no, mut gold_yes, mut gold_no, mut unparsed) =
        (0usize, 0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    for (gold, hyp) in pairs {
        let g = extract_yes_no(gold);
        let h = extract_yes_no(hyp);
        match g {
            Some(YesNo::Yes) => gold_yes += 1,
            Some(YesNo::No) => gold_no += 1,
            None => {}
        }
        match h {
            Some(YesNo::Yes) => pred_yes += 1,
            Some(YesNo::No) => pred_no += 1,
            None => unparsed += 1,
        }
        match (g, h) {
            (Some(YesNo::Yes), Some(YesNo::Yes)) => tp += 1,
            (Some(YesNo::No), Some(YesNo::No)) => tn += 1,
            _ => {}
        }
    }
    let mut zero_division = false;
    let mut ratio = |a: usize, b: usize| {
        if b == 0 {
            zero_division = true;
            0.0
        } else {
            a as f64 / b as f64
        }
    };
    let accuracy = ratio(tp + tn, pairs.len());
    let sensitivity = ratio(tp, gold_yes);
    let specificity = ratio(tn, gold_no);
    let prec_yes = ratio(tp, pred_yes);
    let prec_no = ratio(tn, pred_no);
    let f1 = |p: f64, r: f64| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    let f1_macro = (f1(prec_yes, sensitivity) + f1(prec_no, specificity)) / 2.0;
    BinaryMetrics {
        n: pairs.len(),
        accuracy,
        f1_macro,
        sensitivity,
        specificity,
        unparsed,
        zero_division,
    }
}
