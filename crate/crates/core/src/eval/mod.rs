//! QA metrics and per-dataset reports.

pub mod binary;
pub mod embed;
pub mod text;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use binary::{binary_metrics, extract_yes_no, BinaryMetrics, YesNo};
pub use embed::{embed_score, Embedder, FileEmbedder, HashEmbedder};
pub use text::{contains_match, lcs_len, meteor, normalize_text, rouge_l_f1};

use crate::error::{Error, Result};
use crate::resampler::QaKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    #[serde(rename = "dataset")]
    pub dataset_tag: String,
    pub kind: QaKind,
    pub question: String,
    pub gold: String,
    pub hyp: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenMetrics {
    pub n: usize,
    pub contains_match: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub embed_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub n: usize,
    pub binary: Option<BinaryMetrics>,
    pub open: Option<OpenMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Pooled over every prediction.
    pub overall: MetricRow,
    pub per_dataset: BTreeMap<String, MetricRow>,
}

fn row(preds: &[&Prediction], embedder: &dyn Embedder) -> Result<MetricRow> {
    let bin: Vec<(&str, &str)> = preds
        .iter()
        .filter(|p| p.kind == QaKind::Binary)
        .map(|p| (p.gold.as_str(), p.hyp.as_str()))
        .collect();
    let open: Vec<&&Prediction> = preds.iter().filter(|p| p.kind == QaKind::Open).collect();
    let open = if open.is_empty() {
        None
    } else {
        let n = open.len() as f64;
        let mut m = OpenMetrics {
            n: open.len(),
            contains_match: 0.0,
            rouge_l: 0.0,
            meteor: 0.0,
            embed_score: 0.0,
        };
        for p in open {
            m.contains_match += f64::from(u8::from(contains_match(&p.gold, &p.hyp)?));
            m.rouge_l += rouge_l_f1(&p.gold, &p.hyp);
            m.meteor += meteor(&p.gold, &p.hyp);
            m.embed_score += embed_score(&p.gold, &p.hyp, embedder)?;
        }
        m.contains_match /= n;
        m.rouge_l /= n;
        m.meteor /= n;
        m.embed_score /= n;
        Some(m)
    };
    Ok(MetricRow {
        n: preds.len(),
        binary: (!bin.is_empty()).then(|| binary_metrics(&bin)),
        open,
    })
}

pub fn evaluate(preds: &[Prediction], embedder: &dyn Embedder) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to evaluate".into()));
    }
    let all: Vec<&Prediction> = preds.iter().collect();
    let mut by_tag: BTreeMap<String, Vec<&Prediction>> = BTreeMap::new();
    for p in preds {
        by_tag.entry(p.dataset_tag.clone()).or_default().push(p);
    }
    let per_dataset = by_tag
        .into_iter()
        .map(|(k, v)| Ok((k, row(&v, embedder)?)))
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        overall: row(&all, embedder)?,
        per_dataset,
    })
}

impl MetricReport {
    /// Fixed-width table, one line per dataset plus the pooled row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "dataset", "n", "acc", "f1", "sens", "spec", "contains", "rougeL", "meteor", "embed"
        );
        let fmt = |v: Option<f64>| v.map_or_else(|| format!("{:>8}", "-"), |v| format!("{v:>8.4}"));
        let rows = self
            .per_dataset
            .iter()
            .map(|(k, r)| (k.as_str(), r))
            .chain(std::iter::once(("overall", &self.overall)));
        for (name, r) in rows {
            let b = r.binary.as_ref();
            let o = r.open.as_ref();
            let _ = writeln!(
                s,
                "{:<16} {:>6} {} {} {} {} {} {} {} {}",
                name,
                r.n,
                fmt(b.map(|b| b.accuracy)),
                fmt(b.map(|b| b.f1_macro)),
                fmt(b.map(|b| b.sensitivity)),
                fmt(b.map(|b| b.specificity)),
                fmt(o.map(|o| o.contains_match)),
                fmt(o.map(|o| o.rouge_l)),
                fmt(o.map(|o| o.meteor)),
                fmt(o.map(|o| o.embed_score)),
            );
        }
        s
    }
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for p in preds {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
