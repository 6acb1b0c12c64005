use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::FusionModel;
use super::run::{evaluate_split, train};
use super::source::BagSource;
use super::{SplitManifest, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{Embedder, MetricReport};
use crate::numeric::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seconds: f64,
    /// Taken from the supplied main run instead of retraining.
    pub reused: bool,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8}", "seconds", "acc", "f1", "contains", "rougeL");
        let f = |v: Option<f64>| v.map_or_else(|| format!("{:>8}", "-"), |v| format!("{v:>8.4}"));
        for r in &self.rows {
            let b = r.report.overall.binary.as_ref();
            let o = r.report.overall.open.as_ref();
            let _ = writeln!(
                s,
                "{:>8} {} {} {} {}",
                r.seconds,
                f(b.map(|b| b.accuracy)),
                f(b.map(|b| b.f1_macro)),
                f(o.map(|o| o.contains_match)),
                f(o.map(|o| o.rouge_l)),
            );
        }
        s
    }

    pub fn accuracy(&self, seconds: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seconds == seconds)
            .and_then(|r| r.report.overall.binary.as_ref())
            .map(|b| b.accuracy)
    }
}

/// A finished run whose test report may stand in for one ablation row.
pub struct MainRun<'a> {
    pub config: &'a TrainConfig,
    pub report: &'a MetricReport,
}

/// Retrains and evaluates on the test split once per context length. Each
/// model sees train and test audio truncated to its own `max_seconds`.
#[allow(clippy::too_many_arguments)]
pub fn ablate_context(
    base: &TrainConfig,
    seconds: &[f64],
    build: &dyn Fn(&TrainConfig) -> Result<(FusionModel, ParamStore)>,
    source_for: &dyn Fn(f64) -> Result<Box<dyn BagSource>>,
    split: &SplitManifest,
    embedder: &dyn Embedder,
    main: Option<MainRun<'_>>,
    out: Option<&Path>,
) -> Result<AblationReport> {
    if seconds.is_empty() {
        return Err(Error::InvalidArgument("no context lengths given".into()));
    }
    if split.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let mut rows = Vec::with_capacity(seconds.len());
    for &s in seconds {
        let cfg = TrainConfig {
            max_seconds: s,
            ..base.clone()
        };
        cfg.validate()?;
        if let Some(m) = main.as_ref().filter(|m| *m.config == cfg) {
            rows.push(AblationRow {
                seconds: s,
                reused: true,
                report: m.report.clone(),
            });
            continue;
        }
        let (model, mut store) = build(&cfg)?;
        let source = source_for(s)?;
        let dir = out.map(|d| d.join(format!("ctx{s}s")));
        train(&model, &mut store, source.as_ref(), split, dir.as_deref())?;
        let (report, _) = evaluate_split(&model, &store, source.as_ref(), &split.test, true, embedder)?;
        rows.push(AblationRow {
            seconds: s,
            reused: false,
            report,
        });
    }
    Ok(AblationReport { rows })
}
