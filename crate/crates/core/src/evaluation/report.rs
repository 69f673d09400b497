//! Metric reports as JSON and as aligned text tables (values ×100).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{auroc, f1_scores, topk_precision_recall_in, ClassPrf, ConfidenceFilter, TopK, TopkPool};
use crate::predictor::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub n: usize,
    /// `None` when the evaluated labels hold a single class.
    pub auroc: Option<f64>,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassPrf>,
    pub topk_fraction: f64,
    #[serde(default)]
    pub topk_pool: TopkPool,
    pub topk: Vec<TopK>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_filter: Option<ConfidenceFilter>,
}

impl MetricReport {
    pub fn compute(
        label: &str,
        records: &[PredictionRecord],
        labels: &BTreeMap<String, usize>,
        class_count: usize,
        topk_fraction: f64,
    ) -> Result<Self> {
        Self::compute_in(label, records, labels, class_count, topk_fraction, TopkPool::All)
    }

    pub fn compute_in(
        label: &str,
        records: &[PredictionRecord],
        labels: &BTreeMap<String, usize>,
        class_count: usize,
        topk_fraction: f64,
        topk_pool: TopkPool,
    ) -> Result<Self> {
        let truth = records
            .iter()
            .map(|r| labels.get(&r.note_id).copied().ok_or_else(|| Error::UnknownId(format!("label for `{}`", r.note_id))))
            .collect::<Result<Vec<_>>>()?;
        for r in records {
            if r.probs.len() != class_count {
                return Err(Error::DimensionMismatch { left: class_count, right: r.probs.len() });
            }
        }
        let preds: Vec<usize> = records.iter().map(|r| r.predicted_class).collect();
        let f = f1_scores(&preds, &truth, class_count)?;
        let probs: Vec<Vec<f64>> = records.iter().map(|r| r.probs.clone()).collect();
        let auroc = match auroc(&probs, &truth, class_count) {
            Ok(v) => Some(v),
            Err(Error::AurocUndefined) => {
                log::warn!("{label}: AUROC undefined on a single-class evaluation set");
                None
            }
            Err(e) => return Err(e),
        };
        let topk = (0..class_count)
            .map(|c| topk_precision_recall_in(records, &truth, c, topk_fraction, topk_pool))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: label.to_string(),
            n: records.len(),
            auroc,
            micro_f1: f.micro,
            macro_f1: f.macro_f1,
            per_class: f.per_class,
            topk_fraction,
            topk_pool,
            topk,
            confidence_filter: None,
        })
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "-".into())
}

/// One summary row per report, then a per-class block for each.
pub fn render_text(reports: &[MetricReport]) -> String {
    let w = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<w$}  {:>6}  {:>7}  {:>8}  {:>8}", "model", "n", "AUROC", "MicroF1", "MacroF1");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<w$}  {:>6}  {:>7}  {:>8}  {:>8}",
            r.label,
            r.n,
            opt_pct(r.auroc),
            pct(r.micro_f1),
            pct(r.macro_f1)
        );
    }
    for r in reports {
        let top = format!("{}%", (r.topk_fraction * 100.0).round());
        let _ = writeln!(out, "\n{}", r.label);
        let _ = writeln!(
            out,
            "{:>5}  {:>9}  {:>7}  {:>7}  {:>9}  {:>9}",
            "class",
            "precision",
            "recall",
            "f1",
            format!("P@top{top}"),
            format!("R@top{top}")
        );
        for (c, (prf, t)) in r.per_class.iter().zip(&r.topk).enumerate() {
            let _ = writeln!(
                out,
                "{:>5}  {:>9}  {:>7}  {:>7}  {:>9}  {:>9}",
                c,
                pct(prf.precision),
                pct(prf.recall),
                pct(prf.f1),
                pct(t.precision),
                opt_pct(t.recall)
            );
        }
        if let Some(cf) = &r.confidence_filter {
            let _ = writeln!(out, "confidence-increase filter kept {} notes", cf.kept.len());
            for (c, p) in cf.precision.iter().enumerate() {
                let _ = writeln!(out, "{c:>5}  {:>9}", opt_pct(*p));
            }
        }
    }
    out
}
