//! Outcome and retrieval metrics.

pub mod diversity;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judgments::Judgments;
use crate::predictor::PredictionRecord;
use crate::retrieval::RankedList;

pub use diversity::{diversity_report, DiversityEntry, DiversityReport};
pub use report::MetricReport;

/// Tolerance absorbed before rounding `fraction · n` up, so that e.g.
/// `0.1 · 30` selects 3 records rather than 4.
const CEIL_SLACK: f64 = 1e-9;

/// Mann–Whitney AUROC from mid-ranks: ties count one half.
pub fn auroc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { left: scores.len(), right: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined);
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {s} is not comparable")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Binary tasks score class 1; otherwise one-vs-rest macro average over the
/// classes present in `labels` (classes with no positives are skipped).
pub fn auroc(probs: &[Vec<f64>], labels: &[usize], class_count: usize) -> Result<f64> {
    if class_count == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        return auroc_binary(&s, &labels.iter().map(|&l| l == 1).collect::<Vec<_>>());
    }
    let mut values = Vec::new();
    for c in 0..class_count {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        match auroc_binary(&s, &labels.iter().map(|&l| l == c).collect::<Vec<_>>()) {
            Ok(v) => values.push(v),
            Err(Error::AurocUndefined) => log::warn!("class {c}: one-vs-rest AUROC undefined, excluded from macro average"),
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::AurocUndefined);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassPrf>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

/// Confusion-matrix F1. Undefined precision, recall or F1 is reported as 0.
pub fn f1_scores(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<F1Scores> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch { left: predictions.len(), right: labels.len() });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    let (mut tp, mut fp, mut fnv) = (vec![0usize; class_count], vec![0usize; class_count], vec![0usize; class_count]);
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= class_count || l >= class_count {
            return Err(Error::InvalidArgument(format!("class index out of range 0..{class_count}")));
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnv[l] += 1;
        }
    }
    let per_class: Vec<ClassPrf> = (0..class_count)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fnv[c]);
            ClassPrf { precision, recall, f1: f1(precision, recall) }
        })
        .collect();
    let (stp, sfp, sfn) = (tp.iter().sum(), fp.iter().sum::<usize>(), fnv.iter().sum::<usize>());
    let micro = f1(ratio(stp, stp + sfp), ratio(stp, stp + sfn));
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / class_count as f64;
    Ok(F1Scores { micro, macro_f1, per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub precision: f64,
    /// `None` when no record carries the class label.
    pub recall: Option<f64>,
    pub selected: usize,
}

/// Which records compete for a class's top-fraction slots.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopkPool {
    /// Every record, ranked by its probability for the class.
    #[default]
    All,
    /// Only records whose argmax is the class; `n` is their count.
    Predicted,
}

/// Precision and recall over the `⌈fraction · n⌉` records most confident in
/// class `c`, drawn from all records (ties by note id).
pub fn topk_precision_recall(records: &[PredictionRecord], labels: &[usize], class: usize, fraction: f64) -> Result<TopK> {
    topk_precision_recall_in(records, labels, class, fraction, TopkPool::All)
}

/// As [`topk_precision_recall`] with an explicit candidate pool. An empty
/// `Predicted` pool selects nothing and reports precision 0.
pub fn topk_precision_recall_in(
    records: &[PredictionRecord],
    labels: &[usize],
    class: usize,
    fraction: f64,
    pool: TopkPool,
) -> Result<TopK> {
    if records.is_empty() {
        return Err(Error::EmptyInput("prediction records"));
    }
    if records.len() != labels.len() {
        return Err(Error::DimensionMismatch { left: records.len(), right: labels.len() });
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("top-k fraction must be in (0, 1], got {fraction}")));
    }
    let mut order: Vec<usize> = (0..records.len())
        .filter(|&i| pool == TopkPool::All || records[i].predicted_class == class)
        .collect();
    let total = labels.iter().filter(|&&l| l == class).count();
    let n = order.len();
    if n == 0 {
        return Ok(TopK { precision: 0.0, recall: (total > 0).then_some(0.0), selected: 0 });
    }
    let take = ((fraction * n as f64 - CEIL_SLACK).ceil() as usize).clamp(1, n);
    order.sort_by(|&a, &b| {
        records[b].probs[class].total_cmp(&records[a].probs[class]).then_with(|| records[a].note_id.cmp(&records[b].note_id))
    });
    let hits = order[..take].iter().filter(|&&i| labels[i] == class).count();
    Ok(TopK { precision: hits as f64 / take as f64, recall: (total > 0).then(|| hits as f64 / total as f64), selected: take })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceFilter {
    pub kept: Vec<String>,
    /// Per predicted class; `None` when no kept note predicts it.
    pub precision: Vec<Option<f64>>,
}

/// Keeps notes where the augmented model is more than `threshold` (relative)
/// more confident in its predicted class than the baseline.
pub fn confidence_increase_filter(
    augmented: &[PredictionRecord],
    baseline: &[PredictionRecord],
    labels: &BTreeMap<String, usize>,
    class_count: usize,
    threshold: f64,
) -> Result<ConfidenceFilter> {
    let base: BTreeMap<&str, &PredictionRecord> = baseline.iter().map(|r| (r.note_id.as_str(), r)).collect();
    let mut kept = Vec::new();
    let (mut hit, mut tot) = (vec![0usize; class_count], vec![0usize; class_count]);
    for r in augmented {
        let b = base.get(r.note_id.as_str()).ok_or_else(|| Error::UnknownId(format!("baseline record for `{}`", r.note_id)))?;
        let c = r.predicted_class;
        if r.probs[c] > b.probs[c] * (1.0 + threshold) {
            let label = *labels.get(&r.note_id).ok_or_else(|| Error::UnknownId(format!("label for `{}`", r.note_id)))?;
            kept.push(r.note_id.clone());
            tot[c] += 1;
            hit[c] += usize::from(label == c);
        }
    }
    let precision = (0..class_count).map(|c| (tot[c] > 0).then(|| hit[c] as f64 / tot[c] as f64)).collect();
    Ok(ConfidenceFilter { kept, precision })
}

/// Fraction of the first `k` positions holding a relevant document.
/// Unjudged documents count as irrelevant; short lists are not padded out of
/// the denominator.
pub fn retrieval_precision_at_k(ranking: &RankedList, judgments: &Judgments, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let hits = ranking.doc_ids().take(k).filter(|d| judgments.is_relevant(&ranking.note_id, d)).count();
    Ok(hits as f64 / k as f64)
}

/// Round-robin assignment of the sorted ids to `folds` folds.
pub fn kfold_partition(ids: &[String], folds: usize) -> Result<Vec<Vec<String>>> {
    if folds < 2 || folds > ids.len() {
        return Err(Error::InvalidArgument(format!("cannot split {} items into {folds} folds", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::InvalidArgument("fold ids must be unique".into()));
    }
    let mut out = vec![Vec::new(); folds];
    for (i, id) in sorted.into_iter().enumerate() {
        out[i % folds].push(id);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

/// Calls `eval(train_ids, test_ids)` once per fold and averages.
pub fn cross_validate<F>(ids: &[String], folds: usize, mut eval: F) -> Result<CrossValidation>
where
    F: FnMut(&[String], &[String]) -> Result<f64>,
{
    let parts = kfold_partition(ids, folds)?;
    let mut fold_scores = Vec::with_capacity(folds);
    for i in 0..folds {
        let train: Vec<String> = parts.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, p)| p.iter().cloned()).collect();
        fold_scores.push(eval(&train, &parts[i])?);
    }
    let mean = fold_scores.iter().sum::<f64>() / folds as f64;
    Ok(CrossValidation { fold_scores, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::AggregationStrategy;
    use crate::retrieval::{RankedEntry, Stage};

    fn rec(id: &str, probs: Vec<f64>) -> PredictionRecord {
        PredictionRecord::new(id, probs, &[], AggregationStrategy::NoteOnly)
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc_binary(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc_binary(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auroc_binary(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert!(matches!(auroc_binary(&[0.1, 0.2], &[true, true]), Err(Error::AurocUndefined)));
    }

    #[test]
    fn multiclass_auroc_is_macro_ovr() {
        let probs = vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]];
        assert_eq!(auroc(&probs, &[0, 1, 2], 3).unwrap(), 1.0);
    }

    #[test]
    fn f1_examples() {
        let s = f1_scores(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!((s.micro, s.macro_f1), (1.0, 1.0));
        let s = f1_scores(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(s.micro, 0.5);
        assert!((s.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.per_class[1].f1, 0.0);
        assert!(f1_scores(&[], &[], 2).is_err());
    }

    #[test]
    fn topk_counting() {
        let records: Vec<_> = (0..100).map(|i| rec(&format!("n{i:03}"), vec![1.0 - i as f64 / 100.0, i as f64 / 100.0])).collect();
        // the 10 most class-0-confident are n000..n009; make 7 of them class 0
        let labels: Vec<usize> = (0..100).map(|i| if i < 7 || i >= 50 { 0 } else { 1 }).collect();
        let t = topk_precision_recall(&records, &labels, 0, 0.1).unwrap();
        assert_eq!(t.selected, 10);
        assert!((t.precision - 0.7).abs() < 1e-12);
        assert_eq!(t.recall, Some(7.0 / 57.0));
        let thirty: Vec<_> = records[..30].to_vec();
        assert_eq!(topk_precision_recall(&thirty, &labels[..30], 0, 0.1).unwrap().selected, 3);
        let none = topk_precision_recall(&records[..5], &[0; 5], 1, 0.1).unwrap();
        assert_eq!(none.recall, None);
    }

    #[test]
    fn topk_predicted_pool() {
        let records: Vec<_> = (0..100).map(|i| rec(&format!("n{i:03}"), vec![1.0 - i as f64 / 100.0, i as f64 / 100.0])).collect();
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 3 == 0)).collect();
        // argmax is class 0 for n000..n050 (n050 ties, lowest index wins): 51 candidates, 6 selected
        let t = topk_precision_recall_in(&records, &labels, 0, 0.1, TopkPool::Predicted).unwrap();
        assert_eq!(t.selected, 6);
        assert!((t.precision - 4.0 / 6.0).abs() < 1e-12);
        let sure: Vec<_> = records.iter().map(|r| rec(&r.note_id, vec![1.0, 0.0])).collect();
        let empty = topk_precision_recall_in(&sure, &labels, 1, 0.1, TopkPool::Predicted).unwrap();
        assert_eq!((empty.selected, empty.precision, empty.recall), (0, 0.0, Some(0.0)));
    }

    #[test]
    fn confidence_threshold_is_strict() {
        let labels = BTreeMap::from([("a".to_string(), 0), ("b".to_string(), 0)]);
        let base = [rec("a", vec![0.5, 0.5]), rec("b", vec![0.5, 0.5])];
        let aug = [rec("a", vec![0.56, 0.44]), rec("b", vec![0.55, 0.45])];
        let f = confidence_increase_filter(&aug, &base, &labels, 2, 0.10).unwrap();
        assert_eq!(f.kept, ["a"]);
        assert_eq!(f.precision, [Some(1.0), None]);
    }

    #[test]
    fn precision_at_k_counts_relevant() {
        let mut j = Judgments::new();
        let entries: Vec<RankedEntry> = (0..10).map(|i| RankedEntry { doc_id: format!("d{i}"), score: -(i as f64) }).collect();
        for i in 0..4 {
            j.insert("q", &format!("d{i}"), 1);
        }
        j.insert("q", "d5", 0);
        let list = RankedList { note_id: "q".into(), stage: Stage::Reranked, entries };
        assert!((retrieval_precision_at_k(&list, &j, 10).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(retrieval_precision_at_k(&list, &j, 2).unwrap(), 1.0);
        assert!(retrieval_precision_at_k(&list, &j, 0).is_err());
    }

    #[test]
    fn folds_cover_each_id_once() {
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let parts = kfold_partition(&ids, 5).unwrap();
        assert!(parts.iter().all(|p| p.len() == 2));
        let cv = cross_validate(&ids, 5, |train, test| {
            assert_eq!(train.len() + test.len(), 10);
            assert!(test.iter().all(|t| !train.contains(t)));
            Ok(test.len() as f64)
        })
        .unwrap();
        assert_eq!(cv.mean, 2.0);
        assert!(kfold_partition(&ids, 11).is_err());
    }
}
