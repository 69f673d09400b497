//! Stage computations over in-memory values. File handling lives in the
//! parent module, so reading a stage's inputs back from disk and keeping them
//! in memory give the same results.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::OutcomeIndex;
use crate::embedding::{Embedder, EmbeddingStore};
use crate::error::{Error, Result};
use crate::evaluation::{
    confidence_increase_filter, cross_validate, f1_scores, retrieval_precision_at_k, CrossValidation, MetricReport,
};
use crate::judgments::{triples_from_judgments, Judgments};
use crate::mesh::MeshDictionary;
use crate::negation::NegationScoper;
use crate::note::{build_query, CaseNote, Query};
use crate::pipeline::config::EvalConfig;
use crate::predictor::l2r::{candidate_labels, train_l2r, Candidate, L2rEpoch, L2rExample};
use crate::predictor::model::PredictorModel;
use crate::predictor::train::{train_head, Example, TrainConfig};
use crate::predictor::{Evidence, PredictionRecord};
use crate::rerank::{pair_features, pool_candidates, rerank, EvidenceSet, LogisticPairModel, PairScore, PairScorer};
use crate::retrieval::biencoder::{train_biencoder, BiEncoderConfig, ProjectionPair};
use crate::retrieval::dense::dense_retrieve;
use crate::retrieval::sparse::SparseSearcher;
use crate::retrieval::{RankedEntry, RankedList, Stage};

/// Note ids by role. Every list is sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Notes without a label: predicted, never trained on or scored.
    pub unlabeled: Vec<String>,
}

impl Split {
    pub fn predict_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.test.iter().chain(&self.unlabeled).cloned().collect();
        ids.sort();
        ids
    }
}

pub fn labels_of(notes: &[CaseNote]) -> BTreeMap<String, usize> {
    notes.iter().filter_map(|n| n.label.map(|l| (n.note_id.clone(), l))).collect()
}

/// Per class, holds out `round(fraction · n_c)` shuffled ids, always leaving
/// at least one behind. Returns `(kept, held)`, both sorted.
pub fn stratified_holdout(
    ids: &[String],
    labels: &BTreeMap<String, usize>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for id in ids {
        let l = labels.get(id).ok_or_else(|| Error::UnknownId(format!("label for `{id}`")))?;
        by_class.entry(*l).or_default().push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for (_, mut members) in by_class {
        members.sort();
        members.shuffle(&mut rng);
        let n = members.len();
        let h = ((fraction * n as f64).round() as usize).min(n - 1);
        held.extend(members.drain(..h));
        kept.extend(members);
    }
    kept.sort();
    held.sort();
    Ok((kept, held))
}

pub fn split_notes(notes: &[CaseNote], test_fraction: f64, seed: u64) -> Result<Split> {
    let labels = labels_of(notes);
    let labeled: Vec<String> = labels.keys().cloned().collect();
    let (train, test) = stratified_holdout(&labeled, &labels, test_fraction, seed)?;
    let mut unlabeled: Vec<String> = notes.iter().filter(|n| n.label.is_none()).map(|n| n.note_id.clone()).collect();
    unlabeled.sort();
    if train.is_empty() {
        return Err(Error::EmptyInput("labeled training notes"));
    }
    Ok(Split { train, test, unlabeled })
}

pub fn build_queries(notes: &[CaseNote], dict: &MeshDictionary, scoper: &NegationScoper) -> Result<Vec<Query>> {
    notes.par_iter().map(|n| build_query(n, dict, scoper)).collect()
}

/// Embeds the index documents (title and body) and the notes (raw text).
pub fn embed_inputs(
    index: &OutcomeIndex,
    notes: &[CaseNote],
    embedder: &dyn Embedder,
    batch: usize,
) -> Result<(EmbeddingStore, EmbeddingStore)> {
    let doc_texts: Vec<(&str, String)> = index.documents.values().map(|d| (d.doc_id.as_str(), d.text())).collect();
    let docs = EmbeddingStore::embed_all(embedder, doc_texts.iter().map(|(i, t)| (*i, t.as_str())), batch)?;
    let note_texts: Vec<(&str, String)> = notes.iter().map(|n| (n.note_id.as_str(), n.raw_text())).collect();
    let notes = EmbeddingStore::embed_all(embedder, note_texts.iter().map(|(i, t)| (*i, t.as_str())), batch)?;
    if !docs.is_empty() && !notes.is_empty() && docs.dim() != notes.dim() {
        return Err(Error::DimensionMismatch { left: docs.dim(), right: notes.dim() });
    }
    Ok((docs, notes))
}

/// Judgments for the given queries over documents present in `docs`.
pub fn restrict_judgments(j: &Judgments, queries: &[String], docs: &EmbeddingStore) -> Judgments {
    let mut out = Judgments::new();
    for q in queries {
        if let Some(row) = j.for_query(q) {
            for (d, &r) in row {
                if docs.get(d).is_some() {
                    out.insert(q, d, r);
                }
            }
        }
    }
    out
}

pub fn train_projection(
    judgments: &Judgments,
    train_ids: &[String],
    notes: &EmbeddingStore,
    docs: &EmbeddingStore,
    cfg: &BiEncoderConfig,
    triples_per_query: usize,
    seed: u64,
) -> Result<ProjectionPair> {
    let restricted = restrict_judgments(judgments, train_ids, docs);
    let triples = triples_from_judgments(&restricted, triples_per_query, seed);
    log::info!("bi-encoder: {} training triples", triples.len());
    train_biencoder(&triples, notes, docs, &BiEncoderConfig { seed, ..cfg.clone() })
}

/// Sparse and dense top-`n` lists for every query, in query order.
pub fn retrieve_all(
    queries: &[Query],
    index: &OutcomeIndex,
    note_dense: &EmbeddingStore,
    doc_dense: &EmbeddingStore,
    n: usize,
) -> Result<(Vec<RankedList>, Vec<RankedList>)> {
    let searcher = SparseSearcher::new(index);
    let pairs = queries
        .par_iter()
        .map(|q| {
            let sparse = searcher.retrieve(q, n)?;
            let dense = dense_retrieve(&q.note_id, note_dense.require(&q.note_id)?, doc_dense, n)?;
            Ok((sparse, dense))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Candidate pool per note from aligned sparse and dense lists.
pub fn candidate_pools(sparse: &[RankedList], dense: &[RankedList], pool_n: usize) -> Result<Vec<(String, BTreeSet<String>)>> {
    if sparse.len() != dense.len() {
        return Err(Error::DimensionMismatch { left: sparse.len(), right: dense.len() });
    }
    sparse
        .iter()
        .zip(dense)
        .map(|(s, d)| {
            if s.note_id != d.note_id {
                return Err(Error::Corrupt(format!("sparse list `{}` aligned with dense list `{}`", s.note_id, d.note_id)));
            }
            Ok((s.note_id.clone(), pool_candidates(s, d, pool_n)?))
        })
        .collect()
}

/// A note's whole candidate pool after rescoring, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedPool {
    pub note_id: String,
    pub items: Vec<PairScore>,
}

impl RerankedPool {
    pub fn ranking(&self) -> RankedList {
        RankedList {
            note_id: self.note_id.clone(),
            stage: Stage::Reranked,
            entries: self.items.iter().map(|p| RankedEntry { doc_id: p.doc_id.clone(), score: p.relevance }).collect(),
        }
    }

    pub fn evidence_set(&self, k: usize) -> EvidenceSet {
        EvidenceSet { note_id: self.note_id.clone(), items: self.items.iter().take(k).cloned().collect(), k }
    }
}

fn query_map(queries: &[Query]) -> BTreeMap<&str, &Query> {
    queries.iter().map(|q| (q.note_id.as_str(), q)).collect()
}

/// Notes are scored one after another; the scorer parallelizes within a note.
pub fn rerank_all(
    queries: &[Query],
    pools: &[(String, BTreeSet<String>)],
    index: &OutcomeIndex,
    scorer: &dyn PairScorer,
) -> Result<Vec<RerankedPool>> {
    let qmap = query_map(queries);
    pools
        .iter()
        .map(|(id, pool)| {
            let q = qmap.get(id.as_str()).ok_or_else(|| Error::UnknownId(format!("query `{id}`")))?;
            Ok(RerankedPool { note_id: id.clone(), items: rerank(q, pool, index, scorer)? })
        })
        .collect()
}

/// Judged (pool document, note) pairs of the given notes as pair-model
/// training examples.
#[allow(clippy::too_many_arguments)]
pub fn pair_examples(
    queries: &[Query],
    pools: &[(String, BTreeSet<String>)],
    index: &OutcomeIndex,
    judgments: &Judgments,
    note_ids: &[String],
    notes: &EmbeddingStore,
    docs: &EmbeddingStore,
) -> Result<Vec<([f64; 3], bool)>> {
    let qmap = query_map(queries);
    let wanted: BTreeSet<&str> = note_ids.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for (id, pool) in pools.iter().filter(|(id, _)| wanted.contains(id.as_str())) {
        let Some(row) = judgments.for_query(id) else { continue };
        let q = qmap.get(id.as_str()).ok_or_else(|| Error::UnknownId(format!("query `{id}`")))?;
        let ne = notes.require(id)?;
        for d in pool {
            if let Some(&r) = row.get(d) {
                let doc = index.documents.get(d).ok_or_else(|| Error::UnknownId(d.clone()))?;
                out.push((pair_features(q, doc, &index.stats, ne.as_slice(), docs.require(d)?.as_slice())?, r > 0));
            }
        }
    }
    Ok(out)
}

pub fn train_pair_model(examples: &[([f64; 3], bool)], epochs: usize, lr: f64) -> Result<LogisticPairModel> {
    let m = LogisticPairModel::train(examples, epochs, lr)?;
    log::info!("pair model: {} examples, cross-entropy {:.4}", examples.len(), m.cross_entropy(examples));
    Ok(m)
}

pub type PoolMap = BTreeMap<String, RerankedPool>;

pub fn pool_map(pools: Vec<RerankedPool>) -> PoolMap {
    pools.into_iter().map(|p| (p.note_id.clone(), p)).collect()
}

fn pool_of<'a>(pools: &'a PoolMap, id: &str) -> Result<&'a RerankedPool> {
    pools.get(id).ok_or_else(|| Error::MissingArtifact { path: format!("reranked pool for `{id}`"), stage: "rerank" })
}

/// The first `k` reranked documents, weighted by relevance.
pub fn evidence<'a>(pool: &'a RerankedPool, k: usize, docs: &'a EmbeddingStore) -> Result<Vec<Evidence<'a>>> {
    pool.items
        .iter()
        .take(k)
        .map(|p| Ok(Evidence { doc_id: &p.doc_id, embedding: docs.require(&p.doc_id)?.as_slice(), weight: p.relevance }))
        .collect()
}

pub fn examples<'a>(
    ids: &'a [String],
    labels: &BTreeMap<String, usize>,
    pools: &'a PoolMap,
    notes: &'a EmbeddingStore,
    docs: &'a EmbeddingStore,
    k: usize,
) -> Result<Vec<Example<'a>>> {
    ids.iter()
        .map(|id| {
            Ok(Example {
                note_id: id,
                note: notes.require(id)?.as_slice(),
                evidence: evidence(pool_of(pools, id)?, k, docs)?,
                label: *labels.get(id).ok_or_else(|| Error::UnknownId(format!("label for `{id}`")))?,
            })
        })
        .collect()
}

pub fn train_model(
    cfg: &TrainConfig,
    ids: &[String],
    labels: &BTreeMap<String, usize>,
    pools: &PoolMap,
    notes: &EmbeddingStore,
    docs: &EmbeddingStore,
    class_count: usize,
) -> Result<PredictorModel> {
    let ex = examples(ids, labels, pools, notes, docs, cfg.k)?;
    let out = train_head(&ex, class_count, cfg)?;
    log::info!(
        "{}: {} epochs, final mean weighted CE {:.4}",
        cfg.strategy,
        cfg.epochs,
        out.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(PredictorModel {
        strategy: cfg.strategy,
        embedding_dim: notes.dim(),
        head: out.head,
        class_weights: out.class_weights,
        config: cfg.clone(),
        l2r: None,
    })
}

pub fn predict_all(
    model: &PredictorModel,
    ids: &[String],
    pools: &PoolMap,
    notes: &EmbeddingStore,
    docs: &EmbeddingStore,
) -> Result<Vec<PredictionRecord>> {
    ids.par_iter()
        .map(|id| {
            let note = notes.require(id)?.as_slice();
            if let Some(state) = &model.l2r {
                let cands = candidates(pool_of(pools, id)?, state.candidate_count, docs)?;
                return model.predict_l2r(id, note, &cands);
            }
            let ev = if model.strategy.uses_evidence() { evidence(pool_of(pools, id)?, model.config.k, docs)? } else { Vec::new() };
            model.predict(id, note, &ev)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub grad_accumulation: usize,
    pub k: usize,
    pub validation_micro_f1: f64,
    pub model: String,
}

/// Trains one model per `(lr, grad_accumulation, k)` on `fit` and scores it
/// by micro F1 on `val`, in grid order.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    configs: &[TrainConfig],
    fit: &[String],
    val: &[String],
    labels: &BTreeMap<String, usize>,
    pools: &PoolMap,
    notes: &EmbeddingStore,
    docs: &EmbeddingStore,
    class_count: usize,
) -> Result<Vec<(PredictorModel, f64)>> {
    configs
        .iter()
        .map(|cfg| {
            let model = train_model(cfg, fit, labels, pools, notes, docs, class_count)?;
            let preds = predict_all(&model, val, pools, notes, docs)?;
            let truth = val.iter().map(|id| labels[id]).collect::<Vec<_>>();
            let f = f1_scores(&preds.iter().map(|p| p.predicted_class).collect::<Vec<_>>(), &truth, class_count)?;
            Ok((model, f.micro))
        })
        .collect()
}

/// Index of the best score; the earliest wins ties.
pub fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// The first `count` reranked documents as L2R candidates.
pub fn candidates<'a>(pool: &'a RerankedPool, count: usize, docs: &'a EmbeddingStore) -> Result<Vec<Candidate<'a>>> {
    pool.items
        .iter()
        .take(count)
        .map(|p| Ok(Candidate { doc_id: &p.doc_id, embedding: docs.require(&p.doc_id)?.as_slice() }))
        .collect()
}

pub fn l2r_examples<'a>(
    ids: &'a [String],
    labels: &BTreeMap<String, usize>,
    pools: &'a PoolMap,
    notes: &'a EmbeddingStore,
    docs: &'a EmbeddingStore,
    count: usize,
) -> Result<Vec<L2rExample<'a>>> {
    ids.iter()
        .map(|id| {
            Ok(L2rExample {
                note_id: id,
                note: notes.require(id)?.as_slice(),
                candidates: candidates(pool_of(pools, id)?, count, docs)?,
                label: *labels.get(id).ok_or_else(|| Error::UnknownId(format!("label for `{id}`")))?,
            })
        })
        .collect()
}

/// Joint-training knobs taken from the run config rather than the warm-start model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2rSettings {
    pub epochs: usize,
    pub candidate_count: usize,
    pub lambda_early: f64,
    pub fixed_labels: bool,
    /// `None` keeps the warm-start model's value.
    pub lr: Option<f64>,
    pub grad_accumulation: Option<usize>,
}

/// Joint training warm-started from `primary`; `baseline` must be NoteOnly.

pub fn train_l2r_model(
    primary: &PredictorModel,
    baseline: &PredictorModel,
    examples: &[L2rExample],
    class_count: usize,
    settings: L2rSettings,
) -> Result<(PredictorModel, Vec<L2rEpoch>)> {
    if baseline.strategy != crate::predictor::AggregationStrategy::NoteOnly {
        return Err(Error::InvalidArgument(format!("L2R baseline must be note_only, got {}", baseline.strategy)));
    }
    let cfg = TrainConfig {
        epochs: settings.epochs,
        candidate_count: settings.candidate_count,
        lambda_early: settings.lambda_early,
        lr: settings.lr.unwrap_or(primary.config.lr),
        grad_accumulation: settings.grad_accumulation.unwrap_or(primary.config.grad_accumulation),
        ..primary.config.clone()
    };
    cfg.validate()?;
    let fixed = if settings.fixed_labels {
        Some(
            examples
                .par_iter()
                .map(|ex| candidate_labels(&primary.head, cfg.strategy, &baseline.head, ex))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let out = train_l2r(examples, class_count, primary.head.clone(), &baseline.head, &cfg, fixed.as_deref())?;
    let model = PredictorModel {
        strategy: cfg.strategy,
        embedding_dim: primary.embedding_dim,
        head: out.head,
        class_weights: out.class_weights,
        config: cfg,
        l2r: Some(out.state),
    };
    Ok((model, out.history))
}

/// Metrics over the records whose note has a label.
pub fn evaluate_records(
    label: &str,
    records: &[PredictionRecord],
    labels: &BTreeMap<String, usize>,
    class_count: usize,
    eval: &EvalConfig,
    baseline: Option<&[PredictionRecord]>,
) -> Result<MetricReport> {
    let scored: Vec<PredictionRecord> = records.iter().filter(|r| labels.contains_key(&r.note_id)).cloned().collect();
    let mut report = MetricReport::compute_in(label, &scored, labels, class_count, eval.topk_fraction, eval.topk_pool)?;
    if let Some(base) = baseline {
        report.confidence_filter = Some(confidence_increase_filter(&scored, base, labels, class_count, eval.ci_threshold)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    /// Notes with at least one judgment.
    pub notes: usize,
    pub sparse: f64,
    pub dense: f64,
    pub reranked: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_validation: Option<CrossValidation>,
}

/// Mean precision@k over the lists whose note is in `ids`.
pub fn mean_precision_at_k(lists: &[RankedList], judgments: &Judgments, k: usize, ids: &BTreeSet<&str>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for l in lists.iter().filter(|l| ids.contains(l.note_id.as_str())) {
        total += retrieval_precision_at_k(l, judgments, k)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("judged retrieval lists"));
    }
    Ok(total / n as f64)
}

/// Stage-by-stage precision@k, plus a k-fold estimate of the reranked
/// precision where `fold_eval(train, test)` may refit the scorer.
pub fn retrieval_report<F>(
    sparse: &[RankedList],
    dense: &[RankedList],
    reranked: &[RankedList],
    judgments: &Judgments,
    k: usize,
    folds: usize,
    fold_eval: F,
) -> Result<RetrievalReport>
where
    F: FnMut(&[String], &[String]) -> Result<f64>,
{
    let judged: Vec<String> = sparse.iter().map(|l| l.note_id.clone()).filter(|id| judgments.for_query(id).is_some()).collect();
    let ids: BTreeSet<&str> = judged.iter().map(String::as_str).collect();
    let cv = if judged.len() >= folds {
        Some(cross_validate(&judged, folds, fold_eval)?)
    } else {
        log::warn!("{} judged notes is fewer than {folds} folds; skipping cross-validation", judged.len());
        None
    };
    Ok(RetrievalReport {
        k,
        notes: judged.len(),
        sparse: mean_precision_at_k(sparse, judgments, k, &ids)?,
        dense: mean_precision_at_k(dense, judgments, k, &ids)?,
        reranked: mean_precision_at_k(reranked, judgments, k, &ids)?,
        cross_validation: cv,
    })
}

/// Evidence sets as used by a model's predictions.
pub fn evidence_sets(records: &[PredictionRecord]) -> Vec<EvidenceSet> {
    records
        .iter()
        .map(|r| EvidenceSet {
            note_id: r.note_id.clone(),
            items: r.evidence.iter().map(|e| PairScore { doc_id: e.doc_id.clone(), relevance: e.weight }).collect(),
            k: r.evidence.len(),
        })
        .collect()
}
