//! Candidate pooling, pair rescoring and top-k evidence selection.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, OutcomeIndex, TfidfStats};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::note::Query;
use crate::retrieval::dense::euclidean;
use crate::retrieval::sparse::{cosine, tfidf_vector};
use crate::retrieval::RankedList;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub doc_id: String,
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub note_id: String,
    pub items: Vec<PairScore>,
    pub k: usize,
}

/// Union of the top `pool_n` ids of each list.
pub fn pool_candidates(sparse: &RankedList, dense: &RankedList, pool_n: usize) -> Result<BTreeSet<String>> {
    if pool_n == 0 {
        return Err(Error::InvalidArgument("pool_n must be >= 1".into()));
    }
    Ok(sparse.doc_ids().take(pool_n).chain(dense.doc_ids().take(pool_n)).map(str::to_string).collect())
}

/// The cross-encoder slot: scores `(query, document)` pairs with a relevance
/// probability. Implementations must return one score per document, in order.
pub trait PairScorer: Send + Sync {
    fn score_pairs(&self, query: &Query, docs: &[&Document]) -> Result<Vec<f64>>;
}

/// Deterministic fallback: TF-IDF cosine between the query's and the
/// document's MeSH vectors, already in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LexicalScorer {
    stats: TfidfStats,
}

impl LexicalScorer {
    pub fn new(index: &OutcomeIndex) -> Self {
        Self { stats: index.stats.clone() }
    }

    pub fn from_stats(stats: TfidfStats) -> Self {
        Self { stats }
    }

    pub fn score_one(&self, query: &Query, doc: &Document) -> f64 {
        let q = tfidf_vector(&query.mesh_terms, &self.stats);
        cosine(&q, &tfidf_vector(&doc.mesh_terms, &self.stats))
    }
}

impl PairScorer for LexicalScorer {
    fn score_pairs(&self, query: &Query, docs: &[&Document]) -> Result<Vec<f64>> {
        let q = tfidf_vector(&query.mesh_terms, &self.stats);
        Ok(docs.par_iter().map(|d| cosine(&q, &tfidf_vector(&d.mesh_terms, &self.stats))).collect())
    }
}

fn sort_scores(scores: &mut [PairScore]) {
    scores.sort_by(|a, b| b.relevance.total_cmp(&a.relevance).then_with(|| a.doc_id.cmp(&b.doc_id)));
}

/// Scores every pooled document; all-or-nothing per note.
pub fn rerank(query: &Query, pool: &BTreeSet<String>, index: &OutcomeIndex, scorer: &dyn PairScorer) -> Result<Vec<PairScore>> {
    let docs = pool
        .iter()
        .map(|id| index.documents.get(id).ok_or_else(|| Error::UnknownId(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    let raw = scorer.score_pairs(query, &docs).map_err(|e| match e {
        e @ Error::Scorer { .. } => e,
        other => Error::Scorer { doc_ids: pool.iter().cloned().collect(), message: other.to_string() },
    })?;
    if raw.len() != docs.len() {
        return Err(Error::Scorer {
            doc_ids: pool.iter().cloned().collect(),
            message: format!("scorer returned {} scores for {} documents", raw.len(), docs.len()),
        });
    }
    let mut out = Vec::with_capacity(raw.len());
    for (doc, s) in docs.iter().zip(raw) {
        if !s.is_finite() {
            return Err(Error::Scorer { doc_ids: vec![doc.doc_id.clone()], message: format!("non-finite score {s}") });
        }
        let relevance = if (0.0..=1.0).contains(&s) {
            s
        } else {
            log::warn!("note `{}` doc `{}`: scorer output {s} clamped to [0, 1]", query.note_id, doc.doc_id);
            s.clamp(0.0, 1.0)
        };
        out.push(PairScore { doc_id: doc.doc_id.clone(), relevance });
    }
    sort_scores(&mut out);
    Ok(out)
}

pub fn select_top_k(note_id: &str, scores: &[PairScore], k: usize) -> Result<EvidenceSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be a positive integer".into()));
    }
    Ok(EvidenceSet { note_id: note_id.to_string(), items: scores.iter().take(k).cloned().collect(), k })
}

/// `[tfidf cosine, −euclidean distance, shared-term count]`.
pub fn pair_features(query: &Query, doc: &Document, stats: &TfidfStats, note_emb: &[f64], doc_emb: &[f64]) -> Result<[f64; 3]> {
    let q = tfidf_vector(&query.mesh_terms, stats);
    let d = tfidf_vector(&doc.mesh_terms, stats);
    let overlap = q.iter().filter(|(t, _)| d.get(t) > 0.0).count() as f64;
    Ok([cosine(&q, &d), -euclidean(note_emb, doc_emb)?, overlap])
}

/// Logistic regression over [`pair_features`], trained with cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticPairModel {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub weights: [f64; 3],
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticPairModel {
    /// Full-batch gradient descent on mean binary cross-entropy over
    /// standardized features.
    pub fn train(examples: &[([f64; 3], bool)], epochs: usize, lr: f64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("pair-scorer training examples"));
        }
        let n = examples.len() as f64;
        let mut mean = [0.0; 3];
        let mut scale = [0.0; 3];
        for (x, _) in examples {
            (0..3).for_each(|j| mean[j] += x[j] / n);
        }
        for (x, _) in examples {
            (0..3).for_each(|j| scale[j] += (x[j] - mean[j]).powi(2) / n);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
        let mut model = Self { mean, scale, weights: [0.0; 3], bias: 0.0 };
        for _ in 0..epochs {
            let mut gw = [0.0; 3];
            let mut gb = 0.0;
            for (x, y) in examples {
                let z = model.standardize(x);
                let err = model.prob_from_standardized(&z) - if *y { 1.0 } else { 0.0 };
                (0..3).for_each(|j| gw[j] += err * z[j] / n);
                gb += err / n;
            }
            (0..3).for_each(|j| model.weights[j] -= lr * gw[j]);
            model.bias -= lr * gb;
        }
        Ok(model)
    }

    fn standardize(&self, x: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|j| (x[j] - self.mean[j]) / self.scale[j])
    }

    fn prob_from_standardized(&self, z: &[f64; 3]) -> f64 {
        sigmoid(self.bias + (0..3).map(|j| self.weights[j] * z[j]).sum::<f64>())
    }

    pub fn prob(&self, x: &[f64; 3]) -> f64 {
        self.prob_from_standardized(&self.standardize(x))
    }

    pub fn cross_entropy(&self, examples: &[([f64; 3], bool)]) -> f64 {
        let n = examples.len() as f64;
        examples
            .iter()
            .map(|(x, y)| {
                let p = self.prob(x).clamp(1e-12, 1.0 - 1e-12);
                if *y { -p.ln() } else { -(1.0 - p).ln() }
            })
            .sum::<f64>()
            / n
    }
}

pub struct LogisticScorer<'a> {
    pub model: LogisticPairModel,
    pub stats: TfidfStats,
    pub notes: &'a EmbeddingStore,
    pub docs: &'a EmbeddingStore,
}

impl PairScorer for LogisticScorer<'_> {
    fn score_pairs(&self, query: &Query, docs: &[&Document]) -> Result<Vec<f64>> {
        let q = self.notes.require(&query.note_id)?;
        docs.iter()
            .map(|d| {
                let e = self.docs.require(&d.doc_id)?;
                let x = pair_features(query, d, &self.stats, q.as_slice(), e.as_slice())?;
                Ok(self.model.prob(&x))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_index, OutcomeSpec};
    use crate::mesh::TermCounts;
    use crate::retrieval::{RankedEntry, Stage};

    struct Constant(f64);
    impl PairScorer for Constant {
        fn score_pairs(&self, _: &Query, docs: &[&Document]) -> Result<Vec<f64>> {
            Ok(vec![self.0; docs.len()])
        }
    }

    struct Failing;
    impl PairScorer for Failing {
        fn score_pairs(&self, _: &Query, _: &[&Document]) -> Result<Vec<f64>> {
            Err(Error::protocol("connection reset", None))
        }
    }

    fn list(ids: &[&str], stage: Stage) -> RankedList {
        RankedList {
            note_id: "n".into(),
            stage,
            entries: ids.iter().enumerate().map(|(i, d)| RankedEntry { doc_id: d.to_string(), score: -(i as f64) }).collect(),
        }
    }

    fn index() -> OutcomeIndex {
        let spec = OutcomeSpec {
            outcome_id: "T".into(),
            class_count: 2,
            class_descriptions: vec!["a".into(), "b".into()],
            mesh_queries: vec![vec!["Keep".into()]],
        };
        let docs = [("A", vec!["x", "y"]), ("B", vec!["z"]), ("C", vec!["x"])].map(|(id, t)| {
            let mut mesh: TermCounts = t.into_iter().collect();
            mesh.add("Keep", 1);
            Document { doc_id: id.into(), title: String::new(), body: String::new(), mesh_terms: mesh }
        });
        build_index(docs, &spec).unwrap()
    }

    fn query(terms: &[&str]) -> Query {
        Query { note_id: "n".into(), mesh_terms: terms.iter().collect(), raw_text: String::new(), warning: None }
    }

    #[test]
    fn pool_is_union_of_prefixes() {
        let p = pool_candidates(&list(&["A", "B", "X"], Stage::Sparse), &list(&["B", "C", "Y"], Stage::Dense), 2).unwrap();
        assert_eq!(p.into_iter().collect::<Vec<_>>(), ["A", "B", "C"]);
        let same = list(&["A", "B", "C"], Stage::Sparse);
        assert_eq!(pool_candidates(&same, &same, 2).unwrap().len(), 2);
        let empty = list(&[], Stage::Sparse);
        assert!(pool_candidates(&empty, &empty, 3).unwrap().is_empty());
        assert!(pool_candidates(&empty, &empty, 0).is_err());
    }

    #[test]
    fn lexical_scorer_prefers_overlap() {
        let idx = index();
        let pool: BTreeSet<String> = ["A", "B"].map(String::from).into();
        let out = rerank(&query(&["x", "y"]), &pool, &idx, &LexicalScorer::new(&idx)).unwrap();
        assert_eq!(out[0].doc_id, "A");
        assert!(out[0].relevance > out[1].relevance);
    }

    #[test]
    fn constant_scorer_orders_by_doc_id() {
        let idx = index();
        let pool: BTreeSet<String> = ["C", "A", "B"].map(String::from).into();
        let out = rerank(&query(&["x"]), &pool, &idx, &Constant(0.5)).unwrap();
        assert_eq!(out.iter().map(|s| s.doc_id.as_str()).collect::<Vec<_>>(), ["A", "B", "C"]);
    }

    #[test]
    fn out_of_range_scores_are_clamped() {
        let idx = index();
        let pool: BTreeSet<String> = ["A"].map(String::from).into();
        assert_eq!(rerank(&query(&["x"]), &pool, &idx, &Constant(3.0)).unwrap()[0].relevance, 1.0);
        assert_eq!(rerank(&query(&["x"]), &pool, &idx, &Constant(-2.0)).unwrap()[0].relevance, 0.0);
    }

    #[test]
    fn scorer_failure_carries_batch() {
        let idx = index();
        let pool: BTreeSet<String> = ["A", "C"].map(String::from).into();
        match rerank(&query(&["x"]), &pool, &idx, &Failing) {
            Err(Error::Scorer { doc_ids, .. }) => assert_eq!(doc_ids, ["A", "C"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn top_k_selection() {
        let scores: Vec<PairScore> = [("A", 0.9), ("B", 0.5), ("C", 0.1)]
            .map(|(d, r)| PairScore { doc_id: d.into(), relevance: r })
            .to_vec();
        let e = select_top_k("n", &scores, 1).unwrap();
        assert_eq!(e.items, scores[..1]);
        assert_eq!(select_top_k("n", &scores, 10).unwrap().items.len(), 3);
        assert!(select_top_k("n", &scores, 0).is_err());
    }

    #[test]
    fn logistic_scorer_learns_feature_direction() {
        let ex: Vec<([f64; 3], bool)> = (0..40)
            .map(|i| {
                let pos = i % 2 == 0;
                let c = if pos { 0.8 } else { 0.1 } + (i as f64) * 1e-3;
                ([c, -1.0, if pos { 2.0 } else { 0.0 }], pos)
            })
            .collect();
        let m = LogisticPairModel::train(&ex, 200, 0.5).unwrap();
        let untrained = LogisticPairModel { weights: [0.0; 3], bias: 0.0, ..m.clone() };
        assert!(m.cross_entropy(&ex) < untrained.cross_entropy(&ex));
        assert!(m.prob(&[0.8, -1.0, 2.0]) > m.prob(&[0.1, -1.0, 0.0]));
    }
}
