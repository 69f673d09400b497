//! TF-IDF cosine retrieval over MeSH descriptor multisets.
//!
//! `w(t) = tf(t) * (ln((1 + N) / (1 + df(t))) + 1)`, L2-normalized. Terms are
//! compared case-insensitively. Documents with zero cosine are not returned.

use std::collections::{BTreeMap, HashMap};

use crate::corpus::{OutcomeIndex, TfidfStats};
use crate::error::Result;
use crate::mesh::TermCounts;
use crate::note::Query;
use crate::retrieval::{check_n, top_n, RankedEntry, RankedList, Stage};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TfidfVector(BTreeMap<String, f64>);

impl TfidfVector {
    pub fn get(&self, term: &str) -> f64 {
        self.0.get(term).copied().unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(|w| w * w).sum::<f64>().sqrt()
    }
}

pub fn idf(stats: &TfidfStats, folded_term: &str) -> f64 {
    let n = stats.doc_count as f64;
    let df = stats.df(folded_term) as f64;
    ((1.0 + n) / (1.0 + df)).ln() + 1.0
}

pub fn tfidf_vector(terms: &TermCounts, stats: &TfidfStats) -> TfidfVector {
    let mut weights: BTreeMap<String, f64> =
        terms.folded().into_iter().map(|(t, tf)| { let w = tf as f64 * idf(stats, &t); (t, w) }).collect();
    let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        weights.values_mut().for_each(|w| *w /= norm);
    }
    TfidfVector(weights)
}

/// Dot product of two normalized vectors, summed in `a`'s term order, capped at 1.
pub fn cosine(a: &TfidfVector, b: &TfidfVector) -> f64 {
    let mut acc = 0.0;
    for (t, wa) in a.iter() {
        if let Some(wb) = b.0.get(t) {
            acc += wa * wb;
        }
    }
    acc.min(1.0)
}

/// Inverted index over the normalized document vectors of an [`OutcomeIndex`].
#[derive(Debug, Clone)]
pub struct SparseSearcher {
    stats: TfidfStats,
    doc_ids: Vec<String>,
    doc_vectors: Vec<TfidfVector>,
    postings: HashMap<String, Vec<(u32, f64)>>,
}

impl SparseSearcher {
    pub fn new(index: &OutcomeIndex) -> Self {
        let mut doc_ids = Vec::with_capacity(index.documents.len());
        let mut doc_vectors = Vec::with_capacity(index.documents.len());
        let mut postings: HashMap<String, Vec<(u32, f64)>> = HashMap::new();
        for (i, (id, doc)) in index.documents.iter().enumerate() {
            let v = tfidf_vector(&doc.mesh_terms, &index.stats);
            for (t, w) in v.iter() {
                postings.entry(t.to_string()).or_default().push((i as u32, w));
            }
            doc_ids.push(id.clone());
            doc_vectors.push(v);
        }
        Self { stats: index.stats.clone(), doc_ids, doc_vectors, postings }
    }

    pub fn stats(&self) -> &TfidfStats {
        &self.stats
    }

    pub fn doc_vector(&self, doc_id: &str) -> Option<&TfidfVector> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok().map(|i| &self.doc_vectors[i])
    }

    pub fn search_terms(&self, terms: &TermCounts, n: usize) -> Result<Vec<RankedEntry>> {
        check_n(n)?;
        let q = tfidf_vector(terms, &self.stats);
        if q.is_empty() {
            return Ok(Vec::new());
        }
        let mut acc = vec![0.0f64; self.doc_ids.len()];
        let mut seen = vec![false; self.doc_ids.len()];
        let mut touched = Vec::new();
        for (t, wq) in q.iter() {
            if let Some(list) = self.postings.get(t) {
                for &(d, wd) in list {
                    if !seen[d as usize] {
                        seen[d as usize] = true;
                        touched.push(d);
                    }
                    acc[d as usize] += wq * wd;
                }
            }
        }
        let entries = touched
            .into_iter()
            .filter(|&d| acc[d as usize] > 0.0)
            .map(|d| RankedEntry { doc_id: self.doc_ids[d as usize].clone(), score: acc[d as usize].min(1.0) })
            .collect();
        Ok(top_n(entries, n))
    }

    pub fn retrieve(&self, query: &Query, n: usize) -> Result<RankedList> {
        Ok(RankedList {
            note_id: query.note_id.clone(),
            stage: Stage::Sparse,
            entries: self.search_terms(&query.mesh_terms, n)?,
        })
    }
}

/// Convenience wrapper building a searcher for a single query.
pub fn sparse_retrieve(query: &Query, index: &OutcomeIndex, n: usize) -> Result<RankedList> {
    SparseSearcher::new(index).retrieve(query, n)
}
