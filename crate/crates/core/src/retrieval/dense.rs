//! Exhaustive Euclidean nearest-neighbour search.

use rayon::prelude::*;

use crate::embedding::{EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};
use crate::retrieval::{check_n, top_n, RankedEntry, RankedList, Stage};

pub fn euclidean(q: &[f64], d: &[f64]) -> Result<f64> {
    if q.len() != d.len() {
        return Err(Error::DimensionMismatch { left: q.len(), right: d.len() });
    }
    Ok(q.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `‖q − d‖₂`; callers ranking by similarity use its negation.
pub fn dense_score(q: &EmbeddingVector, d: &EmbeddingVector) -> Result<f64> {
    euclidean(q.as_slice(), d.as_slice())
}

pub fn dense_search(q: &[f64], docs: &EmbeddingStore, n: usize) -> Result<Vec<RankedEntry>> {
    check_n(n)?;
    if !docs.is_empty() && docs.dim() != q.len() {
        return Err(Error::DimensionMismatch { left: q.len(), right: docs.dim() });
    }
    let items: Vec<_> = docs.iter().collect();
    let entries = items
        .par_iter()
        .map(|(id, v)| {
            let dist = euclidean(q, v.as_slice())?;
            Ok(RankedEntry { doc_id: id.to_string(), score: -dist })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(top_n(entries, n))
}

pub fn dense_retrieve(note_id: &str, q: &EmbeddingVector, docs: &EmbeddingStore, n: usize) -> Result<RankedList> {
    Ok(RankedList { note_id: note_id.to_string(), stage: Stage::Dense, entries: dense_search(q.as_slice(), docs, n)? })
}
