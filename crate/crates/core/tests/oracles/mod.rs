//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite. Nothing here calls the code under test except
//! to build inputs.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use evifuse_core::corpus::{Document, OutcomeIndex, TfidfStats};
use evifuse_core::embedding::{EmbeddingStore, EmbeddingVector};
use evifuse_core::mesh::TermCounts;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Ids sorted so that ties resolve by id, scores descending.
fn rank(mut scored: Vec<(String, f64)>, n: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(n);
    scored
}

/// A random index over a tiny vocabulary, so identical term sets (and hence
/// tied scores) are common.
pub fn random_index(seed: u64, n_docs: usize, vocab: usize) -> OutcomeIndex {
    let mut r = rng(seed);
    let mut documents = BTreeMap::new();
    for _ in 0..n_docs {
        let mut terms = TermCounts::new();
        for _ in 0..r.random_range(1..=4) {
            let t = r.random_range(0..vocab);
            // mixed case exercises case folding
            let name = if r.random_bool(0.2) { format!("Term{t}") } else { format!("term{t}") };
            terms.add(&name, r.random_range(1..=3));
        }
        let id = format!("d{:04}", r.random_range(0..10 * n_docs));
        documents.insert(id.clone(), Document { doc_id: id, title: String::new(), body: String::new(), mesh_terms: terms });
    }
    let stats = TfidfStats::from_documents(documents.values());
    OutcomeIndex { outcome_id: "T".into(), documents, stats, created_at: 0, format_version: 1 }
}

pub fn random_terms(r: &mut ChaCha8Rng, vocab: usize) -> TermCounts {
    let mut q = TermCounts::new();
    for _ in 0..r.random_range(1..=3) {
        q.add(&format!("term{}", r.random_range(0..vocab + 2)), r.random_range(1..=2));
    }
    q
}

fn folded(terms: &TermCounts) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (t, c) in terms.iter() {
        *out.entry(t.to_lowercase()).or_insert(0.0) += c as f64;
    }
    out
}

fn unit_tfidf(terms: &TermCounts, df: &BTreeMap<String, f64>, n: f64) -> BTreeMap<String, f64> {
    let mut v: BTreeMap<String, f64> = folded(terms)
        .into_iter()
        .map(|(t, tf)| {
            let d = df.get(&t).copied().unwrap_or(0.0);
            let w = tf * (((1.0 + n) / (1.0 + d)).ln() + 1.0);
            (t, w)
        })
        .collect();
    let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.values_mut().for_each(|w| *w /= norm);
    }
    v
}

/// Exhaustive TF-IDF cosine scan: every document scored against the query,
/// zero scores dropped.
pub fn sparse_scan(index: &OutcomeIndex, query: &TermCounts, n: usize) -> Vec<(String, f64)> {
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for d in index.documents.values() {
        for t in folded(&d.mesh_terms).into_keys() {
            *df.entry(t).or_insert(0.0) += 1.0;
        }
    }
    let total = index.documents.len() as f64;
    let q = unit_tfidf(query, &df, total);
    let scored = index
        .documents
        .values()
        .map(|d| {
            let v = unit_tfidf(&d.mesh_terms, &df, total);
            let s: f64 = q.iter().filter_map(|(t, wq)| v.get(t).map(|wd| wq * wd)).sum();
            (d.doc_id.clone(), s.min(1.0))
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    rank(scored, n)
}

/// Exhaustive Euclidean scan, similarity = negative distance.
pub fn dense_scan(q: &[f64], docs: &[(String, Vec<f64>)], n: usize) -> Vec<(String, f64)> {
    let scored = docs
        .iter()
        .map(|(id, v)| (id.clone(), -q.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
        .collect();
    rank(scored, n)
}

/// Random store where a fifth of the vectors duplicate an earlier one.
pub fn random_store(r: &mut ChaCha8Rng, n: usize, dim: usize) -> (EmbeddingStore, Vec<(String, Vec<f64>)>) {
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let mut ids = BTreeSet::new();
    while rows.len() < n {
        let id = format!("d{:05}", r.random_range(0..100 * n));
        if !ids.insert(id.clone()) {
            continue;
        }
        let v = if !rows.is_empty() && r.random_bool(0.2) {
            rows[r.random_range(0..rows.len())].1.clone()
        } else {
            (0..dim).map(|_| r.random_range(-1.0..1.0f32) as f64).collect()
        };
        rows.push((id, v));
    }
    let mut store = EmbeddingStore::new(dim);
    for (id, v) in &rows {
        store.insert(id.clone(), EmbeddingVector::new(v.clone()).unwrap()).unwrap();
    }
    (store, rows)
}

/// Probability that a random positive outscores a random negative, ties one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Single-label micro F1 is plain accuracy.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Per-class F1 by counting, averaged.
pub fn macro_f1(predictions: &[usize], labels: &[usize], class_count: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..class_count {
        let tp = predictions.iter().zip(labels).filter(|(&p, &l)| p == c && l == c).count() as f64;
        let predicted = predictions.iter().filter(|&&p| p == c).count() as f64;
        let actual = labels.iter().filter(|&&l| l == c).count() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    sum / class_count as f64
}

/// Precision and recall over the most confident `m` records, where `m` is
/// the smallest count covering `fraction` of `n` (up to 1e-9).
pub fn topk_scan(probs: &[(String, f64)], labels: &[bool], fraction: f64) -> (f64, Option<f64>) {
    let n = probs.len();
    let m = (1..=n).find(|&m| m as f64 + 1e-9 >= fraction * n as f64).unwrap_or(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| probs[b].1.partial_cmp(&probs[a].1).unwrap().then_with(|| probs[a].0.cmp(&probs[b].0)));
    let hits = idx[..m].iter().filter(|&&i| labels[i]).count() as f64;
    let total = labels.iter().filter(|&&l| l).count() as f64;
    (hits / m as f64, (total > 0.0).then(|| hits / total))
}

/// Relevant documents among the first `k` ids, over `k`.
pub fn precision_at_k(ids: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    ids.iter().take(k).filter(|d| relevant.contains(*d)).count() as f64 / k as f64
}

/// Central finite difference of `f` along every coordinate of `params`.
pub fn numeric_grad(params: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + h;
            let up = f(params);
            params[i] = orig - h;
            let down = f(params);
            params[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, or 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = inf(a).max(inf(b));
    if scale == 0.0 { 0.0 } else { diff / scale }
}
