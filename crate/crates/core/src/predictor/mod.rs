//! Note/evidence fusion, the softmax head and its loss.
//!
//! Every strategy reduces to a mixture: a list of head inputs `x_i` with
//! mixing coefficients `α_i` (summing to 1), and
//! `p = Σ α_i softmax(W x_i + b)`. Concatenation strategies have a single
//! input; voting strategies have one `[note; doc_i]` input per evidence item.

pub mod l2r;
pub mod model;
pub mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    NoteOnly,
    LiteratureOnly,
    Averaging,
    WeightedAveraging,
    SoftVoting,
    WeightedVoting,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 6] = [
        Self::NoteOnly,
        Self::LiteratureOnly,
        Self::Averaging,
        Self::WeightedAveraging,
        Self::SoftVoting,
        Self::WeightedVoting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoteOnly => "note_only",
            Self::LiteratureOnly => "literature_only",
            Self::Averaging => "averaging",
            Self::WeightedAveraging => "weighted_averaging",
            Self::SoftVoting => "soft_voting",
            Self::WeightedVoting => "weighted_voting",
        }
    }

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&s| s == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL.get(tag as usize).copied().ok_or_else(|| Error::Corrupt(format!("unknown strategy tag {tag}")))
    }

    /// Head input width for base embeddings of width `dim`.
    pub fn input_dim(self, dim: usize) -> usize {
        match self {
            Self::NoteOnly | Self::LiteratureOnly => dim,
            _ => 2 * dim,
        }
    }

    pub fn uses_evidence(self) -> bool {
        self != Self::NoteOnly
    }

    pub fn is_voting(self) -> bool {
        matches!(self, Self::SoftVoting | Self::WeightedVoting)
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, Self::WeightedAveraging | Self::WeightedVoting)
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "note_only" | "note" => Self::NoteOnly,
            "literature_only" | "lit" => Self::LiteratureOnly,
            "averaging" | "avg" => Self::Averaging,
            "weighted_averaging" | "wavg" => Self::WeightedAveraging,
            "soft_voting" | "svote" => Self::SoftVoting,
            "weighted_voting" | "wvote" => Self::WeightedVoting,
            _ => return Err(Error::Config(format!("unknown aggregation strategy `{s}`"))),
        })
    }
}

/// One retrieved document as seen by the predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evidence<'a> {
    pub doc_id: &'a str,
    pub embedding: &'a [f64],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ClassifierHead {
    pub fn zeros(class_count: usize, input_dim: usize) -> Self {
        Self { w: Array2::zeros((class_count, input_dim)), b: Array1::zeros(class_count) }
    }

    /// `W ~ U(-0.01, 0.01)`, `b = 0`.
    pub fn init(class_count: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_simple_fn((class_count, input_dim), || rng.random_range(-0.01..0.01));
        Self { w, b: Array1::zeros(class_count) }
    }

    pub fn class_count(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { left: self.input_dim(), right: x.len() });
        }
        Ok(self.w.dot(&ArrayView1::from(x)) + &self.b)
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(self.logits(x)?.as_slice().unwrap()))
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_dims(vs: &[&[f64]]) -> Result<usize> {
    let dim = vs[0].len();
    for v in vs {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { left: dim, right: v.len() });
        }
    }
    Ok(dim)
}

/// Elementwise mean. An empty list yields the zero vector of width `dim`.
pub fn aggregate_avg(vs: &[&[f64]], dim: usize) -> Result<Vec<f64>> {
    if vs.is_empty() {
        log::warn!("empty evidence set: using a zero literature vector");
        return Ok(vec![0.0; dim]);
    }
    let d = check_dims(vs)?;
    let n = vs.len() as f64;
    Ok((0..d).map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / n).collect())
}

/// `Σ wᵢ Eᵢ / Σ wᵢ`; falls back to the plain mean when all weights are zero.
pub fn aggregate_wavg(items: &[(&[f64], f64)], dim: usize) -> Result<Vec<f64>> {
    let vs: Vec<&[f64]> = items.iter().map(|(v, _)| *v).collect();
    if items.is_empty() {
        return aggregate_avg(&vs, dim);
    }
    let d = check_dims(&vs)?;
    let total = check_weights(items.iter().map(|(_, w)| *w))?;
    if total == 0.0 {
        log::warn!("evidence weights sum to zero: using the unweighted mean");
        return aggregate_avg(&vs, dim);
    }
    Ok((0..d).map(|j| items.iter().map(|(v, w)| w * v[j]).sum::<f64>() / total).collect())
}

fn check_weights(ws: impl Iterator<Item = f64>) -> Result<f64> {
    let mut total = 0.0;
    for w in ws {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!("evidence weight must be finite and >= 0, got {w}")));
        }
        total += w;
    }
    Ok(total)
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Head inputs and mixing coefficients for a strategy.
pub fn mixture(strategy: AggregationStrategy, note: &[f64], evidence: &[Evidence]) -> Result<Vec<(Vec<f64>, f64)>> {
    let dim = note.len();
    let embs: Vec<&[f64]> = evidence.iter().map(|e| e.embedding).collect();
    Ok(match strategy {
        AggregationStrategy::NoteOnly => vec![(note.to_vec(), 1.0)],
        AggregationStrategy::LiteratureOnly => vec![(aggregate_avg(&embs, dim)?, 1.0)],
        AggregationStrategy::Averaging => vec![(concat(note, &aggregate_avg(&embs, dim)?), 1.0)],
        AggregationStrategy::WeightedAveraging => {
            let items: Vec<(&[f64], f64)> = evidence.iter().map(|e| (e.embedding, e.weight)).collect();
            vec![(concat(note, &aggregate_wavg(&items, dim)?), 1.0)]
        }
        AggregationStrategy::SoftVoting | AggregationStrategy::WeightedVoting => {
            if evidence.is_empty() {
                log::warn!("empty evidence set: voting falls back to the note-only input");
                return Ok(vec![(concat(note, &vec![0.0; dim]), 1.0)]);
            }
            check_dims(&embs)?;
            let total = check_weights(evidence.iter().map(|e| e.weight))?;
            let weighted = strategy == AggregationStrategy::WeightedVoting && total > 0.0;
            if strategy == AggregationStrategy::WeightedVoting && total == 0.0 {
                log::warn!("evidence weights sum to zero: weighted voting reduces to soft voting");
            }
            let n = evidence.len() as f64;
            evidence
                .iter()
                .map(|e| (concat(note, e.embedding), if weighted { e.weight / total } else { 1.0 / n }))
                .collect()
        }
    })
}

/// `p = Σ α_i softmax(W x_i + b)`.
pub fn predict(head: &ClassifierHead, strategy: AggregationStrategy, note: &[f64], evidence: &[Evidence]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; head.class_count()];
    for (x, a) in mixture(strategy, note, evidence)? {
        for (o, p) in out.iter_mut().zip(head.probs(&x)?) {
            *o += a * p;
        }
    }
    Ok(out)
}

pub fn predict_concat(note: &[f64], lit: &[f64], head: &ClassifierHead) -> Result<Vec<f64>> {
    head.probs(&concat(note, lit))
}

pub fn predict_voting(note: &[f64], evidence: &[Evidence], head: &ClassifierHead, weighted: bool) -> Result<Vec<f64>> {
    let s = if weighted { AggregationStrategy::WeightedVoting } else { AggregationStrategy::SoftVoting };
    predict(head, s, note, evidence)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ClassWeights {
    pub fn uniform(class_count: usize) -> Self {
        Self { weights: vec![1.0; class_count], counts: vec![] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `w_i = N / (c · n_i)`.
pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("class counts"));
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class });
    }
    let n: u64 = counts.iter().sum();
    let c = counts.len() as f64;
    Ok(ClassWeights { weights: counts.iter().map(|&ni| n as f64 / (c * ni as f64)).collect(), counts: counts.to_vec() })
}

pub fn label_counts(labels: impl IntoIterator<Item = usize>, class_count: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; class_count];
    for l in labels {
        *counts.get_mut(l).ok_or_else(|| Error::InvalidArgument(format!("label {l} out of range 0..{class_count}")))? += 1;
    }
    Ok(counts)
}

/// `−w_label · ln p_label`, with `p_label` floored at [`PROB_FLOOR`].
pub fn weighted_ce_loss(probs: &[f64], label: usize, weights: &ClassWeights) -> f64 {
    let p = probs[label];
    if p < PROB_FLOOR {
        log::warn!("probability {p:e} of the true class floored at {PROB_FLOOR:e}");
    }
    -weights.weights[label] * p.max(PROB_FLOOR).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub doc_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub note_id: String,
    pub probs: Vec<f64>,
    pub predicted_class: usize,
    pub evidence: Vec<EvidenceRef>,
    pub strategy: AggregationStrategy,
}

impl PredictionRecord {
    pub fn new(note_id: &str, probs: Vec<f64>, evidence: &[Evidence], strategy: AggregationStrategy) -> Self {
        let evidence = if strategy.uses_evidence() {
            evidence.iter().map(|e| EvidenceRef { doc_id: e.doc_id.to_string(), weight: e.weight }).collect()
        } else {
            Vec::new()
        };
        Self { note_id: note_id.to_string(), predicted_class: argmax(&probs), probs, evidence, strategy }
    }
}
