//! Learning to retrieve: the evidence retriever is trained jointly with the
//! head through an early-update loss.
//!
//! ```text
//! S(Q, D_i)   = cosine(A_q e_Q, A_d e_Di)
//! P_early(i)  = softmax(S)_i            over the candidate set
//! L_early     = −ln Σ_j y_j P_early(j)
//! L           = L_outcome + λ L_early
//! ```
//!
//! The top-k candidates by `S` form the evidence, weighted by `exp(S)`, so
//! weighted strategies also pass outcome gradients into the projections.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::train::{forward, head_blocks, Adam, HeadGrad, TrainConfig};
use crate::predictor::{
    class_weights, label_counts, mixture, predict, AggregationStrategy, ClassWeights, ClassifierHead, Evidence,
    PROB_FLOOR,
};

#[derive(Debug, Clone, PartialEq)]
pub struct L2rState {
    pub a_q: Array2<f64>,
    pub a_d: Array2<f64>,
    pub lambda_early: f64,
    pub candidate_count: usize,
}

impl L2rState {
    pub fn identity(dim: usize, lambda_early: f64, candidate_count: usize) -> Self {
        Self { a_q: Array2::eye(dim), a_d: Array2::eye(dim), lambda_early, candidate_count }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.lambda_early >= 0.0 && self.lambda_early.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_early must be >= 0, got {}", self.lambda_early)));
        }
        if self.candidate_count < k {
            return Err(Error::InvalidArgument(format!("candidate_count {} < k {k}", self.candidate_count)));
        }
        if !self.a_q.iter().chain(self.a_d.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite retriever projection".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<'a> {
    pub doc_id: &'a str,
    pub embedding: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2rExample<'a> {
    pub note_id: &'a str,
    pub note: &'a [f64],
    pub candidates: Vec<Candidate<'a>>,
    pub label: usize,
}

struct RetrForward {
    u: Array1<f64>,
    /// Candidate embeddings, one row each.
    d: Array2<f64>,
    /// `A_d` applied to every row of `d`.
    v: Array2<f64>,
    scores: Vec<f64>,
}

fn retr_forward(state: &L2rState, note: &[f64], cands: &[Candidate]) -> Result<RetrForward> {
    let dim = state.a_q.ncols();
    for e in std::iter::once(note).chain(cands.iter().map(|c| c.embedding)) {
        if e.len() != dim {
            return Err(Error::DimensionMismatch { left: dim, right: e.len() });
        }
    }
    let u = state.a_q.dot(&ArrayView1::from(note));
    let flat: Vec<f64> = cands.iter().flat_map(|c| c.embedding.iter().copied()).collect();
    let d = Array2::from_shape_vec((cands.len(), dim), flat).expect("rows of equal width");
    let v = d.dot(&state.a_d.t());
    let nu = u.dot(&u).sqrt();
    let scores = v
        .outer_iter()
        .map(|row| {
            let nv = row.dot(&row).sqrt();
            if nu > 0.0 && nv > 0.0 { row.dot(&u) / (nu * nv) } else { 0.0 }
        })
        .collect();
    Ok(RetrForward { u, d, v, scores })
}

/// `S_retr` for every candidate.
pub fn retrieval_scores(state: &L2rState, note: &[f64], cands: &[Candidate]) -> Result<Vec<f64>> {
    Ok(retr_forward(state, note, cands)?.scores)
}

impl RetrForward {
    /// Chains `∂L/∂S_i` through the cosine into both projections.
    fn backward(&self, note: &[f64], d_scores: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let dim = self.u.len();
        let nu = self.u.dot(&self.u).sqrt();
        let mut du = Array1::<f64>::zeros(dim);
        let mut dv = Array2::<f64>::zeros(self.v.raw_dim());
        for (i, (v, (&s, &g))) in self.v.outer_iter().zip(self.scores.iter().zip(d_scores)).enumerate() {
            let nv = v.dot(&v).sqrt();
            if g == 0.0 || nu == 0.0 || nv == 0.0 {
                continue;
            }
            // ∂s/∂u = v/(|u||v|) − s u/|u|², and symmetrically for v.
            du.scaled_add(g / (nu * nv), &v);
            du.scaled_add(-g * s / (nu * nu), &self.u);
            let mut row = dv.row_mut(i);
            row.scaled_add(g / (nu * nv), &self.u);
            row.scaled_add(-g * s / (nv * nv), &v);
        }
        (outer(&du, note), dv.t().dot(&self.d))
    }
}

fn outer(a: &Array1<f64>, b: &[f64]) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&ArrayView1::from(b).insert_axis(Axis(0)))
}

/// `1` iff pairing the document raises the probability of the correct class
/// above the note-only baseline.
pub fn assign_yj(baseline: &[f64], paired: &[f64], correct: usize) -> u8 {
    u8::from(paired[correct] > baseline[correct])
}

/// `L_early` and `∂L_early/∂S`, or `None` when no candidate is positive.
pub fn early_loss_grad(scores: &[f64], y: &[u8]) -> Result<Option<(f64, Vec<f64>)>> {
    if scores.len() != y.len() {
        return Err(Error::DimensionMismatch { left: scores.len(), right: y.len() });
    }
    if !y.iter().any(|&v| v == 1) {
        return Ok(None);
    }
    let p = super::softmax(scores);
    let mass: f64 = p.iter().zip(y).filter(|(_, &v)| v == 1).map(|(p, _)| p).sum();
    let mass = mass.max(PROB_FLOOR);
    let grad = p.iter().zip(y).map(|(&pi, &yi)| pi - f64::from(yi) * pi / mass).collect();
    Ok(Some((-mass.ln(), grad)))
}

pub fn early_loss(scores: &[f64], y: &[u8]) -> Result<Option<f64>> {
    Ok(early_loss_grad(scores, y)?.map(|(l, _)| l))
}

/// Indices of the `k` best candidates, by score then doc id.
pub fn top_k_indices(scores: &[f64], cands: &[Candidate], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| cands[a].doc_id.cmp(cands[b].doc_id)));
    idx.truncate(k);
    idx
}

/// Evidence as the retriever sees it: top-k by `S`, weight `exp(S)`.
pub fn select_evidence<'a>(state: &L2rState, note: &[f64], cands: &[Candidate<'a>], k: usize) -> Result<Vec<Evidence<'a>>> {
    let scores = retrieval_scores(state, note, cands)?;
    Ok(top_k_indices(&scores, cands, k)
        .into_iter()
        .map(|i| Evidence { doc_id: cands[i].doc_id, embedding: cands[i].embedding, weight: scores[i].exp() })
        .collect())
}

/// `y_j` for every candidate of a note against the note-only baseline head.
pub fn candidate_labels(
    head: &ClassifierHead,
    strategy: AggregationStrategy,
    baseline: &ClassifierHead,
    ex: &L2rExample,
) -> Result<Vec<u8>> {
    let base = baseline.probs(ex.note)?;
    ex.candidates
        .iter()
        .map(|c| {
            let paired = predict(head, strategy, ex.note, &[Evidence { doc_id: c.doc_id, embedding: c.embedding, weight: 1.0 }])?;
            Ok(assign_yj(&base, &paired, ex.label))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2rLosses {
    pub outcome: f64,
    pub early: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2rGrad {
    pub head: HeadGrad,
    pub a_q: Array2<f64>,
    pub a_d: Array2<f64>,
}

/// Both losses of one note and the gradient of `L_outcome + λ L_early`.
pub fn l2r_loss_grad(
    head: &ClassifierHead,
    state: &L2rState,
    strategy: AggregationStrategy,
    ex: &L2rExample,
    y: &[u8],
    k: usize,
    weights: &ClassWeights,
) -> Result<(L2rLosses, L2rGrad)> {
    if strategy == AggregationStrategy::NoteOnly {
        return Err(Error::InvalidArgument("learning to retrieve needs an evidence-using strategy".into()));
    }
    let rf = retr_forward(state, ex.note, &ex.candidates)?;
    let sel = top_k_indices(&rf.scores, &ex.candidates, k);
    let evidence: Vec<Evidence> = sel
        .iter()
        .map(|&i| Evidence { doc_id: ex.candidates[i].doc_id, embedding: ex.candidates[i].embedding, weight: rf.scores[i].exp() })
        .collect();
    let fw = forward(head, mixture(strategy, ex.note, &evidence)?)?;
    let outcome = fw.loss(ex.label, weights);
    let dz = fw.logit_grads(ex.label, weights);
    let head_grad = fw.head_grad(head, &dz);

    let mut d_scores = vec![0.0; ex.candidates.len()];
    if strategy.is_weighted() && !sel.is_empty() {
        // ∂L/∂α_i, then through α = softmax(S restricted to the selection).
        let g: Vec<f64> = match strategy {
            AggregationStrategy::WeightedVoting => fw.mixing_grads(ex.label, weights),
            _ => {
                let dx = head.w.t().dot(&dz[0]);
                let dlit = dx.slice(ndarray::s![ex.note.len()..]).to_owned();
                evidence.iter().map(|e| dlit.dot(&ArrayView1::from(e.embedding))).collect()
            }
        };
        let total: f64 = evidence.iter().map(|e| e.weight).sum();
        let alpha: Vec<f64> = evidence.iter().map(|e| e.weight / total).collect();
        let mean_g: f64 = alpha.iter().zip(&g).map(|(a, g)| a * g).sum();
        for ((&i, a), gi) in sel.iter().zip(&alpha).zip(&g) {
            d_scores[i] += a * (gi - mean_g);
        }
    }
    let early = match early_loss_grad(&rf.scores, y)? {
        Some((l, g)) => {
            d_scores.iter_mut().zip(g).for_each(|(d, g)| *d += state.lambda_early * g);
            Some(l)
        }
        None => None,
    };
    let (a_q, a_d) = rf.backward(ex.note, &d_scores);
    Ok((L2rLosses { outcome, early }, L2rGrad { head: head_grad, a_q, a_d }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2rEpoch {
    pub outcome: f64,
    pub early: f64,
    /// Notes that contributed to `early` (at least one positive candidate).
    pub early_notes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2rOutcome {
    pub head: ClassifierHead,
    pub state: L2rState,
    pub class_weights: ClassWeights,
    /// Full-data losses before training and after each epoch.
    pub history: Vec<L2rEpoch>,
}

fn evaluate(
    head: &ClassifierHead,
    state: &L2rState,
    cfg: &TrainConfig,
    examples: &[L2rExample],
    labels: &[Vec<u8>],
    weights: &ClassWeights,
) -> Result<L2rEpoch> {
    let parts = examples
        .par_iter()
        .zip(labels)
        .map(|(ex, y)| {
            let rf = retr_forward(state, ex.note, &ex.candidates)?;
            let ev = select_evidence(state, ex.note, &ex.candidates, cfg.k)?;
            let p = predict(head, cfg.strategy, ex.note, &ev)?;
            let outcome = -weights.weights[ex.label] * p[ex.label].max(PROB_FLOOR).ln();
            Ok((outcome, early_loss(&rf.scores, y)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let early: Vec<f64> = parts.iter().filter_map(|(_, e)| *e).collect();
    Ok(L2rEpoch {
        outcome: parts.iter().map(|(o, _)| o).sum::<f64>() / n,
        early: if early.is_empty() { 0.0 } else { early.iter().sum::<f64>() / early.len() as f64 },
        early_notes: early.len(),
    })
}

fn compute_labels(
    head: &ClassifierHead,
    strategy: AggregationStrategy,
    baseline: &ClassifierHead,
    examples: &[L2rExample],
) -> Result<Vec<Vec<u8>>> {
    let labels = examples.par_iter().map(|ex| candidate_labels(head, strategy, baseline, ex)).collect::<Result<Vec<_>>>()?;
    let skipped = labels.iter().filter(|y| !y.contains(&1)).count();
    if skipped > 0 {
        log::warn!("{skipped} of {} notes have no confidence-raising candidate; early loss skipped for them", labels.len());
    }
    Ok(labels)
}

/// Joint training starting from `warm` (typically the two-stage head).
/// `y_j` is recomputed from the current head at the start of every epoch
/// unless `fixed_labels` is given.
pub fn train_l2r(
    examples: &[L2rExample],
    class_count: usize,
    warm: ClassifierHead,
    baseline: &ClassifierHead,
    cfg: &TrainConfig,
    fixed_labels: Option<&[Vec<u8>]>,
) -> Result<L2rOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyInput("training examples"));
    }
    if warm.input_dim() != cfg.strategy.input_dim(examples[0].note.len()) {
        return Err(Error::DimensionMismatch { left: cfg.strategy.input_dim(examples[0].note.len()), right: warm.input_dim() });
    }
    if let Some(f) = fixed_labels {
        if f.len() != examples.len() {
            return Err(Error::DimensionMismatch { left: examples.len(), right: f.len() });
        }
    }
    let weights = class_weights(&label_counts(examples.iter().map(|e| e.label), class_count)?)?;
    let dim = examples[0].note.len();
    let mut state = L2rState::identity(dim, cfg.lambda_early, cfg.candidate_count);
    state.validate(cfg.k)?;
    let mut head = warm;
    let mut adam = Adam::new(cfg.lr, &[head.w.len(), head.b.len(), dim * dim, dim * dim]);

    let mut labels = match fixed_labels {
        Some(f) => f.to_vec(),
        None => compute_labels(&head, cfg.strategy, baseline, examples)?,
    };
    let mut history = vec![evaluate(&head, &state, cfg, examples, &labels, &weights)?];
    for epoch in 0..cfg.epochs {
        if epoch > 0 && fixed_labels.is_none() {
            labels = compute_labels(&head, cfg.strategy, baseline, examples)?;
        }
        for (chunk, ys) in examples.chunks(cfg.grad_accumulation).zip(labels.chunks(cfg.grad_accumulation)) {
            let parts = chunk
                .par_iter()
                .zip(ys)
                .map(|(ex, y)| l2r_loss_grad(&head, &state, cfg.strategy, ex, y, cfg.k, &weights))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / chunk.len() as f64;
            let mut g = L2rGrad {
                head: HeadGrad::zeros_like(&head),
                a_q: Array2::zeros(state.a_q.raw_dim()),
                a_d: Array2::zeros(state.a_d.raw_dim()),
            };
            for (_, pg) in &parts {
                g.head.add_scaled(scale, &pg.head);
                g.a_q.scaled_add(scale, &pg.a_q);
                g.a_d.scaled_add(scale, &pg.a_d);
            }
            let [w, b] = head_blocks(&mut head);
            adam.step(
                &mut [w, b, state.a_q.as_slice_mut().unwrap(), state.a_d.as_slice_mut().unwrap()],
                &[g.head.w.as_slice().unwrap(), g.head.b.as_slice().unwrap(), g.a_q.as_slice().unwrap(), g.a_d.as_slice().unwrap()],
            );
        }
        let h = evaluate(&head, &state, cfg, examples, &labels, &weights)?;
        log::debug!("l2r epoch {epoch}: outcome {:.6} early {:.6} over {} notes", h.outcome, h.early, h.early_notes);
        history.push(h);
    }
    state.validate(cfg.k)?;
    if !head.is_finite() {
        return Err(Error::InvalidArgument("joint training diverged to non-finite parameters".into()));
    }
    Ok(L2rOutcome { head, state, class_weights: weights, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_give_ln2() {
        let l = early_loss(&[0.3, 0.3], &[1, 0]).unwrap().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(early_loss(&[0.1, 0.9, -0.2], &[1, 1, 1]).unwrap().unwrap(), 0.0);
        assert!(early_loss(&[0.1, 0.2], &[0, 0]).unwrap().is_none());
    }

    #[test]
    fn yj_strict_increase() {
        assert_eq!(assign_yj(&[0.4, 0.6], &[0.55, 0.45], 0), 1);
        assert_eq!(assign_yj(&[0.4, 0.6], &[0.4, 0.6], 0), 0);
        assert_eq!(assign_yj(&[0.9, 0.1], &[0.3, 0.7], 0), 0);
    }

    #[test]
    fn identity_scores_are_cosines() {
        let state = L2rState::identity(2, 1.0, 10);
        let c = [Candidate { doc_id: "a", embedding: &[1.0, 0.0] }, Candidate { doc_id: "b", embedding: &[0.0, 2.0] }];
        let s = retrieval_scores(&state, &[1.0, 1.0], &c).unwrap();
        assert!((s[0] - 0.5f64.sqrt()).abs() < 1e-12 && (s[1] - 0.5f64.sqrt()).abs() < 1e-12);
        let sel = select_evidence(&state, &[1.0, 1.0], &c, 1).unwrap();
        assert_eq!(sel[0].doc_id, "a");
    }

    #[test]
    fn state_validation() {
        assert!(L2rState::identity(2, 1.0, 4).validate(5).is_err());
        assert!(L2rState::identity(2, -1.0, 10).validate(5).is_err());
    }

    #[test]
    fn note_only_rejected() {
        let head = ClassifierHead::zeros(2, 1);
        let ex = L2rExample { note_id: "n", note: &[1.0], candidates: vec![], label: 0 };
        let r = l2r_loss_grad(&head, &L2rState::identity(1, 1.0, 1), AggregationStrategy::NoteOnly, &ex, &[], 1, &ClassWeights::uniform(2));
        assert!(r.is_err());
    }
}
