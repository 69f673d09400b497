//! Weighted cross-entropy gradients and Adam training of the head.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{
    class_weights, label_counts, mixture, AggregationStrategy, ClassWeights, ClassifierHead, Evidence, PROB_FLOOR,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Example<'a> {
    pub note_id: &'a str,
    pub note: &'a [f64],
    pub evidence: Vec<Evidence<'a>>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl HeadGrad {
    pub fn zeros_like(head: &ClassifierHead) -> Self {
        Self { w: Array2::zeros(head.w.raw_dim()), b: Array1::zeros(head.b.raw_dim()) }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &HeadGrad) {
        self.w.scaled_add(alpha, &other.w);
        self.b.scaled_add(alpha, &other.b);
    }
}

/// Forward pass through a mixture, keeping what the backward pass needs.
pub(crate) struct Forward {
    pub inputs: Vec<(Vec<f64>, f64)>,
    pub pair_probs: Vec<Array1<f64>>,
    pub probs: Vec<f64>,
}

pub(crate) fn forward(head: &ClassifierHead, inputs: Vec<(Vec<f64>, f64)>) -> Result<Forward> {
    let mut probs = vec![0.0; head.class_count()];
    let mut pair_probs = Vec::with_capacity(inputs.len());
    for (x, a) in &inputs {
        let p = Array1::from(head.probs(x)?);
        probs.iter_mut().zip(p.iter()).for_each(|(o, v)| *o += a * v);
        pair_probs.push(p);
    }
    Ok(Forward { inputs, pair_probs, probs })
}

impl Forward {
    pub fn loss(&self, label: usize, weights: &ClassWeights) -> f64 {
        -weights.weights[label] * self.probs[label].max(PROB_FLOOR).ln()
    }

    /// `∂L/∂z_i = w_y α_i (p_{i,y} / p_y)(p_i − e_y)` for each mixture input.
    pub fn logit_grads(&self, label: usize, weights: &ClassWeights) -> Vec<Array1<f64>> {
        let wy = weights.weights[label];
        let py = self.probs[label].max(PROB_FLOOR);
        self.inputs
            .iter()
            .zip(&self.pair_probs)
            .map(|((_, a), p)| {
                let mut g = p.clone();
                g[label] -= 1.0;
                g * (wy * a * p[label] / py)
            })
            .collect()
    }

    /// `∂L/∂α_i = −w_y p_{i,y} / p_y`.
    pub fn mixing_grads(&self, label: usize, weights: &ClassWeights) -> Vec<f64> {
        let wy = weights.weights[label];
        let py = self.probs[label].max(PROB_FLOOR);
        self.pair_probs.iter().map(|p| -wy * p[label] / py).collect()
    }

    pub fn head_grad(&self, head: &ClassifierHead, logit_grads: &[Array1<f64>]) -> HeadGrad {
        let mut g = HeadGrad::zeros_like(head);
        for ((x, _), dz) in self.inputs.iter().zip(logit_grads) {
            let x = ArrayView1::from(x.as_slice());
            g.w += &dz.view().insert_axis(Axis(1)).dot(&x.insert_axis(Axis(0)));
            g.b += dz;
        }
        g
    }
}

/// Weighted cross-entropy of one example and its gradient with respect to the head.
pub fn example_loss_grad(
    head: &ClassifierHead,
    strategy: AggregationStrategy,
    ex: &Example,
    weights: &ClassWeights,
) -> Result<(f64, HeadGrad)> {
    if ex.label >= head.class_count() {
        return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", ex.label, head.class_count())));
    }
    let fw = forward(head, mixture(strategy, ex.note, &ex.evidence)?)?;
    let dz = fw.logit_grads(ex.label, weights);
    Ok((fw.loss(ex.label, weights), fw.head_grad(head, &dz)))
}

/// Mean loss and gradient over `examples`. Per-example work runs in parallel;
/// the reduction is sequential in dataset order.
pub fn batch_loss_grad(
    head: &ClassifierHead,
    strategy: AggregationStrategy,
    examples: &[Example],
    weights: &ClassWeights,
) -> Result<(f64, HeadGrad)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("training examples"));
    }
    let parts = examples
        .par_iter()
        .map(|ex| example_loss_grad(head, strategy, ex, weights))
        .collect::<Result<Vec<_>>>()?;
    let n = examples.len() as f64;
    let mut grad = HeadGrad::zeros_like(head);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.add_scaled(1.0, g);
    }
    grad.w /= n;
    grad.b /= n;
    Ok((loss / n, grad))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam over a fixed list of parameter blocks.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, block_sizes: &[usize]) -> Self {
        Self {
            lr,
            t: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (block, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[block], &mut self.v[block]);
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub grad_accumulation: usize,
    pub k: usize,
    pub strategy: AggregationStrategy,
    pub seed: u64,
    pub lambda_early: f64,
    pub candidate_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            epochs: 40,
            grad_accumulation: 10,
            k: 5,
            strategy: AggregationStrategy::WeightedVoting,
            seed: 0,
            lambda_early: 1.0,
            candidate_count: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("training.lr must be > 0, got {}", self.lr)));
        }
        if self.grad_accumulation == 0 {
            return Err(Error::Config("training.grad_accumulation must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("training.k must be >= 1".into()));
        }
        if !(self.lambda_early >= 0.0 && self.lambda_early.is_finite()) {
            return Err(Error::Config(format!("training.lambda_early must be >= 0, got {}", self.lambda_early)));
        }
        if self.candidate_count < self.k {
            return Err(Error::Config(format!(
                "training.candidate_count ({}) must be >= k ({})",
                self.candidate_count, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: ClassifierHead,
    pub class_weights: ClassWeights,
    pub epoch_losses: Vec<f64>,
}

pub(crate) fn head_blocks(head: &mut ClassifierHead) -> [&mut [f64]; 2] {
    [head.w.as_slice_mut().expect("standard layout"), head.b.as_slice_mut().expect("standard layout")]
}

/// Adam on weighted cross-entropy. Gradients are averaged over
/// `grad_accumulation` consecutive examples (dataset order, no shuffling)
/// before each step, so results depend only on the data and the seed.
pub fn train_head(examples: &[Example], class_count: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyInput("training examples"));
    }
    let weights = class_weights(&label_counts(examples.iter().map(|e| e.label), class_count)?)?;
    let dim = examples[0].note.len();
    let mut head = ClassifierHead::init(class_count, cfg.strategy.input_dim(dim), cfg.seed);
    let mut adam = Adam::new(cfg.lr, &[head.w.len(), head.b.len()]);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for chunk in examples.chunks(cfg.grad_accumulation) {
            let (loss, g) = batch_loss_grad(&head, cfg.strategy, chunk, &weights)?;
            total += loss * chunk.len() as f64;
            adam.step(&mut head_blocks(&mut head), &[g.w.as_slice().unwrap(), g.b.as_slice().unwrap()]);
        }
        let mean = total / examples.len() as f64;
        log::debug!("{} epoch {epoch}: mean weighted CE {mean:.6}", cfg.strategy);
        epoch_losses.push(mean);
    }
    if !head.is_finite() {
        return Err(Error::InvalidArgument("training diverged to non-finite parameters".into()));
    }
    Ok(TrainOutcome { head, class_weights: weights, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::predict;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn separable(n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let sign = if label == 0 { -1.0 } else { 1.0 };
                let x = vec![sign * rng.random_range(0.2..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                (x, label)
            })
            .collect()
    }

    #[test]
    fn separable_data_reaches_high_accuracy() {
        let data = separable(100, 3);
        let examples: Vec<Example> =
            data.iter().map(|(x, l)| Example { note_id: "n", note: x, evidence: vec![], label: *l }).collect();
        let cfg = TrainConfig { lr: 0.05, epochs: 200, grad_accumulation: 10, strategy: AggregationStrategy::NoteOnly, ..Default::default() };
        let out = train_head(&examples, 2, &cfg).unwrap();
        let correct = examples
            .iter()
            .filter(|e| {
                let p = predict(&out.head, cfg.strategy, e.note, &[]).unwrap();
                crate::predictor::argmax(&p) == e.label
            })
            .count();
        assert!(correct as f64 / examples.len() as f64 >= 0.95, "accuracy {correct}/100");
        assert!(out.epoch_losses.last() < out.epoch_losses.first());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = separable(30, 9);
        let docs: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 30.0, 0.5, -0.5]).collect();
        let examples: Vec<Example> = data
            .iter()
            .zip(&docs)
            .map(|((x, l), d)| Example {
                note_id: "n",
                note: x,
                evidence: vec![Evidence { doc_id: "d", embedding: d, weight: 0.7 }],
                label: *l,
            })
            .collect();
        let cfg = TrainConfig { epochs: 5, strategy: AggregationStrategy::WeightedVoting, ..Default::default() };
        let a = train_head(&examples, 2, &cfg).unwrap();
        let b = train_head(&examples, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_values_accepted() {
        for lr in [5e-4, 1e-5, 5e-5, 1e-6, 5e-6] {
            for ga in [10, 20] {
                TrainConfig { lr, grad_accumulation: ga, ..Default::default() }.validate().unwrap();
            }
        }
        assert!(TrainConfig { grad_accumulation: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { k: 200, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(train_head(&[], 2, &TrainConfig::default()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut adam = Adam::new(0.1, &[2]);
        adam.step(&mut [&mut p[..]], &[&[3.0, -0.5]]);
        assert!((p[0] - 0.9).abs() < 1e-8 && (p[1] + 0.9).abs() < 1e-8);
    }
}
