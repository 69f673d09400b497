//! Randomised invariants of the predictor and the metrics.
mod oracles;

use evifuse_core::evaluation::{auroc_binary, f1_scores};
use evifuse_core::predictor::{class_weights, predict, AggregationStrategy, ClassifierHead, Evidence};
use oracles::{accuracy, auroc_pairs};
use proptest::prelude::*;

fn head(c: usize, input: usize, seed: u64) -> ClassifierHead {
    ClassifierHead::init(c, input, seed)
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9)
}

prop_compose! {
    fn setting()(dim in 1usize..6, k in 1usize..7, c in 2usize..5)
        (note in prop::collection::vec(-2.0f64..2.0, dim),
         docs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), k),
         weights in prop::collection::vec(0.01f64..5.0, k),
         c in Just(c), seed in any::<u64>())
        -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, usize, u64) {
        (note, docs, weights, c, seed)
    }
}

fn evidence<'a>(ids: &'a [String], docs: &'a [Vec<f64>], w: impl Fn(usize) -> f64) -> Vec<Evidence<'a>> {
    docs.iter().enumerate().map(|(i, d)| Evidence { doc_id: &ids[i], embedding: d, weight: w(i) }).collect()
}

proptest! {
    #[test]
    fn equal_weights_reduce_weighted_strategies((note, docs, _, c, seed) in setting(), w in 0.01f64..5.0) {
        let ids: Vec<String> = (0..docs.len()).map(|i| format!("d{i}")).collect();
        let h = head(c, 2 * note.len(), seed);
        let ev = evidence(&ids, &docs, |_| w);
        let p = |s| predict(&h, s, &note, &ev).unwrap();
        prop_assert!(close(&p(AggregationStrategy::WeightedAveraging), &p(AggregationStrategy::Averaging)));
        prop_assert!(close(&p(AggregationStrategy::WeightedVoting), &p(AggregationStrategy::SoftVoting)));
    }

    #[test]
    fn weight_scale_is_irrelevant((note, docs, weights, c, seed) in setting(), scale in 0.001f64..1000.0) {
        let ids: Vec<String> = (0..docs.len()).map(|i| format!("d{i}")).collect();
        let h = head(c, 2 * note.len(), seed);
        let a = evidence(&ids, &docs, |i| weights[i]);
        let b = evidence(&ids, &docs, |i| weights[i] * scale);
        for s in [AggregationStrategy::WeightedAveraging, AggregationStrategy::WeightedVoting] {
            prop_assert!(close(&predict(&h, s, &note, &a).unwrap(), &predict(&h, s, &note, &b).unwrap()));
        }
    }

    #[test]
    fn one_document_collapses_the_strategies((note, docs, weights, c, seed) in setting()) {
        let ids: Vec<String> = (0..docs.len()).map(|i| format!("d{i}")).collect();
        let h = head(c, 2 * note.len(), seed);
        let ev = evidence(&ids[..1], &docs[..1], |i| weights[i]);
        let reference = predict(&h, AggregationStrategy::Averaging, &note, &ev).unwrap();
        for s in [AggregationStrategy::WeightedAveraging, AggregationStrategy::SoftVoting, AggregationStrategy::WeightedVoting] {
            prop_assert!(close(&predict(&h, s, &note, &ev).unwrap(), &reference));
        }
    }

    #[test]
    fn predictions_are_distributions((note, docs, weights, c, seed) in setting()) {
        let ids: Vec<String> = (0..docs.len()).map(|i| format!("d{i}")).collect();
        let ev = evidence(&ids, &docs, |i| weights[i]);
        for s in AggregationStrategy::ALL {
            let h = head(c, s.input_dim(note.len()), seed);
            let p = predict(&h, s, &note, &ev).unwrap();
            prop_assert_eq!(p.len(), c);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn class_weights_balance(counts in prop::collection::vec(1u64..1_000_000, 1..10)) {
        let w = class_weights(&counts).unwrap();
        let n: u64 = counts.iter().sum();
        let s: f64 = counts.iter().zip(&w.weights).map(|(&c, w)| c as f64 * w).sum();
        prop_assert!((s - n as f64).abs() <= 1e-9 * n as f64);
        for (i, j) in (0..counts.len()).zip(1..counts.len()) {
            if counts[i] < counts[j] {
                prop_assert!(w.weights[i] > w.weights[j]);
            }
        }
    }

    #[test]
    fn micro_f1_is_accuracy(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let f = f1_scores(&p, &l, 4).unwrap();
        prop_assert!((f.micro - accuracy(&p, &l)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&f.macro_f1));
    }

    #[test]
    fn auroc_is_the_pairwise_win_rate(
        data in prop::collection::vec((0u8..8, any::<bool>()), 2..50),
        shift in -3.0f64..3.0, gain in 0.1f64..10.0,
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64).collect();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auroc_binary(&scores, &labels).unwrap();
        prop_assert!((a - auroc_pairs(&scores, &labels)).abs() < 1e-12);
        let moved: Vec<f64> = scores.iter().map(|s| (gain * s + shift).cbrt()).collect();
        prop_assert_eq!(auroc_binary(&moved, &labels).unwrap(), a);
    }
}
