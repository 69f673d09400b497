mod oracles;

use std::time::Instant;

use evifuse_core::embedding::EmbeddingVector;
use evifuse_core::judgments::Judgments;
use evifuse_core::note::Query;
use evifuse_core::rerank::{pool_candidates, rerank, LexicalScorer};
use evifuse_core::retrieval::dense::dense_retrieve;
use evifuse_core::retrieval::sparse::SparseSearcher;
use evifuse_core::retrieval::RankedList;
use oracles::*;
use proptest::prelude::*;
use rand::Rng;

fn pairs(list: &RankedList) -> Vec<(String, f64)> {
    list.entries.iter().map(|e| (e.doc_id.clone(), e.score)).collect()
}

#[test]
fn sparse_matches_exhaustive_scan_on_twenty_fixtures() {
    let t = Instant::now();
    for seed in 0..20 {
        let n_docs = 50 + 47 * seed as usize;
        let vocab = 6 + seed as usize % 5;
        let index = random_index(seed, n_docs, vocab);
        let searcher = SparseSearcher::new(&index);
        let mut r = rng(1000 + seed);
        for qi in 0..10 {
            let terms = random_terms(&mut r, vocab);
            let n = r.random_range(1..=40);
            let q = Query { note_id: format!("q{qi}"), mesh_terms: terms.clone(), raw_text: String::new(), warning: None };
            let got = pairs(&searcher.retrieve(&q, n).unwrap());
            let want = sparse_scan(&index, &terms, n);
            assert_eq!(got, want, "seed {seed} query {qi}");
        }
    }
    assert!(t.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn dense_matches_exhaustive_scan_on_twenty_fixtures() {
    let t = Instant::now();
    for seed in 0..20 {
        let mut r = rng(seed);
        let n_docs = 20 + 49 * seed as usize;
        let dim = 2 + seed as usize % 7;
        let (store, rows) = random_store(&mut r, n_docs, dim);
        for qi in 0..10 {
            // some queries sit exactly on a stored vector
            let q: Vec<f64> = if qi % 3 == 0 {
                rows[r.random_range(0..rows.len())].1.clone()
            } else {
                (0..dim).map(|_| r.random_range(-1.0..1.0f32) as f64).collect()
            };
            let n = r.random_range(1..=n_docs + 5);
            let got = pairs(&dense_retrieve("q", &EmbeddingVector::new(q.clone()).unwrap(), &store, n).unwrap());
            assert_eq!(got, dense_scan(&q, &rows, n), "seed {seed} query {qi}");
        }
    }
    assert!(t.elapsed().as_secs_f64() < 10.0);
}

proptest! {
    #[test]
    fn pool_is_union_of_heads(seed in 0u64..500, pool_n in 1usize..30) {
        let index = random_index(seed, 80, 8);
        let mut r = rng(seed);
        let terms = random_terms(&mut r, 8);
        let q = Query { note_id: "q".into(), mesh_terms: terms, raw_text: String::new(), warning: None };
        let sparse = SparseSearcher::new(&index).retrieve(&q, 60).unwrap();
        let (store, _) = random_store(&mut r, 40, 3);
        let dense = dense_retrieve("q", &EmbeddingVector::new(vec![0.0; 3]).unwrap(), &store, 60).unwrap();
        let pool = pool_candidates(&sparse, &dense, pool_n).unwrap();
        prop_assert!(pool.len() <= 2 * pool_n);
        for list in [&sparse, &dense] {
            for id in list.doc_ids().take(pool_n) {
                prop_assert!(pool.contains(id));
            }
        }
        for id in &pool {
            prop_assert!(sparse.doc_ids().take(pool_n).chain(dense.doc_ids().take(pool_n)).any(|d| d == id));
        }
    }

    #[test]
    fn rerank_is_sorted_and_bounded(seed in 0u64..300) {
        let index = random_index(seed, 60, 6);
        let mut r = rng(seed ^ 0xabc);
        let q = Query { note_id: "q".into(), mesh_terms: random_terms(&mut r, 6), raw_text: String::new(), warning: None };
        let pool = index.documents.keys().cloned().collect();
        let out = rerank(&q, &pool, &index, &LexicalScorer::new(&index)).unwrap();
        prop_assert_eq!(out.len(), index.documents.len());
        for w in out.windows(2) {
            prop_assert!(w[0].relevance > w[1].relevance || (w[0].relevance == w[1].relevance && w[0].doc_id < w[1].doc_id));
        }
        prop_assert!(out.iter().all(|s| (0.0..=1.0).contains(&s.relevance)));
    }
}

#[test]
fn precision_at_k_matches_counting() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let ids: Vec<String> = (0..r.random_range(1..30)).map(|i| format!("d{i}")).collect();
        let mut j = Judgments::new();
        let mut relevant = std::collections::BTreeSet::new();
        for id in &ids {
            let rel = r.random_bool(0.4);
            if r.random_bool(0.8) {
                j.insert("q", id, u8::from(rel));
                if rel {
                    relevant.insert(id.clone());
                }
            }
        }
        let list = RankedList {
            note_id: "q".into(),
            stage: evifuse_core::retrieval::Stage::Reranked,
            entries: ids.iter().map(|d| evifuse_core::retrieval::RankedEntry { doc_id: d.clone(), score: 0.0 }).collect(),
        };
        for k in [1, 5, 10, 40] {
            let got = evifuse_core::evaluation::retrieval_precision_at_k(&list, &j, k).unwrap();
            assert_eq!(got, precision_at_k(&ids, &relevant, k));
        }
    }
}
