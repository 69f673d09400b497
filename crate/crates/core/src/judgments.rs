//! Relevance judgments and training triples (TSV formats).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `query_id → doc_id → relevance (0/1/2)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Judgments(BTreeMap<String, BTreeMap<String, u8>>);

impl Judgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, relevance: u8) {
        self.0.entry(query_id.to_string()).or_default().insert(doc_id.to_string(), relevance);
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u8>> {
        self.0.get(query_id)
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.0.get(query_id).and_then(|m| m.get(doc_id)).is_some_and(|&r| r > 0)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut j = Judgments::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let bad = || Error::Corrupt(format!("judgments line {}: expected query_id<TAB>doc_id<TAB>0|1|2", i + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let rel: u8 = cols[2].parse().map_err(|_| bad())?;
            if rel > 2 {
                return Err(bad());
            }
            j.insert(cols[0], cols[1], rel);
        }
        Ok(j)
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (q, docs) in &self.0 {
            for (d, r) in docs {
                writeln!(out, "{q}\t{d}\t{r}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub query_id: String,
    pub pos_id: String,
    pub neg_id: String,
}

pub fn read_triples_tsv<R: BufRead>(reader: R) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(Error::Corrupt(format!("triples line {}: expected 3 columns", i + 1)));
        }
        out.push(Triple { query_id: cols[0].into(), pos_id: cols[1].into(), neg_id: cols[2].into() });
    }
    Ok(out)
}

pub fn write_triples_tsv<W: Write>(mut out: W, triples: &[Triple]) -> Result<()> {
    for t in triples {
        writeln!(out, "{}\t{}\t{}", t.query_id, t.pos_id, t.neg_id)?;
    }
    Ok(())
}

/// Pairs each relevant document of a query with each irrelevant one, keeping
/// at most `max_per_query` pairs per query (seeded sample).
pub fn triples_from_judgments(j: &Judgments, max_per_query: usize, seed: u64) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (q, docs) in &j.0 {
        let pos: Vec<&String> = docs.iter().filter(|(_, &r)| r > 0).map(|(d, _)| d).collect();
        let neg: Vec<&String> = docs.iter().filter(|(_, &r)| r == 0).map(|(d, _)| d).collect();
        let mut pairs: Vec<Triple> = pos
            .iter()
            .flat_map(|p| {
                neg.iter().map(move |n| Triple { query_id: q.clone(), pos_id: (*p).clone(), neg_id: (*n).clone() })
            })
            .collect();
        if pairs.len() > max_per_query {
            pairs.shuffle(&mut rng);
            pairs.truncate(max_per_query);
        }
        out.extend(pairs);
    }
    out
}
