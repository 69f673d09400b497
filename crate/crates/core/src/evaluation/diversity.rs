//! How concentrated retrieved evidence is across notes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rerank::EvidenceSet;

pub const DIVERSITY_TOP: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityEntry {
    pub doc_id: String,
    pub notes: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub note_count: usize,
    /// Most frequently retrieved first; ties by doc id.
    pub entries: Vec<DiversityEntry>,
}

pub fn diversity_report(sets: &[EvidenceSet]) -> Result<DiversityReport> {
    if sets.is_empty() {
        return Err(Error::EmptyInput("evidence sets"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sets {
        let unique: BTreeSet<&str> = s.items.iter().map(|i| i.doc_id.as_str()).collect();
        for d in unique {
            *counts.entry(d).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    entries.truncate(DIVERSITY_TOP);
    let n = sets.len();
    Ok(DiversityReport {
        note_count: n,
        entries: entries
            .into_iter()
            .map(|(d, c)| DiversityEntry { doc_id: d.to_string(), notes: c, fraction: c as f64 / n as f64 })
            .collect(),
    })
}

impl DiversityReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "rank,doc_id,notes,fraction")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(out, "{},{},{},{}", i + 1, e.doc_id, e.notes, e.fraction)?;
        }
        Ok(())
    }
}
