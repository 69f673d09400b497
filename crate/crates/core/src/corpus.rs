//! Outcome-specific document index: ingestion, MeSH filtering, document
//! frequency statistics and canonical persistence.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader, ByteWriter, FORMAT_VERSION, INDEX_MAGIC};
use crate::error::{Error, Result};
use crate::mesh::{MeshDictionary, TermCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub mesh_terms: TermCounts,
}

impl Document {
    pub fn text(&self) -> String {
        if self.title.is_empty() {
            self.body.clone()
        } else {
            format!("{}\n{}", self.title, self.body)
        }
    }
}

/// Ingestion record; `mesh_terms` absent means extraction must run.
#[derive(Debug, Deserialize)]
struct DocumentRecord {
    doc_id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    body: String,
    mesh_terms: Option<TermCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub outcome_id: String,
    pub class_count: usize,
    pub class_descriptions: Vec<String>,
    /// OR over conjunctions, AND within each.
    pub mesh_queries: Vec<Vec<String>>,
}

impl OutcomeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!("class_count must be >= 2, got {}", self.class_count)));
        }
        if self.class_descriptions.len() != self.class_count {
            return Err(Error::Config(format!(
                "class_count {} but {} class descriptions",
                self.class_count,
                self.class_descriptions.len()
            )));
        }
        if self.mesh_queries.is_empty() || self.mesh_queries.iter().any(|c| c.is_empty()) {
            return Err(Error::Config("mesh_queries must be non-empty conjunctions".into()));
        }
        Ok(())
    }

    /// The three outcomes used in the original study.
    pub fn preset(name: &str) -> Option<Self> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        match name.to_ascii_uppercase().as_str() {
            "PMV" => Some(OutcomeSpec {
                outcome_id: "PMV".into(),
                class_count: 2,
                class_descriptions: s(&["no prolonged ventilation", "prolonged mechanical ventilation"]),
                mesh_queries: vec![
                    s(&["Respiration, Artificial"]),
                    s(&["Ventilation, Mechanical"]),
                    s(&["Ventilator Weaning"]),
                ],
            }),
            "MOR" => Some(OutcomeSpec {
                outcome_id: "MOR".into(),
                class_count: 2,
                class_descriptions: s(&["survives admission", "in-hospital mortality"]),
                mesh_queries: vec![s(&["Hospital Mortality"]), s(&["Mortality", "Humans", "Risk Factors"])],
            }),
            "LOS" => Some(OutcomeSpec {
                outcome_id: "LOS".into(),
                class_count: 4,
                class_descriptions: s(&["< 3 days", "3-7 days", "1-2 weeks", "> 2 weeks"]),
                mesh_queries: vec![s(&["Length of Stay"])],
            }),
            _ => None,
        }
    }

    pub fn matches(&self, terms: &TermCounts) -> bool {
        let folded = terms.folded();
        self.mesh_queries
            .iter()
            .any(|conj| conj.iter().all(|t| folded.contains_key(&t.to_lowercase())))
    }
}

/// Document frequencies over the retained documents, keyed by lowercased term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TfidfStats {
    pub doc_count: u64,
    pub df: BTreeMap<String, u64>,
}

impl TfidfStats {
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        let mut stats = TfidfStats::default();
        for doc in docs {
            stats.doc_count += 1;
            for term in doc.mesh_terms.folded().into_keys() {
                *stats.df.entry(term).or_insert(0) += 1;
            }
        }
        stats
    }

    pub fn df(&self, folded_term: &str) -> u64 {
        self.df.get(folded_term).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeIndex {
    pub outcome_id: String,
    pub documents: BTreeMap<String, Document>,
    pub stats: TfidfStats,
    /// Seconds since the Unix epoch; taken from `SOURCE_DATE_EPOCH`, else 0.
    pub created_at: i64,
    pub format_version: u32,
}

pub fn extract_mesh(doc: &Document, dict: &MeshDictionary) -> Result<Document> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let mut terms = dict.extract_terms(&doc.title);
    terms.merge(&dict.extract_terms(&doc.body));
    Ok(Document { mesh_terms: terms, ..doc.clone() })
}

fn source_date_epoch() -> i64 {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

pub fn build_index(corpus: impl IntoIterator<Item = Document>, spec: &OutcomeSpec) -> Result<OutcomeIndex> {
    spec.validate()?;
    let mut seen = HashSet::new();
    let mut documents = BTreeMap::new();
    for doc in corpus {
        if doc.doc_id.is_empty() {
            return Err(Error::InvalidArgument("document with empty doc_id".into()));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::DuplicateDocId(doc.doc_id));
        }
        if spec.matches(&doc.mesh_terms) {
            documents.insert(doc.doc_id.clone(), doc);
        }
    }
    if documents.is_empty() {
        return Err(Error::EmptyIndex { outcome_id: spec.outcome_id.clone() });
    }
    let stats = TfidfStats::from_documents(documents.values());
    Ok(OutcomeIndex {
        outcome_id: spec.outcome_id.clone(),
        documents,
        stats,
        created_at: source_date_epoch(),
        format_version: FORMAT_VERSION,
    })
}

/// Reads a JSON-lines corpus. Documents without `mesh_terms` are tagged with
/// `dict`, which is then required.
pub fn read_corpus<R: BufRead>(reader: R, dict: Option<&MeshDictionary>) -> Result<Vec<Document>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Corrupt(format!("corpus line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    records
        .into_par_iter()
        .map(|rec| {
            let doc = Document {
                doc_id: rec.doc_id,
                title: rec.title,
                body: rec.body,
                mesh_terms: rec.mesh_terms.clone().unwrap_or_default(),
            };
            match (rec.mesh_terms, dict) {
                (Some(_), _) => Ok(doc),
                (None, Some(d)) => extract_mesh(&doc, d),
                (None, None) => Err(Error::Config(format!(
                    "document `{}` has no mesh_terms and no dictionary was supplied",
                    doc.doc_id
                ))),
            }
        })
        .collect()
}

pub fn write_corpus<W: Write>(mut out: W, docs: &[Document]) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn encode_index(index: &OutcomeIndex) -> Vec<u8> {
    encode_index_versioned(index, FORMAT_VERSION)
}

fn encode_index_versioned(index: &OutcomeIndex, version: u32) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.str(&index.outcome_id);
    w.i64(index.created_at);
    w.u64(index.stats.doc_count);
    w.u64(index.stats.df.len() as u64);
    for (term, df) in &index.stats.df {
        w.str(term);
        w.u64(*df);
    }
    w.u64(index.documents.len() as u64);
    for doc in index.documents.values() {
        w.str(&doc.doc_id);
        w.str(&doc.title);
        w.str(&doc.body);
        w.u64(doc.mesh_terms.len() as u64);
        for (term, count) in doc.mesh_terms.iter() {
            w.str(term);
            w.u32(count);
        }
    }
    codec::frame(INDEX_MAGIC, version, &w.into_inner())
}

pub fn decode_index(bytes: &[u8]) -> Result<OutcomeIndex> {
    let payload = codec::unframe(INDEX_MAGIC, FORMAT_VERSION, bytes)?;
    let mut r = ByteReader::new(payload);
    let outcome_id = r.str()?;
    let created_at = r.i64()?;
    let doc_count = r.u64()?;
    let n_terms = r.len_prefix(12)?;
    let mut df = BTreeMap::new();
    for _ in 0..n_terms {
        let term = r.str()?;
        df.insert(term, r.u64()?);
    }
    let n_docs = r.len_prefix(20)?;
    let mut documents = BTreeMap::new();
    for _ in 0..n_docs {
        let doc_id = r.str()?;
        let title = r.str()?;
        let body = r.str()?;
        let n = r.len_prefix(8)?;
        let mut mesh_terms = TermCounts::new();
        for _ in 0..n {
            let t = r.str()?;
            mesh_terms.add(&t, r.u32()?);
        }
        documents.insert(doc_id.clone(), Document { doc_id, title, body, mesh_terms });
    }
    r.finish()?;
    Ok(OutcomeIndex {
        outcome_id,
        documents,
        stats: TfidfStats { doc_count, df },
        created_at,
        format_version: FORMAT_VERSION,
    })
}

pub fn save_index(index: &OutcomeIndex, path: &Path) -> Result<()> {
    fs::write(path, encode_index(index))?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<OutcomeIndex> {
    decode_index(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum IndexExportLine {
    Stats { outcome_id: String, doc_count: u64, created_at: i64, df: BTreeMap<String, u64> },
    Document(Document),
}

/// Human-readable JSON-lines mirror of the binary index.
pub fn export_index_jsonl<W: Write>(index: &OutcomeIndex, out: W) -> Result<()> {
    let mut lines = vec![IndexExportLine::Stats {
        outcome_id: index.outcome_id.clone(),
        doc_count: index.stats.doc_count,
        created_at: index.created_at,
        df: index.stats.df.clone(),
    }];
    lines.extend(index.documents.values().cloned().map(IndexExportLine::Document));
    codec::write_jsonl_artifact(out, INDEX_MAGIC, &lines)
}
