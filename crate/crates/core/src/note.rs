//! Case notes: section parsing, ingestion and negation-aware query building.

use std::io::BufRead;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{MeshDictionary, TermCounts};
use crate::negation::NegationScoper;
use crate::text::tokenize;

pub const CANONICAL_SECTIONS: [&str; 8] = [
    "chief_complaint",
    "present_illness",
    "medical_history",
    "admission_medications",
    "allergies",
    "physical_exam",
    "family_history",
    "social_history",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseNote {
    pub note_id: String,
    pub sections: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl CaseNote {
    /// Keeps canonical sections only; errors if none remain.
    pub fn new(note_id: impl Into<String>, sections: IndexMap<String, String>, label: Option<usize>) -> Result<Self> {
        let note_id = note_id.into();
        let sections: IndexMap<_, _> = sections
            .into_iter()
            .filter(|(k, _)| CANONICAL_SECTIONS.contains(&k.as_str()))
            .collect();
        if sections.is_empty() {
            return Err(Error::ExcludedNote { note_id });
        }
        Ok(CaseNote { note_id, sections, label })
    }

    pub fn raw_text(&self) -> String {
        self.sections.values().map(String::as_str).collect::<Vec<_>>().join("\n")
    }

    pub fn check_label(&self, class_count: usize) -> Result<()> {
        match self.label {
            Some(l) if l >= class_count => Err(Error::InvalidArgument(format!(
                "note `{}` label {l} outside [0, {class_count})",
                self.note_id
            ))),
            _ => Ok(()),
        }
    }
}

/// Header aliases for [`parse_note`]. Matching is case-insensitive and
/// whitespace-normalized; unknown all-caps `NAME:` lines open a dropped section.
#[derive(Debug, Clone)]
pub struct SectionRules {
    aliases: Vec<(String, String)>,
    header: Regex,
}

impl Default for SectionRules {
    fn default() -> Self {
        let pairs = [
            ("chief complaint", "chief_complaint"),
            ("present illness", "present_illness"),
            ("history of present illness", "present_illness"),
            ("medical history", "medical_history"),
            ("past medical history", "medical_history"),
            ("admission medications", "admission_medications"),
            ("medications on admission", "admission_medications"),
            ("allergies", "allergies"),
            ("physical exam", "physical_exam"),
            ("physical examination", "physical_exam"),
            ("family history", "family_history"),
            ("social history", "social_history"),
        ];
        Self::with_aliases(pairs.iter().map(|(a, c)| (a.to_string(), c.to_string())))
    }
}

impl SectionRules {
    pub fn with_aliases(aliases: impl IntoIterator<Item = (String, String)>) -> Self {
        let header = Regex::new(r"^\s*([A-Za-z][A-Za-z0-9 /&(),'\-]{0,60}?)\s*:(.*)$").expect("static regex");
        Self { aliases: aliases.into_iter().map(|(a, c)| (normalize(&a), c)).collect(), header }
    }

    /// `Some(Some(canonical))` for a known header, `Some(None)` for an unknown
    /// one, `None` for a content line. The remainder after the colon is returned too.
    fn classify<'l>(&self, line: &'l str) -> Option<(Option<&str>, &'l str)> {
        let caps = self.header.captures(line)?;
        let name = caps.get(1)?.as_str();
        let rest = caps.get(2).map_or("", |m| m.as_str());
        let norm = normalize(name);
        if let Some((_, canon)) = self.aliases.iter().find(|(a, _)| *a == norm) {
            return Some((Some(canon.as_str()), rest));
        }
        let is_caps = name.chars().any(|c| c.is_alphabetic()) && !name.chars().any(|c| c.is_lowercase());
        is_caps.then_some((None, rest))
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn parse_note(note_id: &str, raw: &str, rules: &SectionRules) -> Result<CaseNote> {
    if raw.trim().is_empty() {
        return Err(Error::EmptyInput("note text"));
    }
    let mut sections: IndexMap<String, Vec<String>> = IndexMap::new();
    let mut current: Option<String> = None;
    let mut in_unknown = false;
    for line in raw.lines() {
        match rules.classify(line) {
            Some((Some(canon), rest)) => {
                current = Some(canon.to_string());
                in_unknown = false;
                let entry = sections.entry(canon.to_string()).or_default();
                if !rest.trim().is_empty() {
                    entry.push(rest.trim().to_string());
                }
            }
            Some((None, _)) => {
                current = None;
                in_unknown = true;
            }
            None => {
                if let (Some(c), false) = (&current, in_unknown) {
                    sections.get_mut(c).expect("open section").push(line.trim_end().to_string());
                }
            }
        }
    }
    let sections = sections
        .into_iter()
        .map(|(k, lines)| (k, lines.join("\n").trim().to_string()))
        .collect();
    CaseNote::new(note_id, sections, None)
}

/// Renders a note back into header form; [`parse_note`] inverts it.
pub fn render_note(note: &CaseNote) -> String {
    let mut out = String::new();
    for (name, text) in &note.sections {
        out.push_str(&name.replace('_', " ").to_uppercase());
        out.push_str(":\n");
        out.push_str(text);
        out.push('\n');
    }
    out
}

#[derive(Debug, Deserialize)]
struct NoteRecord {
    note_id: String,
    sections: IndexMap<String, String>,
    #[serde(default)]
    label: Option<usize>,
}

#[derive(Debug, Default)]
pub struct NoteIngest {
    pub notes: Vec<CaseNote>,
    pub excluded: Vec<String>,
}

/// Reads JSON-lines notes. Notes without canonical sections are excluded
/// (reported, not fatal), mirroring cohort filtering.
pub fn read_notes<R: BufRead>(reader: R) -> Result<NoteIngest> {
    let mut ingest = NoteIngest::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NoteRecord =
            serde_json::from_str(&line).map_err(|e| Error::Corrupt(format!("notes line {}: {e}", i + 1)))?;
        match CaseNote::new(rec.note_id, rec.sections, rec.label) {
            Ok(n) => ingest.notes.push(n),
            Err(Error::ExcludedNote { note_id }) => {
                log::warn!("excluding note `{note_id}`: no canonical section");
                ingest.excluded.push(note_id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ingest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub note_id: String,
    pub mesh_terms: TermCounts,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn build_query(note: &CaseNote, dict: &MeshDictionary, scoper: &NegationScoper) -> Result<Query> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let mut terms = TermCounts::new();
    for text in note.sections.values() {
        let tokens = tokenize(text);
        let negated = scoper.mask(&tokens);
        for m in dict.find_matches(&tokens) {
            if !negated[m.tokens.clone()].iter().any(|&n| n) {
                terms.add(&m.descriptor, 1);
            }
        }
    }
    let warning = terms.is_empty().then(|| "no surviving MeSH terms".to_string());
    if warning.is_some() {
        log::warn!("note `{}`: query has no surviving MeSH terms", note.note_id);
    }
    Ok(Query { note_id: note.note_id.clone(), mesh_terms: terms, raw_text: note.raw_text(), warning })
}
