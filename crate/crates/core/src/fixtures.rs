//! Synthetic corpora and notes with planted outcome evidence.
//!
//! Each class owns a slice of a pseudo-word symptom vocabulary and a few
//! outcome marker words. Documents get a designated class; their symptom
//! mentions and marker come from that class with probability
//! `es / (es + nr·(C−1))` and from each other class with `nr / (es + nr·(C−1))`.
//! Notes draw their symptoms the same way from their latent class, so
//! lexical retrieval pulls documents whose markers reveal the class. The
//! note's own text only carries a weaker, separate cue.
//!
//! The symptom vocabulary doubles as the MeSH dictionary (one descriptor per
//! word), plus the handful of descriptors that define the outcome index.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, OutcomeSpec};
use crate::error::{Error, Result};
use crate::judgments::Judgments;
use crate::mesh::{MeshDictionary, TermCounts};
use crate::note::CaseNote;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic pseudo-word: three consonant-vowel syllables plus a suffix.
pub fn pseudo_word(i: usize, suffix: &str) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut s = String::new();
    let mut x = i;
    for _ in 0..3 {
        let syl = x % n;
        x /= n;
        s.push(CONSONANTS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
    }
    assert!(x == 0, "pseudo-word index {i} out of range");
    s.push_str(suffix);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_docs: usize,
    pub n_notes: usize,
    pub class_count: usize,
    /// Total symptom words, split evenly across classes.
    pub vocab_size: usize,
    pub evidence_strength: f64,
    pub noise_rate: f64,
    pub symptoms_per_doc: usize,
    /// Probability that a note's exam cue names its own class.
    pub note_cue_rate: f64,
    /// Share of documents tagged with an outcome-index descriptor.
    pub index_coverage: f64,
    pub markers_per_class: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_docs: 200,
            n_notes: 60,
            class_count: 2,
            vocab_size: 40,
            evidence_strength: 0.9,
            noise_rate: 0.1,
            symptoms_per_doc: 6,
            note_cue_rate: 0.7,
            index_coverage: 0.9,
            markers_per_class: 3,
        }
    }
}

impl FixtureSpec {
    /// The larger fixture on which literature augmentation should pay off.
    /// Notes carry a stronger cue than the default so that neither the note
    /// nor the retrieved literature alone carries most of the signal.
    pub fn lift(seed: u64) -> Self {
        Self { seed, n_docs: 1000, n_notes: 600, vocab_size: 1200, note_cue_rate: 0.85, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidArgument("fixture class_count must be >= 2".into()));
        }
        if self.n_docs < self.class_count {
            return Err(Error::Infeasible(format!("n_docs {} < class_count {}", self.n_docs, self.class_count)));
        }
        if self.vocab_size < self.class_count {
            return Err(Error::Infeasible(format!("vocab_size {} < class_count {}", self.vocab_size, self.class_count)));
        }
        if self.n_notes == 0 || self.symptoms_per_doc == 0 || self.markers_per_class == 0 {
            return Err(Error::Infeasible("n_notes, symptoms_per_doc and markers_per_class must be >= 1".into()));
        }
        for (name, v) in [
            ("evidence_strength", self.evidence_strength),
            ("noise_rate", self.noise_rate),
            ("note_cue_rate", self.note_cue_rate),
            ("index_coverage", self.index_coverage),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.evidence_strength + self.noise_rate == 0.0 {
            return Err(Error::InvalidArgument("evidence_strength and noise_rate cannot both be 0".into()));
        }
        Ok(())
    }

    pub fn per_class_vocab(&self) -> usize {
        self.vocab_size / self.class_count
    }

    /// Probability that a slot draws from the entity's own class.
    pub fn own_class_probability(&self) -> f64 {
        let c = self.class_count as f64;
        self.evidence_strength / (self.evidence_strength + self.noise_rate * (c - 1.0))
    }
}

/// Ground truth recorded alongside each generated note.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedNote {
    pub note: CaseNote,
    pub asserted: TermCounts,
    pub negated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub outcome: OutcomeSpec,
    /// Documents with title and body only; MeSH terms come from extraction.
    pub documents: Vec<Document>,
    pub designated: BTreeMap<String, usize>,
    pub notes: Vec<PlantedNote>,
    pub dictionary_pairs: Vec<(String, String)>,
}

pub const INDEX_DESCRIPTORS: [(&str, &str); 5] = [
    ("Hospital Mortality", "hospital mortality"),
    ("Mortality", "mortality"),
    ("Humans", "humans"),
    ("Humans", "patients"),
    ("Risk Factors", "risk factors"),
];

const DOC_FILLER: [&str; 6] = [
    "A retrospective cohort was reviewed.",
    "Outcomes were compared across centres.",
    "Follow up lasted twelve months.",
    "Clinical courses were summarised.",
    "Data were collected prospectively.",
    "Case series from a tertiary centre.",
];

const SOCIAL: [&str; 4] = [
    "Lives with family.",
    "Works as a teacher.",
    "Retired carpenter, lives alone.",
    "Quit smoking years ago.",
];

pub fn fixture_outcome(class_count: usize) -> OutcomeSpec {
    OutcomeSpec {
        outcome_id: "SYN".into(),
        class_count,
        class_descriptions: (0..class_count).map(|c| format!("class {c}")).collect(),
        mesh_queries: vec![
            vec!["Hospital Mortality".into()],
            vec!["Mortality".into(), "Humans".into(), "Risk Factors".into()],
        ],
    }
}

struct Vocab {
    symptoms: Vec<Vec<String>>,
    markers: Vec<Vec<String>>,
    cues: Vec<String>,
}

impl Vocab {
    fn new(spec: &FixtureSpec) -> Self {
        let v = spec.per_class_vocab();
        Self {
            symptoms: (0..spec.class_count).map(|c| (0..v).map(|i| pseudo_word(c * v + i, "ia")).collect()).collect(),
            markers: (0..spec.class_count)
                .map(|c| (0..spec.markers_per_class).map(|i| pseudo_word(c * spec.markers_per_class + i, "ox")).collect())
                .collect(),
            cues: (0..spec.class_count).map(|c| pseudo_word(c, "ik")).collect(),
        }
    }
}

fn draw_class(rng: &mut ChaCha8Rng, own: usize, spec: &FixtureSpec) -> usize {
    if rng.random::<f64>() < spec.own_class_probability() {
        own
    } else {
        let other = rng.random_range(0..spec.class_count - 1);
        if other >= own { other + 1 } else { other }
    }
}

fn other_class(rng: &mut ChaCha8Rng, own: usize, c: usize) -> usize {
    let other = rng.random_range(0..c - 1);
    if other >= own { other + 1 } else { other }
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = Vocab::new(spec);
    let v = spec.per_class_vocab();
    let c = spec.class_count;

    let mut documents = Vec::with_capacity(spec.n_docs);
    let mut designated = BTreeMap::new();
    let mut per_class_seen = vec![0usize; c];
    for j in 0..spec.n_docs {
        let doc_id = format!("D{j:05}");
        let class = j % c;
        let m = per_class_seen[class];
        per_class_seen[class] += 1;
        let mut symptoms = Vec::with_capacity(spec.symptoms_per_doc);
        for t in 0..spec.symptoms_per_doc {
            let sc = draw_class(&mut rng, class, spec);
            // own-class slots cycle through the vocabulary so each word is covered
            let idx = if sc == class { (m * spec.symptoms_per_doc + t) % v } else { rng.random_range(0..v) };
            symptoms.push(vocab.symptoms[sc][idx].clone());
        }
        let marker_class = draw_class(&mut rng, class, spec);
        let marker = vocab.markers[marker_class].choose(&mut rng).unwrap();
        let title = format!("{} and {} in hospitalised adults", symptoms[0], symptoms[1 % symptoms.len()]);
        let mut body = vec![format!("We studied {}.", symptoms.join(", "))];
        body.push(format!("Cases with these findings showed {marker} course."));
        if rng.random::<f64>() < spec.index_coverage {
            body.push(if rng.random::<bool>() {
                "Hospital mortality was the primary endpoint.".to_string()
            } else {
                "Mortality in patients and its risk factors were assessed.".to_string()
            });
        }
        body.push(DOC_FILLER.choose(&mut rng).unwrap().to_string());
        documents.push(Document { doc_id: doc_id.clone(), title, body: body.join(" "), mesh_terms: TermCounts::new() });
        designated.insert(doc_id, class);
    }

    let mut notes = Vec::with_capacity(spec.n_notes);
    for i in 0..spec.n_notes {
        let label = rng.random_range(0..c);
        let n_sym = rng.random_range(3..=4usize);
        let symptoms: Vec<String> = (0..n_sym)
            .map(|_| {
                let sc = draw_class(&mut rng, label, spec);
                vocab.symptoms[sc][rng.random_range(0..v)].clone()
            })
            .collect();
        let dist_class = other_class(&mut rng, label, c);
        let negated: Vec<String> =
            (0..rng.random_range(1..=2usize)).map(|_| vocab.symptoms[dist_class][rng.random_range(0..v)].clone()).collect();
        let neg_sentence = match (rng.random_range(0..3u8), negated.as_slice()) {
            (_, [a, b]) => format!("No {a} or {b}."),
            (0, [a]) => format!("Denies {a}."),
            (1, [a]) => format!("{a} was ruled out."),
            (_, [a]) => format!("Negative for {a}."),
            _ => unreachable!(),
        };
        let cue_class = if rng.random::<f64>() < spec.note_cue_rate { label } else { other_class(&mut rng, label, c) };
        let mut sections = IndexMap::new();
        sections.insert("chief_complaint".to_string(), format!("Presenting with {}.", symptoms[0]));
        sections.insert(
            "present_illness".to_string(),
            format!("Patient reports {} since yesterday. {neg_sentence} No increase in {} severity.", symptoms[1], symptoms[2]),
        );
        let history = match symptoms.get(3) {
            Some(s) => format!("History of {s}."),
            None => "Unremarkable.".to_string(),
        };
        sections.insert("medical_history".to_string(), history);
        sections.insert("physical_exam".to_string(), format!("Exam shows {} appearance.", vocab.cues[cue_class]));
        sections.insert("social_history".to_string(), SOCIAL.choose(&mut rng).unwrap().to_string());
        let note = CaseNote::new(format!("N{i:05}"), sections, Some(label))?;
        let asserted: TermCounts = symptoms.iter().collect();
        notes.push(PlantedNote { note, asserted, negated });
    }

    let mut dictionary_pairs: Vec<(String, String)> =
        INDEX_DESCRIPTORS.iter().map(|(d, s)| (d.to_string(), s.to_string())).collect();
    for words in &vocab.symptoms {
        dictionary_pairs.extend(words.iter().map(|w| (w.clone(), w.clone())));
    }
    Ok(Fixture { spec: spec.clone(), outcome: fixture_outcome(c), documents, designated, notes, dictionary_pairs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixturePaths {
    pub corpus: PathBuf,
    pub notes: PathBuf,
    pub dictionary: PathBuf,
    pub judgments: PathBuf,
    pub outcome: PathBuf,
}

impl Fixture {
    pub fn dictionary(&self) -> MeshDictionary {
        MeshDictionary::from_pairs(self.dictionary_pairs.iter().map(|(d, s)| (d.as_str(), s.as_str())))
    }

    pub fn labels(&self) -> BTreeMap<String, usize> {
        self.notes.iter().map(|n| (n.note.note_id.clone(), n.note.label.unwrap())).collect()
    }

    /// Relevant (1) iff the document's designated class equals the note's class.
    pub fn judgments(&self) -> Judgments {
        let mut j = Judgments::new();
        for n in &self.notes {
            let label = n.note.label.unwrap();
            for (d, &c) in &self.designated {
                j.insert(&n.note.note_id, d, u8::from(c == label));
            }
        }
        j
    }

    pub fn case_notes(&self) -> Vec<CaseNote> {
        self.notes.iter().map(|n| n.note.clone()).collect()
    }

    pub fn write_corpus<W: Write>(&self, mut out: W) -> Result<()> {
        for d in &self.documents {
            serde_json::to_writer(&mut out, &serde_json::json!({"doc_id": d.doc_id, "title": d.title, "body": d.body}))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_notes<W: Write>(&self, mut out: W) -> Result<()> {
        for n in &self.notes {
            serde_json::to_writer(&mut out, &n.note)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_dictionary<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# descriptor\tsynonym")?;
        for (d, s) in &self.dictionary_pairs {
            writeln!(out, "{d}\t{s}")?;
        }
        Ok(())
    }

    /// Writes every ingestion file into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<FixturePaths> {
        fs::create_dir_all(dir)?;
        let paths = FixturePaths {
            corpus: dir.join("corpus.jsonl"),
            notes: dir.join("notes.jsonl"),
            dictionary: dir.join("mesh.tsv"),
            judgments: dir.join("judgments.tsv"),
            outcome: dir.join("outcome.json"),
        };
        let mut buf = Vec::new();
        self.write_corpus(&mut buf)?;
        fs::write(&paths.corpus, &buf)?;
        buf.clear();
        self.write_notes(&mut buf)?;
        fs::write(&paths.notes, &buf)?;
        buf.clear();
        self.write_dictionary(&mut buf)?;
        fs::write(&paths.dictionary, &buf)?;
        buf.clear();
        self.judgments().write_tsv(&mut buf)?;
        fs::write(&paths.judgments, &buf)?;
        fs::write(&paths.outcome, serde_json::to_vec_pretty(&self.outcome)?)?;
        Ok(paths)
    }
}
