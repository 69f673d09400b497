//! MeSH descriptor multisets and the longest-match dictionary linker.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::text::{token_strings, tokenize, Token};

/// Multiset of MeSH descriptors. Serialized as a sorted list with repeats.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TermCounts(BTreeMap<String, u32>);

impl TermCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, term: &str, count: u32) {
        if count > 0 {
            *self.0.entry(term.to_string()).or_insert(0) += count;
        }
    }

    pub fn get(&self, term: &str) -> u32 {
        self.0.get(term).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.values().map(|&c| c as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn merge(&mut self, other: &TermCounts) {
        for (t, c) in other.iter() {
            self.add(t, c);
        }
    }

    /// Counts keyed by lowercased descriptor; term identity is case-insensitive.
    pub fn folded(&self) -> BTreeMap<String, u32> {
        let mut out = BTreeMap::new();
        for (t, c) in self.iter() {
            *out.entry(t.to_lowercase()).or_insert(0) += c;
        }
        out
    }

    pub fn contains_folded(&self, term: &str) -> bool {
        let needle = term.to_lowercase();
        self.0.keys().any(|k| k.to_lowercase() == needle)
    }
}

impl<S: AsRef<str>> FromIterator<S> for TermCounts {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut tc = TermCounts::new();
        for t in iter {
            tc.add(t.as_ref(), 1);
        }
        tc
    }
}

impl Serialize for TermCounts {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().flat_map(|(k, &c)| std::iter::repeat_n(k, c as usize)))
    }
}

impl<'de> Deserialize<'de> for TermCounts {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let terms = Vec::<String>::deserialize(d)?;
        Ok(terms.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeshMatch {
    pub descriptor: String,
    /// Token index range in the tokenized text.
    pub tokens: Range<usize>,
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    children: HashMap<String, TrieNode>,
    descriptor: Option<String>,
}

/// Synonym dictionary mapping token phrases to canonical descriptors.
#[derive(Debug, Default, Clone)]
pub struct MeshDictionary {
    root: TrieNode,
    entries: usize,
}

impl MeshDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `synonym` for `descriptor`. The descriptor name itself is
    /// registered as a synonym too. The first mapping for a phrase wins.
    pub fn insert(&mut self, descriptor: &str, synonym: &str) {
        self.insert_phrase(descriptor, synonym);
        self.insert_phrase(descriptor, descriptor);
    }

    fn insert_phrase(&mut self, descriptor: &str, phrase: &str) {
        let toks = token_strings(phrase);
        if toks.is_empty() {
            return;
        }
        let mut node = &mut self.root;
        for t in toks {
            node = node.children.entry(t).or_default();
        }
        match &node.descriptor {
            None => {
                node.descriptor = Some(descriptor.to_string());
                self.entries += 1;
            }
            Some(existing) if existing != descriptor => {
                log::warn!("phrase `{phrase}` already maps to `{existing}`; ignoring `{descriptor}`");
            }
            Some(_) => {}
        }
    }

    /// Reads `descriptor<TAB>synonym` lines. Blank lines and `#` comments are skipped;
    /// a line with only a descriptor registers the descriptor name alone.
    pub fn from_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut dict = MeshDictionary::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let descriptor = parts.next().unwrap_or("").trim();
            if descriptor.is_empty() {
                return Err(Error::Corrupt(format!("dictionary line {}: empty descriptor", i + 1)));
            }
            match parts.next().map(str::trim).filter(|s| !s.is_empty()) {
                Some(syn) => dict.insert(descriptor, syn),
                None => dict.insert_phrase(descriptor, descriptor),
            }
        }
        Ok(dict)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut dict = MeshDictionary::new();
        for (d, s) in pairs {
            dict.insert(d, s);
        }
        dict
    }

    pub fn len(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    /// Greedy leftmost-longest, non-overlapping matches over a token sequence.
    pub fn find_matches(&self, tokens: &[Token]) -> Vec<MeshMatch> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let mut node = &self.root;
            let mut best: Option<(usize, &str)> = None;
            for (j, tok) in tokens[i..].iter().enumerate() {
                match node.children.get(&tok.lower) {
                    Some(next) => {
                        node = next;
                        if let Some(d) = &node.descriptor {
                            best = Some((i + j + 1, d));
                        }
                    }
                    None => break,
                }
            }
            match best {
                Some((end, d)) => {
                    out.push(MeshMatch { descriptor: d.to_string(), tokens: i..end });
                    i = end;
                }
                None => i += 1,
            }
        }
        out
    }

    pub fn extract_terms(&self, text: &str) -> TermCounts {
        let tokens = tokenize(text);
        self.find_matches(&tokens).into_iter().map(|m| m.descriptor).collect()
    }
}
