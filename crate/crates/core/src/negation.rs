//! ConText-style negation scoping (NEGATED attribute only).
//!
//! A pre-trigger negates up to `window` tokens after it; a post-trigger negates
//! up to `window` tokens before it. Scopes never cross a sentence boundary and
//! stop at the first terminator. Pseudo-triggers are matched first and mask any
//! trigger they overlap.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{token_strings, tokenize, Token};

const DEFAULT_LEXICON: &str = include_str!("../data/negation_lexicon.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationLexicon {
    pub pre_triggers: Vec<String>,
    pub post_triggers: Vec<String>,
    pub pseudo_triggers: Vec<String>,
    pub terminators: Vec<String>,
    pub window: usize,
}

impl Default for NegationLexicon {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_LEXICON).expect("bundled lexicon is valid JSON")
    }
}

impl NegationLexicon {
    pub fn from_json<R: Read>(reader: R) -> Result<Self> {
        let lex: NegationLexicon = serde_json::from_reader(reader)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::InvalidLexicon("window must be >= 1".into()));
        }
        let lists = [
            ("pre_triggers", &self.pre_triggers),
            ("post_triggers", &self.post_triggers),
            ("terminators", &self.terminators),
            ("pseudo_triggers", &self.pseudo_triggers),
        ];
        let mut owner: HashMap<Vec<String>, &str> = HashMap::new();
        for (name, list) in lists {
            for phrase in list {
                let toks = token_strings(phrase);
                if toks.is_empty() {
                    return Err(Error::InvalidLexicon(format!("empty phrase in {name}")));
                }
                if let Some(prev) = owner.insert(toks, name) {
                    if prev != name {
                        return Err(Error::InvalidLexicon(format!(
                            "`{phrase}` appears in both {prev} and {name}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cue {
    Pre,
    Post,
    Pseudo,
    Terminator,
}

/// Compiled form of a [`NegationLexicon`].
#[derive(Debug, Clone)]
pub struct NegationScoper {
    phrases: HashMap<Vec<String>, Cue>,
    pseudo: HashSet<Vec<String>>,
    max_len: usize,
    window: usize,
}

impl NegationScoper {
    pub fn new(lexicon: &NegationLexicon) -> Result<Self> {
        lexicon.validate()?;
        let mut phrases = HashMap::new();
        let mut pseudo = HashSet::new();
        let mut max_len = 0;
        let mut add = |list: &[String], cue: Cue| {
            for p in list {
                let toks = token_strings(p);
                max_len = max_len.max(toks.len());
                if cue == Cue::Pseudo {
                    pseudo.insert(toks);
                } else {
                    phrases.insert(toks, cue);
                }
            }
        };
        add(&lexicon.pre_triggers, Cue::Pre);
        add(&lexicon.post_triggers, Cue::Post);
        add(&lexicon.terminators, Cue::Terminator);
        add(&lexicon.pseudo_triggers, Cue::Pseudo);
        Ok(Self { phrases, pseudo, max_len, window: lexicon.window })
    }

    fn longest_at(&self, tokens: &[Token], i: usize, pseudo: bool) -> Option<(usize, Cue)> {
        let max = self.max_len.min(tokens.len() - i);
        for len in (1..=max).rev() {
            let key: Vec<String> = tokens[i..i + len].iter().map(|t| t.lower.clone()).collect();
            if pseudo {
                if self.pseudo.contains(&key) {
                    return Some((len, Cue::Pseudo));
                }
            } else if let Some(&cue) = self.phrases.get(&key) {
                return Some((len, cue));
            }
        }
        None
    }

    fn cues(&self, tokens: &[Token]) -> Vec<(Range<usize>, Cue)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if let Some((len, cue)) = self.longest_at(tokens, i, true).or_else(|| self.longest_at(tokens, i, false)) {
                out.push((i..i + len, cue));
                i += len;
            } else {
                i += 1;
            }
        }
        out
    }

    /// Per-token negation flags.
    pub fn mask(&self, tokens: &[Token]) -> Vec<bool> {
        let cues = self.cues(tokens);
        let mut is_terminator = vec![false; tokens.len()];
        for (r, cue) in &cues {
            if *cue == Cue::Terminator {
                is_terminator[r.clone()].iter_mut().for_each(|b| *b = true);
            }
        }
        let mut negated = vec![false; tokens.len()];
        for (r, cue) in &cues {
            match cue {
                Cue::Pre => {
                    let sentence = tokens[r.end - 1].sentence;
                    for j in (r.end..tokens.len()).take(self.window) {
                        if tokens[j].sentence != sentence || is_terminator[j] {
                            break;
                        }
                        negated[j] = true;
                    }
                }
                Cue::Post => {
                    let sentence = tokens[r.start].sentence;
                    for j in (0..r.start).rev().take(self.window) {
                        if tokens[j].sentence != sentence || is_terminator[j] {
                            break;
                        }
                        negated[j] = true;
                    }
                }
                Cue::Pseudo | Cue::Terminator => {}
            }
        }
        negated
    }
}

fn mask_to_ranges(mask: &[bool]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..mask.len());
    }
    out
}

/// Negated token ranges (indices into [`tokenize`] output), merged and sorted.
pub fn detect_negated_spans(text: &str, lexicon: &NegationLexicon) -> Result<Vec<Range<usize>>> {
    let scoper = NegationScoper::new(lexicon)?;
    Ok(mask_to_ranges(&scoper.mask(&tokenize(text))))
}
