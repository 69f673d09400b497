//! Shared tokenizer: maximal alphanumeric runs, lowercased, with byte spans
//! and a sentence counter that advances on `.`, `;` and newlines.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub lower: String,
    pub start: usize,
    pub end: usize,
    pub sentence: usize,
}

pub fn is_sentence_boundary(c: char) -> bool {
    matches!(c, '.' | ';' | '\n')
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut sentence = 0usize;
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            tokens.push(Token { lower: text[s..i].to_lowercase(), start: s, end: i, sentence });
        }
        if is_sentence_boundary(c) {
            sentence += 1;
        }
    }
    if let Some(s) = start {
        tokens.push(Token { lower: text[s..].to_lowercase(), start: s, end: text.len(), sentence });
    }
    tokens
}

/// Lowercased token strings only; used for dictionary keys and hashing.
pub fn token_strings(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.lower).collect()
}
