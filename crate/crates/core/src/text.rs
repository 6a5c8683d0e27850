//! Tokenization, normalization and n-gram counting shared by every other
//! module.
//!
//! The tokenizer splits on whitespace and then peels leading and trailing
//! punctuation marks (`. , ! ? ' ’ ; :`) into their own tokens. Internal
//! punctuation such as the apostrophe in `I'll` stays inside the token.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PUNCT: &[char] = &['.', ',', '!', '?', '\'', '’', ';', ':'];
const TERMINAL: &[char] = &['.', '!', '?'];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    /// Capitalized and not sentence-initial. Only feeds the copy-error
    /// heuristic.
    pub is_proper_noun_guess: bool,
}

impl Token {
    pub fn new(surface: impl Into<String>) -> Self {
        Token { surface: surface.into(), is_proper_noun_guess: false }
    }

    pub fn as_str(&self) -> &str {
        &self.surface
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.surface
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationPolicy {
    pub lowercase: bool,
    pub strip_terminal_punct: bool,
}

impl Default for NormalizationPolicy {
    /// The metric default: casing and trailing `.`/`!`/`?` are ignored.
    fn default() -> Self {
        NormalizationPolicy { lowercase: true, strip_terminal_punct: true }
    }
}

impl NormalizationPolicy {
    pub const IDENTITY: NormalizationPolicy = NormalizationPolicy { lowercase: false, strip_terminal_punct: false };
}

fn split_word(word: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    let mut end = chars.len();
    while start < end && PUNCT.contains(&chars[start]) {
        start += 1;
    }
    while end > start && PUNCT.contains(&chars[end - 1]) {
        end -= 1;
    }
    for c in &chars[..start] {
        out.push(c.to_string());
    }
    if start < end {
        out.push(chars[start..end].iter().collect());
    }
    for c in &chars[end..] {
        out.push(c.to_string());
    }
}

fn is_first_person_i(s: &str) -> bool {
    s == "I" || s.starts_with("I'") || s.starts_with("I’")
}

/// Splits `text` into tokens and marks proper-noun guesses.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut surfaces = Vec::new();
    for word in text.split_whitespace() {
        split_word(word, &mut surfaces);
    }
    let mut tokens = Vec::with_capacity(surfaces.len());
    let mut sentence_initial = true;
    for s in surfaces {
        let capitalized = s.chars().next().is_some_and(char::is_uppercase);
        let is_terminal = s.chars().all(|c| TERMINAL.contains(&c));
        let proper = capitalized && !sentence_initial && !is_first_person_i(&s);
        sentence_initial = is_terminal;
        tokens.push(Token { surface: s, is_proper_noun_guess: proper });
    }
    tokens
}

/// Tokenizes and returns only the surfaces.
pub fn tokenize_surfaces(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.surface).collect()
}

/// Joins surfaces with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

fn is_terminal_mark(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| TERMINAL.contains(&c))
}

/// Applies `policy`, preserving order. Idempotent: every trailing terminal
/// mark is removed, not just the last one.
pub fn normalize(tokens: &[Token], policy: NormalizationPolicy) -> Vec<Token> {
    let mut end = tokens.len();
    if policy.strip_terminal_punct {
        while end > 0 && is_terminal_mark(&tokens[end - 1].surface) {
            end -= 1;
        }
    }
    tokens[..end]
        .iter()
        .map(|t| Token {
            surface: if policy.lowercase { t.surface.to_lowercase() } else { t.surface.clone() },
            is_proper_noun_guess: t.is_proper_noun_guess,
        })
        .collect()
}

/// [`normalize`] over plain strings.
pub fn normalize_surfaces<S: AsRef<str>>(tokens: &[S], policy: NormalizationPolicy) -> Vec<String> {
    let mut end = tokens.len();
    if policy.strip_terminal_punct {
        while end > 0 && is_terminal_mark(tokens[end - 1].as_ref()) {
            end -= 1;
        }
    }
    tokens[..end]
        .iter()
        .map(|t| if policy.lowercase { t.as_ref().to_lowercase() } else { t.as_ref().to_string() })
        .collect()
}

pub type NgramCounts<'a> = HashMap<Vec<&'a str>, usize>;

/// Every contiguous `n`-token window, with multiplicity.
pub fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> Result<NgramCounts<'_>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(|t| t.as_ref()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    Ok(counts)
}
