//! Word-level text normalization shared by the tokenizer, metrics and retrieval.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

const STOPWORDS_SRC: &str = include_str!("../data/stopwords.txt");
const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_SRC
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

pub fn is_punct(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| PUNCT.contains(&c))
}

/// Lowercases and splits on whitespace, detaching punctuation into its own tokens.
///
/// Canonical text (space-separated, lowercase, punctuation already detached)
/// tokenizes to exactly its whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut word = String::new();
        for ch in lower.chars() {
            if PUNCT.contains(&ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Joins tokens back into canonical text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t.as_ref());
    }
    s
}

/// Distinct content words of a text: tokens that are neither punctuation nor stopwords.
pub fn content_words(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_punct(t) && !is_stopword(t))
        .collect()
}

/// Jaccard similarity of two word sets; 0 when both are empty.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
