//! Word-level vocabulary with a fixed block of special tokens.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::text;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEP: TokenId = 4;
pub const USR: TokenId = 5;
pub const AGT: TokenId = 6;
pub const DEMO: TokenId = 7;
pub const PERSONA: TokenId = 8;
pub const PRTL: TokenId = 9;
pub const CRTL: TokenId = 10;

/// Special tokens in id order.
pub const SPECIALS: [&str; 11] = [
    "<PAD>", "<UNK>", "<BOS>", "<EOS>", "<SEP>", "<USR>", "<AGT>", "<DEMO>", "<PERSONA>", "<PRTL>",
    "<CRTL>",
];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIALS.len()
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from empty corpora")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Frozen token table. Ids of special tokens are the constants above.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds from word counts: specials first, then words with
    /// `count >= min_count` by descending count, ties lexicographic.
    pub fn from_counts(counts: &BTreeMap<String, usize>, min_count: usize) -> Result<Self, VocabError> {
        if counts.is_empty() {
            return Err(VocabError::Empty);
        }
        let mut words: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(w, &c)| c >= min_count && !SPECIALS.contains(&w.as_str()))
            .map(|(w, &c)| (w, c))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.clone()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    /// Parses the one-token-per-line format; line number (from 0) is the id.
    pub fn parse(src: &str) -> Result<Self, VocabError> {
        let tokens: Vec<String> = src.lines().map(str::to_string).collect();
        Self::from_list(tokens)
    }

    pub fn from_list(tokens: Vec<String>) -> Result<Self, VocabError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    message: format!("expected special token {s}"),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    message: "token is empty or contains whitespace".into(),
                });
            }
            if let Some(prev) = seen.insert(t.as_str(), i) {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    message: format!("duplicate of line {}", prev + 1),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let src = fs::read_to_string(path).map_err(|e| VocabError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&src)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_text())
    }

    /// SHA-256 over the file form.
    pub fn sha256(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text::tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins word tokens back into canonical text; ids outside the table
    /// render as `<UNK>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]))
            .collect();
        text::detokenize(&words)
    }
}

/// Counts word tokens over every text of the corpora (turns, persona
/// attributes) plus the demographic enumerations of each header.
pub fn count_words(corpora: &[&Corpus]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    let mut add = |s: &str| {
        for w in text::tokenize(s) {
            *counts.entry(w).or_insert(0) += 1;
        }
    };
    for c in corpora {
        for v in c.header.genders.iter().chain(&c.header.age_bands) {
            add(v);
        }
        for e in &c.episodes {
            add(&e.demographics.gender);
            add(&e.demographics.age_band);
            for a in &e.persona_pool {
                add(&a.text);
            }
            for s in &e.sessions {
                for t in &s.turns {
                    add(&t.text);
                }
            }
        }
    }
    counts
}

pub fn build_vocab(corpora: &[&Corpus], min_count: usize) -> Result<Vocab, VocabError> {
    if corpora.iter().all(|c| c.episodes.is_empty()) {
        return Err(VocabError::Empty);
    }
    Vocab::from_counts(&count_words(corpora), min_count.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(words: &[(&str, usize)]) -> BTreeMap<String, usize> {
        words.iter().map(|(w, c)| (w.to_string(), *c)).collect()
    }

    #[test]
    fn specials_lead_and_words_sort_by_count_then_name() {
        let v = Vocab::from_counts(&counts(&[("b", 1), ("a", 1), ("z", 3)]), 1).unwrap();
        assert_eq!(&v.tokens()[..11], SPECIALS.map(String::from).as_slice());
        assert_eq!(&v.tokens()[11..], ["z", "a", "b"]);
        assert_eq!(v.id("<PRTL>"), PRTL);
        assert_eq!(v.id("<CRTL>"), CRTL);
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn min_count_drops_rare_words() {
        let v = Vocab::from_counts(&counts(&[("a", 1), ("b", 2)]), 2).unwrap();
        assert_eq!(v.len(), SPECIALS.len() + 1);
        assert_eq!(v.get("a"), None);
    }

    #[test]
    fn file_round_trip_and_hash() {
        let v = Vocab::from_counts(&counts(&[("hello", 2), ("?", 1)]), 1).unwrap();
        let back = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.sha256(), v.sha256());
        assert_eq!(v.sha256().len(), 64);
    }

    #[test]
    fn parse_rejects_bad_files() {
        assert!(matches!(Vocab::parse("<PAD>\nx\n"), Err(VocabError::Malformed { line: 2, .. })));
        let dup = format!("{}\nx\nx\n", SPECIALS.join("\n"));
        assert!(matches!(Vocab::parse(&dup), Err(VocabError::Malformed { line: 13, .. })));
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::from_counts(&counts(&[("how", 1), ("are", 1), ("you", 1), ("?", 1)]), 1).unwrap();
        let ids = v.encode("How are you?");
        assert_eq!(v.decode(&ids), "how are you ?");
        assert_eq!(v.encode("how is it")[1], UNK);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(Vocab::from_counts(&BTreeMap::new(), 1), Err(VocabError::Empty)));
    }
}
