//! Lexical persona retrieval: IDF-weighted cosine between each attribute's
//! content words and the recent user turns.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueContext, PersonaAttribute};
use crate::text::content_words;

/// User turns, counted from the end of the context, that form the query.
pub const QUERY_TURNS: usize = 2;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("user {user} has no attribute {id}")]
    UnknownAttribute { user: String, id: String },
    #[error("user {user} already has attribute {id}")]
    DuplicateAttribute { user: String, id: String },
    #[error("attribute text has no content words")]
    EmptyAttribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: String,
    pub text: String,
    pub score: f64,
}

/// Inverted index over one user's persona pool. Any mutation rebuilds it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PersonaIndex {
    attributes: Vec<PersonaAttribute>,
    postings: BTreeMap<String, Vec<usize>>,
    norms: Vec<f64>,
}

impl PersonaIndex {
    pub fn new(mut attributes: Vec<PersonaAttribute>) -> Self {
        attributes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut postings: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, a) in attributes.iter().enumerate() {
            for w in content_words(&a.text) {
                postings.entry(w).or_default().push(i);
            }
        }
        let mut ix = Self {
            attributes,
            postings,
            norms: Vec::new(),
        };
        let mut sq = vec![0.0; ix.attributes.len()];
        for (w, p) in &ix.postings {
            let idf = ix.idf(w);
            for &i in p {
                sq[i] += idf * idf;
            }
        }
        ix.norms = sq.into_iter().map(f64::sqrt).collect();
        ix
    }

    pub fn attributes(&self) -> &[PersonaAttribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Number of (word, attribute) entries.
    pub fn postings_count(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    /// Smoothed IDF over the pool: `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, word: &str) -> f64 {
        let df = self.postings.get(word).map_or(0, Vec::len);
        ((1 + self.attributes.len()) as f64 / (1 + df) as f64).ln() + 1.0
    }

    /// Ranks the pool against the content words of `query`. All attributes
    /// are scored, so the top `k` may include zero scores; ties go to the
    /// lower id.
    pub fn search(&self, query: &str, k: usize) -> Vec<Retrieved> {
        let q = content_words(query);
        let mut dot = vec![0.0; self.attributes.len()];
        let mut qsq = 0.0;
        for w in &q {
            let idf = self.idf(w);
            qsq += idf * idf;
            for &i in self.postings.get(w).map_or(&[][..], Vec::as_slice) {
                dot[i] += idf * idf;
            }
        }
        let qn = qsq.sqrt();
        let mut scored: Vec<(usize, f64)> = dot
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let den = qn * self.norms[i];
                (i, if den > 0.0 { d / den } else { 0.0 })
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(k)
            .map(|(i, score)| Retrieved {
                id: self.attributes[i].id.clone(),
                text: self.attributes[i].text.clone(),
                score,
            })
            .collect()
    }

    /// Queries with the last [`QUERY_TURNS`] user turns.
    pub fn retrieve(&self, context: &DialogueContext, k: usize) -> Vec<Retrieved> {
        self.search(&context.last_user_turns(QUERY_TURNS).join(" "), k)
    }
}

/// Persona pools of every user, each with its index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PersonaStore {
    users: BTreeMap<String, PersonaIndex>,
}

impl PersonaStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn index(&self, user: &str) -> Result<&PersonaIndex, RetrievalError> {
        self.users
            .get(user)
            .ok_or_else(|| RetrievalError::UnknownUser(user.to_string()))
    }

    pub fn list(&self, user: &str) -> Result<&[PersonaAttribute], RetrievalError> {
        self.index(user).map(PersonaIndex::attributes)
    }

    /// Registers a user with an empty pool; no-op if present.
    pub fn ensure_user(&mut self, user: &str) {
        self.users.entry(user.to_string()).or_default();
    }

    /// Replaces a user's whole pool.
    pub fn set_pool(&mut self, user: &str, attributes: Vec<PersonaAttribute>) {
        self.users.insert(user.to_string(), PersonaIndex::new(attributes));
    }

    /// Adds an attribute, creating the user on first use. Without an id the
    /// next free `pNNN` is assigned.
    pub fn add(&mut self, user: &str, id: Option<&str>, text: &str) -> Result<PersonaAttribute, RetrievalError> {
        if content_words(text).is_empty() {
            return Err(RetrievalError::EmptyAttribute);
        }
        let pool = self.users.get(user).map(|ix| ix.attributes.clone()).unwrap_or_default();
        let taken: BTreeSet<&str> = pool.iter().map(|a| a.id.as_str()).collect();
        let id = match id {
            Some(id) if taken.contains(id) => {
                return Err(RetrievalError::DuplicateAttribute {
                    user: user.to_string(),
                    id: id.to_string(),
                })
            }
            Some(id) => id.to_string(),
            None => (0..)
                .map(|n| format!("p{n:03}"))
                .find(|c| !taken.contains(c.as_str()))
                .expect("unbounded id space"),
        };
        let attr = PersonaAttribute::new(id, text);
        let mut pool = pool;
        pool.push(attr.clone());
        self.set_pool(user, pool);
        Ok(attr)
    }

    pub fn delete(&mut self, user: &str, id: &str) -> Result<PersonaAttribute, RetrievalError> {
        let mut pool = self.list(user)?.to_vec();
        let pos = pool
            .iter()
            .position(|a| a.id == id)
            .ok_or_else(|| RetrievalError::UnknownAttribute {
                user: user.to_string(),
                id: id.to_string(),
            })?;
        let removed = pool.remove(pos);
        self.set_pool(user, pool);
        Ok(removed)
    }

    pub fn retrieve(&self, user: &str, context: &DialogueContext, k: usize) -> Result<Vec<Retrieved>, RetrievalError> {
        Ok(self.index(user)?.retrieve(context, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;

    fn pool(texts: &[&str]) -> Vec<PersonaAttribute> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| PersonaAttribute::new(format!("a{i}"), *t))
            .collect()
    }

    #[test]
    fn empty_pool_gives_empty_subset() {
        assert!(PersonaIndex::new(vec![]).search("hiking on weekends", 5).is_empty());
    }

    #[test]
    fn verbatim_attribute_ranks_first() {
        let ix = PersonaIndex::new(pool(&["i have a golden retriever", "i love jazz music", "i work as a nurse"]));
        let r = ix.search("I love jazz music", 3);
        assert_eq!(r[0].id, "a1");
        assert!((r[0].score - 1.0).abs() < 1e-12);
        assert_eq!(r.len(), 3);
        assert_eq!(r[1].score, 0.0);
        assert_eq!((r[1].id.as_str(), r[2].id.as_str()), ("a0", "a2"));
    }

    #[test]
    fn query_window_is_the_last_two_user_turns() {
        let ix = PersonaIndex::new(pool(&["i play chess", "i grow tomatoes"]));
        let ctx = DialogueContext {
            turns: vec![
                (Speaker::User, "chess tonight".into()),
                (Speaker::Agent, "sounds fun".into()),
                (Speaker::User, "hello".into()),
                (Speaker::Agent, "hi".into()),
                (Speaker::User, "my tomatoes are ripe".into()),
            ],
        };
        let r = ix.retrieve(&ctx, 2);
        assert_eq!(r[0].id, "a1");
        assert_eq!(r[1].score, 0.0);
    }

    #[test]
    fn crud() {
        let mut s = PersonaStore::new();
        assert_eq!(s.list("u"), Err(RetrievalError::UnknownUser("u".into())));
        let a = s.add("u", None, "i like sushi").unwrap();
        assert_eq!(a.id, "p000");
        assert_eq!(s.add("u", None, "i run marathons").unwrap().id, "p001");
        assert!(matches!(s.add("u", Some("p000"), "x y"), Err(RetrievalError::DuplicateAttribute { .. })));
        assert_eq!(s.add("u", None, "the a"), Err(RetrievalError::EmptyAttribute));
        s.delete("u", "p000").unwrap();
        assert!(matches!(s.delete("u", "p000"), Err(RetrievalError::UnknownAttribute { .. })));
        let r = s.retrieve("u", &DialogueContext { turns: vec![(Speaker::User, "sushi".into())] }, 5).unwrap();
        assert!(r.iter().all(|x| x.id != "p000"));
        assert_eq!(s.add("u", None, "i like ramen").unwrap().id, "p000");
    }
}
