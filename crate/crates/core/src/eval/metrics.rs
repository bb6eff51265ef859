//! Response-level metrics: persona F1, P-Cover and grounding classification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{PersonaAttribute, Rtl};
use crate::text::{content_words, jaccard};

/// Jaccard threshold separating hard from soft grounding.
pub const TAU_HARD: f64 = 0.5;

/// Document frequencies of content words; `idf(w) = ln((1 + N) / (1 + df(w))) + 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IdfTable {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl IdfTable {
    /// Each text is one document; duplicates count once.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let docs: BTreeSet<&str> = texts.into_iter().collect();
        let mut df = BTreeMap::new();
        for d in &docs {
            for w in content_words(d) {
                *df.entry(w).or_insert(0) += 1;
            }
        }
        Self { n_docs: docs.len(), df }
    }

    pub fn idf(&self, word: &str) -> f64 {
        let df = self.df.get(word).copied().unwrap_or(0);
        ((1 + self.n_docs) as f64 / (1 + df) as f64).ln() + 1.0
    }
}

fn f1_of(response: &BTreeSet<String>, persona: &BTreeSet<String>) -> f64 {
    if response.is_empty() || persona.is_empty() {
        return 0.0;
    }
    let overlap = response.intersection(persona).count() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / response.len() as f64;
    let r = overlap / persona.len() as f64;
    2.0 * p * r / (p + r)
}

/// Content-word F1 between a response and the union of the attributes.
pub fn persona_f1<S: AsRef<str>>(response: &str, persona: &[S]) -> f64 {
    let union: BTreeSet<String> = persona.iter().flat_map(|a| content_words(a.as_ref())).collect();
    f1_of(&content_words(response), &union)
}

/// Best IDF-weighted share of one attribute's content words found in the response.
pub fn p_cover<S: AsRef<str>>(response: &str, persona: &[S], idf: &IdfTable) -> f64 {
    let resp = content_words(response);
    persona
        .iter()
        .map(|a| {
            let words = content_words(a.as_ref());
            let mass: f64 = words.iter().map(|w| idf.idf(w)).sum();
            if mass == 0.0 {
                return 0.0;
            }
            let hit: f64 = words.iter().filter(|w| resp.contains(*w)).map(|w| idf.idf(w)).sum();
            hit / mass
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GroundingLevel {
    Hard,
    Soft,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingJudgment {
    pub level: GroundingLevel,
    pub similarity: f64,
    pub matched_persona_id: Option<String>,
}

/// Casual responses are `None`; personalized ones are `Hard` when the most
/// similar attribute reaches [`TAU_HARD`] content-word Jaccard, else `Soft`.
/// Equal similarities resolve to the lowest attribute id.
pub fn classify_grounding(response: &str, persona: &[PersonaAttribute], rtl: Rtl) -> GroundingJudgment {
    if rtl == Rtl::Crtl {
        return GroundingJudgment {
            level: GroundingLevel::None,
            similarity: 0.0,
            matched_persona_id: None,
        };
    }
    let resp = content_words(response);
    let mut best: Option<(f64, &str)> = None;
    for a in persona {
        let s = jaccard(&resp, &content_words(&a.text));
        best = match best {
            Some((bs, bid)) if bs > s || (bs == s && bid <= a.id.as_str()) => Some((bs, bid)),
            _ => Some((s, a.id.as_str())),
        };
    }
    let (similarity, id) = best.map_or((0.0, None), |(s, id)| (s, Some(id.to_string())));
    GroundingJudgment {
        level: if similarity >= TAU_HARD {
            GroundingLevel::Hard
        } else {
            GroundingLevel::Soft
        },
        similarity,
        matched_persona_id: id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(texts: &[&str]) -> Vec<PersonaAttribute> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| PersonaAttribute::new(format!("p{i}"), *t))
            .collect()
    }

    #[test]
    fn f1_examples() {
        assert_eq!(persona_f1("i have a pet cat", &["i have a pet cat"]), 1.0);
        assert_eq!(persona_f1("sunny weather", &["i have a pet cat"]), 0.0);
        assert_eq!(persona_f1("", &["cat"]), 0.0);
        assert_eq!(persona_f1::<&str>("cat", &[]), 0.0);
        let f = persona_f1("apple banana cherry", &["banana cherry durian"]);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn p_cover_examples() {
        let idf = IdfTable::from_texts(["apple banana", "banana cherry", "cherry durian", "elder"]);
        assert_eq!(p_cover("apple banana !", &["apple banana"], &idf), 1.0);
        assert_eq!(p_cover("fig", &["apple banana"], &idf), 0.0);
        // N = 4; df apple 1, banana 2, cherry 2, durian 1
        let i1 = (5f64 / 2.0).ln() + 1.0;
        let i2 = (5f64 / 3.0).ln() + 1.0;
        let first = i2 / (i1 + i2);
        let second = i2 / (i2 + i1);
        let got = p_cover("banana cherry fig", &["apple banana", "cherry durian"], &idf);
        assert!((got - first.max(second)).abs() < 1e-12);
        let got = p_cover("apple banana cherry", &["apple banana", "cherry durian"], &idf);
        assert_eq!(got, 1.0);
    }

    #[test]
    fn idf_of_unseen_word_is_maximal() {
        let idf = IdfTable::from_texts(["apple", "apple", "banana"]);
        assert_eq!(idf.n_docs, 2);
        assert!(idf.idf("zebra") > idf.idf("apple"));
        assert!((idf.idf("zebra") - (3f64.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn grounding_examples() {
        let p = attrs(&["i have a pet cat", "my job is being a nurse"]);
        let j = classify_grounding("i have a pet cat", &p, Rtl::Prtl);
        assert_eq!(j.level, GroundingLevel::Hard);
        assert_eq!(j.similarity, 1.0);
        assert_eq!(j.matched_persona_id.as_deref(), Some("p0"));

        let j = classify_grounding("sunny weather today", &p, Rtl::Prtl);
        assert_eq!(j.level, GroundingLevel::Soft);
        assert_eq!(j.similarity, 0.0);
        assert_eq!(j.matched_persona_id.as_deref(), Some("p0"));

        let j = classify_grounding("i have a pet cat", &p, Rtl::Crtl);
        assert_eq!(j.level, GroundingLevel::None);
        assert_eq!(j.matched_persona_id, None);
    }

    #[test]
    fn grounding_ignores_order_and_punctuation() {
        let p = attrs(&["i have a pet cat at home"]);
        let a = classify_grounding("your pet cat , at home !", &p, Rtl::Prtl);
        let b = classify_grounding("home at cat pet your", &p, Rtl::Prtl);
        assert_eq!(a, b);
    }

    #[test]
    fn tie_breaks_on_lowest_id() {
        let mut p = attrs(&["dog park", "cat park"]);
        p[0].id = "z".into();
        p[1].id = "a".into();
        let j = classify_grounding("park", &p, Rtl::Prtl);
        assert_eq!(j.matched_persona_id.as_deref(), Some("a"));
    }
}
