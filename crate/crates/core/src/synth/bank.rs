use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::SynthError;
use crate::text;

const DEFAULT_BANK: &str = include_str!("../../data/template_bank.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct Topic {
    pub name: String,
    pub keyword: String,
    pub values: Vec<String>,
    pub persona: String,
    #[serde(default)]
    pub hard: Vec<String>,
    #[serde(default)]
    pub soft: Vec<String>,
}

impl Topic {
    pub fn persona_text(&self, value: &str) -> String {
        self.persona.replace("{v}", value)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct MspdTemplates {
    pub cue: Vec<String>,
    pub intro: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Family {
    pub name: String,
    #[serde(default)]
    pub user: Vec<String>,
    #[serde(default)]
    pub agent: Vec<String>,
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Deserialize)]
struct BankFile {
    genders: Vec<String>,
    age_bands: Vec<String>,
    mspd: MspdTemplates,
    #[serde(rename = "topic")]
    topics: Vec<Topic>,
    #[serde(rename = "family")]
    families: Vec<Family>,
}

/// Parsed template bank plus a keyword lookup for topic detection.
#[derive(Debug, Clone)]
pub struct TemplateBank {
    pub genders: Vec<String>,
    pub age_bands: Vec<String>,
    pub mspd: MspdTemplates,
    pub topics: Vec<Topic>,
    pub families: Vec<Family>,
    keyword_to_topic: BTreeMap<String, usize>,
    digest: String,
}

impl TemplateBank {
    /// The bank shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_BANK).expect("builtin template bank is valid")
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let src = fs::read_to_string(path).map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&src)
    }

    pub fn parse(src: &str) -> Result<Self, SynthError> {
        let file: BankFile = toml::from_str(src).map_err(|e| SynthError::Bank(e.to_string()))?;
        let mut keyword_to_topic = BTreeMap::new();
        for (i, t) in file.topics.iter().enumerate() {
            if t.hard.is_empty() || t.soft.is_empty() {
                return Err(SynthError::MissingVariant {
                    topic: t.name.clone(),
                    variant: if t.hard.is_empty() { "hard" } else { "soft" },
                });
            }
            if t.values.is_empty() {
                return Err(SynthError::Bank(format!("topic {} has no values", t.name)));
            }
            if !t.persona.contains("{v}") {
                return Err(SynthError::Bank(format!("topic {} persona lacks {{v}}", t.name)));
            }
            if keyword_to_topic.insert(t.keyword.clone(), i).is_some() {
                return Err(SynthError::Bank(format!("duplicate keyword {}", t.keyword)));
            }
        }
        if file.mspd.cue.is_empty() || file.mspd.intro.is_empty() {
            return Err(SynthError::Bank("mspd needs cue and intro templates".into()));
        }
        if file.genders.is_empty() || file.age_bands.is_empty() {
            return Err(SynthError::Bank("empty demographic enumeration".into()));
        }
        let digest = format!("{:x}", Sha256::digest(src.as_bytes()));
        Ok(Self {
            genders: file.genders,
            age_bands: file.age_bands,
            mspd: file.mspd,
            topics: file.topics,
            families: file.families,
            keyword_to_topic,
            digest,
        })
    }

    /// SHA-256 of the bank source text.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn family(&self, name: &str) -> Result<&Family, SynthError> {
        self.families
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| SynthError::MissingFamily(name.to_string()))
    }

    pub fn topic(&self, name: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.name == name)
    }

    /// Names of the topics whose keyword occurs in `text`.
    pub fn topics_in(&self, text: &str) -> BTreeSet<&str> {
        text::tokenize(text)
            .iter()
            .filter_map(|w| self.keyword_to_topic.get(w.as_str()))
            .map(|&i| self.topics[i].name.as_str())
            .collect()
    }
}
