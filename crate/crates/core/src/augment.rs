//! Per-instance persona subsets.
//!
//! * personalized agent turns get their ground-truth attribute(s) mixed with
//!   `k - |positives|` negatives,
//! * non-personalized agent turns of the personalized corpus get `k`
//!   contextually irrelevant attributes,
//! * casual-corpus turns get no persona at all.
//!
//! An attribute is contextually irrelevant to a turn when no agent turn of the
//! session grounds it and it shares no topic with the last two user turns.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusKind, DialogueContext, Episode, PersonaAttribute, Rtl, Speaker};
use crate::synth::TemplateBank;

/// How many user turns of the context decide topical relevance.
pub const RELEVANCE_WINDOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SubsetKind {
    Pr,
    Npr,
    Casual,
}

impl SubsetKind {
    /// Kind of subset an agent turn receives, from its source corpus and label.
    pub fn for_turn(source: CorpusKind, rtl: Rtl) -> Self {
        match (source.is_casual(), rtl) {
            (true, _) => SubsetKind::Casual,
            (false, Rtl::Prtl) => SubsetKind::Pr,
            (false, Rtl::Crtl) => SubsetKind::Npr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSubset {
    pub attributes: Vec<PersonaAttribute>,
    /// Ids of ground-truth attributes; empty unless `kind` is `Pr`.
    pub positive_ids: Vec<String>,
    pub kind: SubsetKind,
}

impl PersonaSubset {
    pub fn empty() -> Self {
        Self {
            attributes: Vec::new(),
            positive_ids: Vec::new(),
            kind: SubsetKind::Casual,
        }
    }

    pub fn texts(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.text.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Ground-truth attributes only.
    pub fn positives(&self) -> impl Iterator<Item = &PersonaAttribute> {
        self.attributes
            .iter()
            .filter(|a| self.positive_ids.contains(&a.id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// The user's own irrelevant attributes, topped up from other users.
    SameUserIrrelevant,
    OtherUser,
    /// Same-user and other-user candidates drawn together.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub k: usize,
    pub negative_source: NegativeSource,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k: 5,
            negative_source: NegativeSource::SameUserIrrelevant,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("subset size k must be at least 1")]
    ZeroK,
    #[error("{episode_id} session {session} turn {turn}: expected {expected}")]
    WrongTurn {
        episode_id: String,
        session: usize,
        turn: usize,
        expected: &'static str,
    },
    #[error("{episode_id} session {session} turn {turn}: {positives} positives exceed k = {k}")]
    TooManyPositives {
        episode_id: String,
        session: usize,
        turn: usize,
        positives: usize,
        k: usize,
    },
    #[error("{episode_id} session {session} turn {turn}: need {needed} negative candidates, found {found}")]
    InsufficientCandidates {
        episode_id: String,
        session: usize,
        turn: usize,
        needed: usize,
        found: usize,
    },
    #[error("unknown persona id {0}")]
    UnknownPersona(String),
}

struct Candidate<'a> {
    attr: &'a PersonaAttribute,
    topics: BTreeSet<&'a str>,
}

fn take_from<'a>(
    pool: &[&Candidate<'a>],
    rng: &mut ChaCha8Rng,
    needed: usize,
    picked: &mut Vec<&'a PersonaAttribute>,
    texts: &mut BTreeSet<&'a str>,
) {
    for i in index::sample(rng, pool.len(), pool.len()) {
        if picked.len() >= needed {
            break;
        }
        if texts.insert(pool[i].attr.text.as_str()) {
            picked.push(pool[i].attr);
        }
    }
}

/// Builds persona subsets for the agent turns of a personalized corpus.
///
/// Attributes of every other user in `episodes` form the other-user
/// negative pool.
pub struct Augmenter<'a> {
    bank: &'a TemplateBank,
    cfg: AugmentConfig,
    foreign: Vec<(&'a str, Candidate<'a>)>,
}

impl<'a> Augmenter<'a> {
    pub fn new(
        bank: &'a TemplateBank,
        cfg: AugmentConfig,
        episodes: &'a [Episode],
    ) -> Result<Self, AugmentError> {
        if cfg.k == 0 {
            return Err(AugmentError::ZeroK);
        }
        let mut seen = BTreeSet::new();
        let mut foreign = Vec::new();
        for e in episodes {
            for a in &e.persona_pool {
                if seen.insert((e.user_id.as_str(), a.id.as_str())) {
                    foreign.push((
                        e.user_id.as_str(),
                        Candidate {
                            attr: a,
                            topics: bank.topics_in(&a.text),
                        },
                    ));
                }
            }
        }
        Ok(Self { bank, cfg, foreign })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    fn rng_for(&self, episode_id: &str, session: usize, turn: usize) -> ChaCha8Rng {
        let key = format!("{episode_id}/{session}/{turn}");
        let digest = Sha256::digest(key.as_bytes());
        let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        rng
    }

    /// Topics raised by the last user turns before `turn`.
    fn context_topics(&self, episode: &'a Episode, session: usize, turn: usize) -> BTreeSet<&'a str> {
        let turns = &episode.sessions[session].turns[..turn];
        turns
            .iter()
            .rev()
            .filter(|t| t.speaker == Speaker::User)
            .take(RELEVANCE_WINDOW)
            .flat_map(|t| self.bank.topics_in(&t.text))
            .collect()
    }

    fn own_candidates(&self, episode: &'a Episode) -> Vec<Candidate<'a>> {
        episode
            .persona_pool
            .iter()
            .map(|a| Candidate {
                attr: a,
                topics: self.bank.topics_in(&a.text),
            })
            .collect()
    }

    fn other_candidates(&self, episode: &Episode) -> impl Iterator<Item = &Candidate<'a>> {
        let user = episode.user_id.clone();
        self.foreign
            .iter()
            .filter(move |(u, _)| *u != user)
            .map(|(_, c)| c)
    }

    /// Draws `needed` negatives with distinct texts. `accept` sees each
    /// candidate and whether it belongs to the episode's own user.
    fn draw_negatives(
        &self,
        rng: &mut ChaCha8Rng,
        episode: &'a Episode,
        needed: usize,
        taken_texts: &BTreeSet<&str>,
        accept: &dyn Fn(&Candidate<'a>, bool) -> bool,
        loc: (usize, usize),
    ) -> Result<Vec<PersonaAttribute>, AugmentError> {
        let own_all = self.own_candidates(episode);
        let own: Vec<&Candidate<'a>> = own_all
            .iter()
            .filter(|c| accept(c, true) && !taken_texts.contains(c.attr.text.as_str()))
            .collect();
        let others = || -> Vec<&Candidate<'a>> {
            self.other_candidates(episode)
                .filter(|c| accept(c, false) && !taken_texts.contains(c.attr.text.as_str()))
                .collect()
        };

        let mut picked: Vec<&PersonaAttribute> = Vec::with_capacity(needed);
        let mut texts: BTreeSet<&str> = BTreeSet::new();
        match self.cfg.negative_source {
            NegativeSource::SameUserIrrelevant => {
                take_from(&own, rng, needed, &mut picked, &mut texts);
                if picked.len() < needed {
                    take_from(&others(), rng, needed, &mut picked, &mut texts);
                }
            }
            NegativeSource::OtherUser => take_from(&others(), rng, needed, &mut picked, &mut texts),
            NegativeSource::Mixed => {
                let mut all = own;
                all.extend(others());
                take_from(&all, rng, needed, &mut picked, &mut texts);
            }
        }
        if picked.len() < needed {
            return Err(AugmentError::InsufficientCandidates {
                episode_id: episode.episode_id.clone(),
                session: loc.0,
                turn: loc.1,
                needed,
                found: picked.len(),
            });
        }
        Ok(picked.into_iter().map(strip).collect())
    }

    fn agent_turn(
        &self,
        episode: &Episode,
        session: usize,
        turn: usize,
        rtl: Rtl,
        expected: &'static str,
    ) -> Result<(), AugmentError> {
        let ok = episode
            .sessions
            .get(session)
            .and_then(|s| s.turns.get(turn))
            .is_some_and(|t| t.speaker == Speaker::Agent && t.rtl == Some(rtl));
        if ok {
            Ok(())
        } else {
            Err(AugmentError::WrongTurn {
                episode_id: episode.episode_id.clone(),
                session,
                turn,
                expected,
            })
        }
    }

    /// Ground-truth attributes plus `k - |positives|` negatives, shuffled.
    pub fn augment_pr(
        &self,
        episode: &'a Episode,
        session: usize,
        turn: usize,
    ) -> Result<PersonaSubset, AugmentError> {
        self.agent_turn(episode, session, turn, Rtl::Prtl, "a personalized agent turn")?;
        let t = &episode.sessions[session].turns[turn];
        let positives: Vec<&PersonaAttribute> = t
            .grounded_persona_ids
            .iter()
            .map(|id| episode.persona(id).ok_or_else(|| AugmentError::UnknownPersona(id.clone())))
            .collect::<Result<_, _>>()?;
        let k = self.cfg.k;
        if positives.len() > k {
            return Err(AugmentError::TooManyPositives {
                episode_id: episode.episode_id.clone(),
                session,
                turn,
                positives: positives.len(),
                k,
            });
        }
        let grounded = episode.sessions[session].grounded_ids();
        let positive_topics: BTreeSet<&str> = positives
            .iter()
            .flat_map(|p| self.bank.topics_in(&p.text))
            .collect();
        let accept = |c: &Candidate<'a>, own: bool| {
            if own {
                !grounded.contains(c.attr.id.as_str())
            } else {
                // another user's attribute must not compete with the positive's topic
                c.topics.is_disjoint(&positive_topics)
            }
        };
        let taken: BTreeSet<&str> = positives.iter().map(|p| p.text.as_str()).collect();
        let mut rng = self.rng_for(&episode.episode_id, session, turn);
        let negatives = self.draw_negatives(
            &mut rng,
            episode,
            k - positives.len(),
            &taken,
            &accept,
            (session, turn),
        )?;
        let mut attributes: Vec<PersonaAttribute> = positives.iter().map(|p| strip(p)).collect();
        attributes.extend(negatives);
        attributes.shuffle(&mut rng);
        Ok(PersonaSubset {
            attributes,
            positive_ids: t.grounded_persona_ids.clone(),
            kind: SubsetKind::Pr,
        })
    }

    /// `k` contextually irrelevant attributes for a non-personalized turn.
    pub fn augment_npr(
        &self,
        episode: &'a Episode,
        session: usize,
        turn: usize,
    ) -> Result<PersonaSubset, AugmentError> {
        self.agent_turn(episode, session, turn, Rtl::Crtl, "a casual agent turn")?;
        let grounded = episode.sessions[session].grounded_ids();
        let topics = self.context_topics(episode, session, turn);
        let accept = |c: &Candidate<'a>, own: bool| {
            !(own && grounded.contains(c.attr.id.as_str())) && c.topics.is_disjoint(&topics)
        };
        let mut rng = self.rng_for(&episode.episode_id, session, turn);
        let mut attributes = self.draw_negatives(
            &mut rng,
            episode,
            self.cfg.k,
            &BTreeSet::new(),
            &accept,
            (session, turn),
        )?;
        attributes.shuffle(&mut rng);
        Ok(PersonaSubset {
            attributes,
            positive_ids: Vec::new(),
            kind: SubsetKind::Npr,
        })
    }

    /// Dispatches on the turn's label: personalized turns get a positive subset,
    /// casual ones a negative subset.
    pub fn augment(
        &self,
        episode: &'a Episode,
        session: usize,
        turn: usize,
    ) -> Result<PersonaSubset, AugmentError> {
        match episode.sessions[session].turns[turn].rtl {
            Some(Rtl::Prtl) => self.augment_pr(episode, session, turn),
            _ => self.augment_npr(episode, session, turn),
        }
    }

    /// Whether `attr` is contextually irrelevant to the given turn.
    pub fn is_irrelevant(&self, episode: &Episode, session: usize, turn: usize, attr: &PersonaAttribute) -> bool {
        let ctx = DialogueContext::before(&episode.sessions[session], turn);
        let context_topics: BTreeSet<&str> = ctx
            .last_user_turns(RELEVANCE_WINDOW)
            .into_iter()
            .flat_map(|t| self.bank.topics_in(t))
            .collect();
        let grounded = episode.sessions[session].grounded_ids();
        !grounded.contains(attr.id.as_str())
            && self.bank.topics_in(&attr.text).is_disjoint(&context_topics)
    }
}

/// Casual-corpus turns carry no persona.
pub fn augment_casual() -> PersonaSubset {
    PersonaSubset::empty()
}

fn strip(a: &PersonaAttribute) -> PersonaAttribute {
    PersonaAttribute::new(a.id.clone(), a.text.clone())
}
