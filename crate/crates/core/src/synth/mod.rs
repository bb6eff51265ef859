//! Synthetic multi-session personalized corpus and casual corpora.
//!
//! Episodes are built from a [`TemplateBank`]. Each episode draws its random
//! numbers from its own ChaCha stream keyed by `(seed, episode_index)`, so an
//! episode can be regenerated on its own and any partition of the work yields
//! the same bytes.

mod bank;

use std::collections::BTreeSet;
use std::io;
use std::path::PathBuf;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bank::{Family, MspdTemplates, TemplateBank, Topic};

use crate::corpus::{
    Corpus, CorpusHeader, CorpusKind, Demographics, Episode, PersonaAttribute, Rtl, Session, Turn,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("reading template bank {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("template bank: {0}")]
    Bank(String),
    #[error("template bank: topic {topic} has no {variant} grounded-response template")]
    MissingVariant { topic: String, variant: &'static str },
    #[error("template bank: no dialogue family named {0:?}")]
    MissingFamily(String),
    #[error("generator config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_episodes: usize,
    pub sessions_per_episode: usize,
    /// Inclusive range of turns per session.
    pub turns_per_session: (usize, usize),
    /// Inclusive range of persona attributes known before the first session.
    pub initial_personas: (usize, usize),
    /// Probabilities of an episode revealing 1, 2 or 3 new attributes.
    pub new_persona_weights: [f64; 3],
    pub max_pr_per_session: usize,
    /// Probability that a session gets `max_pr_per_session` personalized turns
    /// rather than one fewer.
    pub full_pr_probability: f64,
    /// Probability that the user turn before a personalized response raises its topic.
    pub cue_rate: f64,
    /// Per-user-turn probability of revealing a pending attribute.
    pub intro_rate: f64,
    /// Probability that a casual user turn mentions a persona topic anyway.
    pub distractor_rate: f64,
    /// Share of grounded responses drawn from the hard templates.
    pub hard_rate: f64,
    pub template_bank_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_episodes: 100,
            sessions_per_episode: 4,
            turns_per_session: (10, 12),
            initial_personas: (4, 6),
            new_persona_weights: [0.14, 0.54, 0.32],
            max_pr_per_session: 2,
            full_pr_probability: 0.9,
            cue_rate: 0.92,
            intro_rate: 0.2,
            distractor_rate: 0.1,
            hard_rate: 0.6,
            template_bank_path: None,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn bank(&self) -> Result<TemplateBank, SynthError> {
        match &self.template_bank_path {
            Some(p) => TemplateBank::load(p),
            None => Ok(TemplateBank::builtin()),
        }
    }

    fn check(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.turns_per_session;
        if lo == 0 || lo > hi {
            return Err(SynthError::Config(format!("bad turn range {lo}..={hi}")));
        }
        let (a, b) = self.initial_personas;
        if a > b {
            return Err(SynthError::Config(format!("bad persona range {a}..={b}")));
        }
        for p in [
            self.full_pr_probability,
            self.cue_rate,
            self.intro_rate,
            self.distractor_rate,
            self.hard_rate,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("probability {p} out of range")));
            }
        }
        Ok(())
    }

    fn header(&self, bank: &TemplateBank, kind: CorpusKind) -> CorpusHeader {
        CorpusHeader {
            genders: bank.genders.clone(),
            age_bands: bank.age_bands.clone(),
            max_pr_per_session: self.max_pr_per_session,
            session_turns: Some(self.turns_per_session),
            ..CorpusHeader::new(kind)
        }
    }
}

fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [String]) -> (usize, &'a str) {
    let i = rng.gen_range(0..items.len());
    (i, items[i].as_str())
}

fn demographics<R: Rng>(rng: &mut R, bank: &TemplateBank) -> Demographics {
    Demographics {
        gender: pick(rng, &bank.genders).1.to_string(),
        age_band: pick(rng, &bank.age_bands).1.to_string(),
    }
}

struct PlannedPersona {
    attr: PersonaAttribute,
    topic: usize,
    value: String,
}

/// Generates the personalized multi-session corpus.
pub fn generate_mspd(cfg: &GeneratorConfig) -> Result<Corpus, SynthError> {
    let bank = cfg.bank()?;
    generate_mspd_with(cfg, &bank)
}

pub fn generate_mspd_with(cfg: &GeneratorConfig, bank: &TemplateBank) -> Result<Corpus, SynthError> {
    cfg.check()?;
    let n_topics_needed = cfg.initial_personas.1 + 3;
    if bank.topics.len() < n_topics_needed {
        return Err(SynthError::Config(format!(
            "bank has {} topics, need {n_topics_needed}",
            bank.topics.len()
        )));
    }
    let daily = bank.family("daily")?;
    if daily.user.is_empty() || daily.agent.is_empty() {
        return Err(SynthError::Bank("daily family needs user and agent templates".into()));
    }
    let episodes = (0..cfg.n_episodes)
        .map(|i| mspd_episode(cfg, bank, daily, i))
        .collect();
    Ok(Corpus::new(cfg.header(bank, CorpusKind::Mspd), episodes))
}

/// Regenerates a single personalized episode; identical to the `index`-th
/// episode of [`generate_mspd_with`].
pub fn mspd_episode(
    cfg: &GeneratorConfig,
    bank: &TemplateBank,
    daily: &Family,
    index: usize,
) -> Episode {
    let mut rng = episode_rng(cfg.seed, index);
    let user_id = format!("mspd-{:x}-u{index:05}", cfg.seed);
    let demographics = demographics(&mut rng, bank);

    let n_initial = rng.gen_range(cfg.initial_personas.0..=cfg.initial_personas.1);
    let n_new = {
        let x: f64 = rng.gen();
        let w = cfg.new_persona_weights;
        let total: f64 = w.iter().sum();
        if x * total < w[0] {
            1
        } else if x * total < w[0] + w[1] {
            2
        } else {
            3
        }
    };
    let topic_ids = index::sample(&mut rng, bank.topics.len(), n_initial + n_new).into_vec();
    let mut planned: Vec<PlannedPersona> = topic_ids
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let topic = &bank.topics[t];
            let value = pick(&mut rng, &topic.values).1.to_string();
            PlannedPersona {
                attr: PersonaAttribute::new(format!("{user_id}-p{j}"), topic.persona_text(&value)),
                topic: t,
                value,
            }
        })
        .collect();
    // indices into `planned`
    let mut known: Vec<usize> = (0..n_initial).collect();
    let mut pending: Vec<usize> = (n_initial..n_initial + n_new).collect();

    let mut sessions = Vec::with_capacity(cfg.sessions_per_episode);
    for si in 0..cfg.sessions_per_episode {
        let n_turns = rng.gen_range(cfg.turns_per_session.0..=cfg.turns_per_session.1);
        let agent_slots: Vec<usize> = (1..n_turns).step_by(2).collect();
        let n_pr = if cfg.max_pr_per_session == 0 {
            0
        } else if rng.gen_bool(cfg.full_pr_probability) {
            cfg.max_pr_per_session
        } else {
            cfg.max_pr_per_session - 1
        }
        .min(agent_slots.len());
        let pr_slots: BTreeSet<usize> = index::sample(&mut rng, agent_slots.len(), n_pr)
            .into_iter()
            .map(|i| agent_slots[i])
            .collect();

        let mut grounded_here: BTreeSet<usize> = BTreeSet::new();
        let mut grounding_next: Option<usize> = None;
        let mut turns = Vec::with_capacity(n_turns);
        for ti in 0..n_turns {
            if ti % 2 == 1 {
                let turn = match grounding_next.take() {
                    Some(p) => {
                        let pp = &planned[p];
                        let topic = &bank.topics[pp.topic];
                        let (variant, templates) = if rng.gen_bool(cfg.hard_rate) {
                            ("hard", &topic.hard)
                        } else {
                            ("soft", &topic.soft)
                        };
                        let (k, tpl) = pick(&mut rng, templates);
                        let mut t = Turn::agent(tpl.replace("{v}", &pp.value), Rtl::Prtl);
                        t.grounded_persona_ids = vec![pp.attr.id.clone()];
                        t.template_id = Some(format!("{}.{variant}.{k}", topic.name));
                        t
                    }
                    None => {
                        let (k, tpl) = pick(&mut rng, &daily.agent);
                        let mut t = Turn::agent(tpl, Rtl::Crtl);
                        t.template_id = Some(format!("daily.agent.{k}"));
                        t
                    }
                };
                turns.push(turn);
                continue;
            }

            let mut turn = None;
            if pr_slots.contains(&(ti + 1)) {
                let candidates: Vec<usize> = known
                    .iter()
                    .copied()
                    .filter(|p| !grounded_here.contains(p))
                    .collect();
                if let Some(&p) = candidates.choose(&mut rng) {
                    grounded_here.insert(p);
                    grounding_next = Some(p);
                    if rng.gen_bool(cfg.cue_rate) {
                        let kw = &bank.topics[planned[p].topic].keyword;
                        let (k, tpl) = pick(&mut rng, &bank.mspd.cue);
                        let mut t = Turn::user(tpl.replace("{kw}", kw));
                        t.template_id = Some(format!("mspd.cue.{k}"));
                        turn = Some(t);
                    }
                }
            } else if !pending.is_empty() && rng.gen_bool(cfg.intro_rate) {
                let p = pending.remove(0);
                let (k, tpl) = pick(&mut rng, &bank.mspd.intro);
                let attr = &mut planned[p].attr;
                attr.source_turn = Some((si, ti));
                let mut t = Turn::user(tpl.replace("{persona}", &attr.text));
                t.introduces_persona_ids = vec![attr.id.clone()];
                t.template_id = Some(format!("mspd.intro.{k}"));
                known.push(p);
                turn = Some(t);
            } else if !known.is_empty() && rng.gen_bool(cfg.distractor_rate) {
                let &p = known.choose(&mut rng).expect("non-empty");
                let kw = &bank.topics[planned[p].topic].keyword;
                let (k, tpl) = pick(&mut rng, &bank.mspd.cue);
                let mut t = Turn::user(tpl.replace("{kw}", kw));
                t.template_id = Some(format!("mspd.distractor.{k}"));
                turn = Some(t);
            }
            let turn = turn.unwrap_or_else(|| {
                let (k, tpl) = pick(&mut rng, &daily.user);
                let mut t = Turn::user(tpl);
                t.template_id = Some(format!("daily.user.{k}"));
                t
            });
            turns.push(turn);
        }
        sessions.push(Session { turns });
    }

    // attributes never revealed are not part of the pool
    let mut pool: Vec<PersonaAttribute> = Vec::with_capacity(known.len());
    known.sort_unstable();
    for p in known {
        pool.push(planned[p].attr.clone());
    }

    Episode {
        episode_id: format!("mspd-{:x}-e{index:05}", cfg.seed),
        user_id,
        demographics,
        persona_pool: pool,
        sessions,
    }
}

/// Casual dialogue flavors standing in for the non-personalized corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Daily,
    Knowledge,
    Empathy,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::Daily => "daily",
            Flavor::Knowledge => "knowledge",
            Flavor::Empathy => "empathy",
        }
    }

    pub fn kind(self) -> CorpusKind {
        match self {
            Flavor::Daily => CorpusKind::Daily,
            Flavor::Knowledge => CorpusKind::Knowledge,
            Flavor::Empathy => CorpusKind::Empathy,
        }
    }
}

pub fn generate_casual(cfg: &GeneratorConfig, flavor: Flavor) -> Result<Corpus, SynthError> {
    let bank = cfg.bank()?;
    generate_casual_with(cfg, &bank, flavor)
}

pub fn generate_casual_with(
    cfg: &GeneratorConfig,
    bank: &TemplateBank,
    flavor: Flavor,
) -> Result<Corpus, SynthError> {
    cfg.check()?;
    let family = bank.family(flavor.name())?;
    let paired = !family.pairs.is_empty();
    if !paired && (family.user.is_empty() || family.agent.is_empty()) {
        return Err(SynthError::Bank(format!(
            "family {} needs pairs or user and agent templates",
            family.name
        )));
    }
    let episodes = (0..cfg.n_episodes)
        .map(|index| {
            let mut rng = episode_rng(cfg.seed, index);
            let user_id = format!("{}-{:x}-u{index:05}", flavor.name(), cfg.seed);
            let demographics = demographics(&mut rng, bank);
            let sessions = (0..cfg.sessions_per_episode)
                .map(|_| {
                    let n_turns = rng.gen_range(cfg.turns_per_session.0..=cfg.turns_per_session.1);
                    let mut turns = Vec::with_capacity(n_turns);
                    let mut pair: Option<usize> = None;
                    for ti in 0..n_turns {
                        let user_turn = ti % 2 == 0;
                        let (text, id) = if paired {
                            let k = if user_turn {
                                let k = rng.gen_range(0..family.pairs.len());
                                pair = Some(k);
                                k
                            } else {
                                pair.take().expect("agent turn follows user turn")
                            };
                            let (u, a) = &family.pairs[k];
                            let text = if user_turn { u } else { a };
                            (text.clone(), format!("{}.pair.{k}", family.name))
                        } else {
                            let (side, list) = if user_turn {
                                ("user", &family.user)
                            } else {
                                ("agent", &family.agent)
                            };
                            let (k, tpl) = pick(&mut rng, list);
                            (tpl.to_string(), format!("{}.{side}.{k}", family.name))
                        };
                        let mut t = if user_turn {
                            Turn::user(text)
                        } else {
                            Turn::agent(text, Rtl::Crtl)
                        };
                        t.template_id = Some(id);
                        turns.push(t);
                    }
                    Session { turns }
                })
                .collect();
            Episode {
                episode_id: format!("{}-{:x}-e{index:05}", flavor.name(), cfg.seed),
                user_id,
                demographics,
                persona_pool: Vec::new(),
                sessions,
            }
        })
        .collect();
    Ok(Corpus::new(cfg.header(bank, flavor.kind()), episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_stats, validate_episode, Speaker};

    fn cfg(n: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_episodes: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_episodes_is_empty() {
        assert!(generate_mspd(&cfg(0, 1)).unwrap().episodes.is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_mspd(&cfg(10, 7)).unwrap().to_jsonl();
        let b = generate_mspd(&cfg(10, 7)).unwrap().to_jsonl();
        assert_eq!(a, b);
        let c = generate_mspd(&cfg(10, 8)).unwrap().to_jsonl();
        assert_ne!(a, c);
    }

    #[test]
    fn single_episode_matches_batch() {
        let c = cfg(6, 3);
        let bank = TemplateBank::builtin();
        let corpus = generate_mspd_with(&c, &bank).unwrap();
        let daily = bank.family("daily").unwrap();
        assert_eq!(mspd_episode(&c, &bank, daily, 4), corpus.episodes[4]);
    }

    #[test]
    fn generated_corpus_validates() {
        let corpus = generate_mspd(&cfg(50, 11)).unwrap();
        for e in &corpus.episodes {
            validate_episode(e, &corpus.header).unwrap();
        }
    }

    #[test]
    fn statistics_hit_targets() {
        let corpus = generate_mspd(&cfg(100, 5)).unwrap();
        let s = corpus_stats(&corpus.episodes).unwrap();
        assert!((1.5..=2.0).contains(&s.avg_personalized_per_session), "{s}");
        assert!((6.0..=8.5).contains(&s.avg_persona_per_episode), "{s}");
        assert!((1.6..=2.6).contains(&s.avg_new_persona_per_episode), "{s}");
        assert!((10.0..=12.0).contains(&s.avg_turns_per_session), "{s}");
    }

    #[test]
    fn grounded_turns_reference_known_personas() {
        let corpus = generate_mspd(&cfg(30, 2)).unwrap();
        for e in &corpus.episodes {
            for (si, s) in e.sessions.iter().enumerate() {
                for (ti, t) in s.turns.iter().enumerate() {
                    for id in &t.grounded_persona_ids {
                        let p = e.persona(id).unwrap();
                        // grounded only once the attribute is known to the agent
                        if let Some(src) = p.source_turn {
                            assert!(src < (si, ti));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn casual_corpora_have_no_personalization() {
        for flavor in [Flavor::Daily, Flavor::Knowledge, Flavor::Empathy] {
            let c = generate_casual(&cfg(5, 9), flavor).unwrap();
            assert_eq!(c.header.kind, flavor.kind());
            for e in &c.episodes {
                assert!(e.persona_pool.is_empty());
                validate_episode(e, &c.header).unwrap();
                for s in &e.sessions {
                    assert_eq!(s.personalized_count(), 0);
                }
            }
        }
    }

    #[test]
    fn empathy_agent_turns_come_from_empathy_family() {
        let c = generate_casual(&cfg(20, 4), Flavor::Empathy).unwrap();
        for t in c.episodes.iter().flat_map(|e| &e.sessions).flat_map(|s| &s.turns) {
            if t.speaker == Speaker::Agent {
                assert!(t.template_id.as_deref().unwrap().starts_with("empathy.agent."));
            }
        }
    }

    #[test]
    fn casual_utterance_recount() {
        let c = GeneratorConfig {
            sessions_per_episode: 1,
            ..cfg(5, 1)
        };
        let corpus = generate_casual(&c, Flavor::Knowledge).unwrap();
        let total: usize = corpus
            .episodes
            .iter()
            .flat_map(|e| &e.sessions)
            .map(|s| s.turns.len())
            .sum();
        assert!((50..=60).contains(&total), "{total}");
    }
}
