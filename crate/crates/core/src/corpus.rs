//! Multi-session personalized dialogue records, their on-disk form, schema
//! validation and corpus statistics.
//!
//! A corpus file is line-delimited JSON: one header line declaring the
//! demographic enumerations and session limits, then one [`Episode`] per line.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CORPUS_FORMAT: &str = "wwh-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    Agent,
}

/// Response-type label of an agent turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Rtl {
    /// Personalized (persona-grounded) response.
    Prtl,
    /// Casual response.
    Crtl,
}

impl Rtl {
    pub fn as_str(self) -> &'static str {
        match self {
            Rtl::Prtl => "PRTL",
            Rtl::Crtl => "CRTL",
        }
    }
}

impl fmt::Display for Rtl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Rtl {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PRTL" => Ok(Rtl::Prtl),
            "CRTL" => Ok(Rtl::Crtl),
            other => Err(format!("unknown response type label {other:?}")),
        }
    }
}

/// Manual consistency judgement; persisted, never filled in automatically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Consistency {
    Consistent,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: String,
    pub age_band: String,
}

/// Position of a turn inside an episode: `(session_index, turn_index)`.
pub type TurnLoc = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaAttribute {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_turn: Option<TurnLoc>,
}

impl PersonaAttribute {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source_turn: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtl: Option<Rtl>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grounded_persona_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub introduces_persona_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_annotation: Option<Consistency>,
    /// Generator template that produced the text, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
            rtl: None,
            grounded_persona_ids: Vec::new(),
            introduces_persona_ids: Vec::new(),
            consistency_annotation: None,
            template_id: None,
        }
    }

    pub fn agent(text: impl Into<String>, rtl: Rtl) -> Self {
        Self {
            speaker: Speaker::Agent,
            rtl: Some(rtl),
            ..Self::user(text)
        }
    }

    pub fn grounded(mut self, ids: &[&str]) -> Self {
        self.grounded_persona_ids = ids.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn introducing(mut self, ids: &[&str]) -> Self {
        self.introduces_persona_ids = ids.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn is_personalized(&self) -> bool {
        self.speaker == Speaker::Agent && self.rtl == Some(Rtl::Prtl)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Session {
    pub turns: Vec<Turn>,
}

impl Session {
    pub fn personalized_count(&self) -> usize {
        self.turns.iter().filter(|t| t.is_personalized()).count()
    }

    /// Persona ids grounded by any agent turn of this session.
    pub fn grounded_ids(&self) -> BTreeSet<&str> {
        self.turns
            .iter()
            .flat_map(|t| t.grounded_persona_ids.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub user_id: String,
    pub demographics: Demographics,
    pub persona_pool: Vec<PersonaAttribute>,
    pub sessions: Vec<Session>,
}

impl Episode {
    pub fn persona(&self, id: &str) -> Option<&PersonaAttribute> {
        self.persona_pool.iter().find(|p| p.id == id)
    }
}

/// An ordered dialogue prefix `u_1, a_1, ..., u_m` ending with a user turn.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DialogueContext {
    pub turns: Vec<(Speaker, String)>,
}

impl DialogueContext {
    /// Context preceding the agent turn at `turn_index` of `session`.
    pub fn before(session: &Session, turn_index: usize) -> Self {
        Self {
            turns: session.turns[..turn_index]
                .iter()
                .map(|t| (t.speaker, t.text.clone()))
                .collect(),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        let alternating = self.turns.windows(2).all(|w| w[0].0 != w[1].0);
        alternating && matches!(self.turns.last(), Some((Speaker::User, _)))
    }

    /// Texts of the last `n` user turns, oldest first.
    pub fn last_user_turns(&self, n: usize) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .turns
            .iter()
            .rev()
            .filter(|(s, _)| *s == Speaker::User)
            .take(n)
            .map(|(_, t)| t.as_str())
            .collect();
        v.reverse();
        v
    }
}

/// What kind of dialogue a corpus file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Mspd,
    Daily,
    Knowledge,
    Empathy,
}

impl CorpusKind {
    pub fn is_casual(self) -> bool {
        !matches!(self, CorpusKind::Mspd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusKind::Mspd => "mspd",
            CorpusKind::Daily => "daily",
            CorpusKind::Knowledge => "knowledge",
            CorpusKind::Empathy => "empathy",
        }
    }
}

impl std::str::FromStr for CorpusKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mspd" => Ok(Self::Mspd),
            "daily" => Ok(Self::Daily),
            "knowledge" => Ok(Self::Knowledge),
            "empathy" => Ok(Self::Empathy),
            other => Err(format!("unknown corpus kind {other:?}")),
        }
    }
}

/// First line of every corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub kind: CorpusKind,
    pub genders: Vec<String>,
    pub age_bands: Vec<String>,
    pub max_pr_per_session: usize,
    /// Inclusive bounds on turns per session, when the corpus promises them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_turns: Option<(usize, usize)>,
}

impl CorpusHeader {
    pub fn new(kind: CorpusKind) -> Self {
        Self {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            kind,
            genders: ["female", "male"].map(String::from).to_vec(),
            age_bands: ["10s", "20s", "30s", "40s", "50s", "60s"]
                .map(String::from)
                .to_vec(),
            max_pr_per_session: 2,
            session_turns: Some((10, 12)),
        }
    }
}

impl Default for CorpusHeader {
    fn default() -> Self {
        Self::new(CorpusKind::Mspd)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub episodes: Vec<Episode>,
}

impl Corpus {
    pub fn new(header: CorpusHeader, episodes: Vec<Episode>) -> Self {
        Self { header, episodes }
    }

    /// Canonical line-delimited encoding: header line, then one episode per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(e).expect("episode serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        f.write_all(self.to_jsonl().as_bytes())?;
        f.flush()
    }

    pub fn kind(&self) -> CorpusKind {
        self.header.kind
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("episode {episode_id}: schema violation: {violations}")]
    Schema {
        episode_id: String,
        violations: ViolationList,
    },
    #[error("statistics need at least one episode")]
    Empty,
}

/// Display helper joining violations with `; `.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationList(pub Vec<Violation>);

impl fmt::Display for ViolationList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Parsed corpus file with every schema violation, by episode id.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusScan {
    pub corpus: Corpus,
    pub violations: Vec<(String, Vec<Violation>)>,
}

/// Parses a corpus file and checks every episode, collecting all schema
/// violations instead of stopping at the first. Malformed JSON is still an
/// error.
pub fn scan_corpus(path: &Path) -> Result<CorpusScan, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io_err)?);
    let mut header: Option<CorpusHeader> = None;
    let mut episodes = Vec::new();
    let mut violations = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match &header {
            None => {
                let h: CorpusHeader =
                    serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                        line: lineno,
                        message: format!("expected corpus header: {e}"),
                    })?;
                if h.format != CORPUS_FORMAT {
                    return Err(CorpusError::Malformed {
                        line: lineno,
                        message: format!("unknown format {:?}", h.format),
                    });
                }
                header = Some(h);
            }
            Some(h) => {
                let ep: Episode =
                    serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                        line: lineno,
                        message: e.to_string(),
                    })?;
                if let Err(v) = validate_episode(&ep, h) {
                    violations.push((ep.episode_id.clone(), v));
                }
                episodes.push(ep);
            }
        }
    }
    Ok(CorpusScan {
        corpus: Corpus {
            header: header.unwrap_or_default(),
            episodes,
        },
        violations,
    })
}

/// Reads and validates a corpus file. An empty file yields an empty MSPD corpus.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let scan = scan_corpus(path)?;
    match scan.violations.into_iter().next() {
        Some((episode_id, v)) => Err(CorpusError::Schema {
            episode_id,
            violations: ViolationList(v),
        }),
        None => Ok(scan.corpus),
    }
}

/// Where in an episode a violation was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Episode,
    Persona(String),
    Session(usize),
    Turn(usize, usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Episode => f.write_str("episode"),
            Location::Persona(id) => write!(f, "persona {id}"),
            Location::Session(s) => write!(f, "session {s}"),
            Location::Turn(s, t) => write!(f, "session {s} turn {t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Invariant {
    DemographicsEnumeration,
    EmptyPersonaText,
    DuplicatePersonaId,
    PrtlRequiresGrounding,
    GroundingRequiresPrtl,
    AgentMissingRtl,
    UserTurnLabelled,
    AgentIntroducesPersona,
    NotAlternating,
    PersonalizedCap { max: usize },
    SessionLength { min: usize, max: usize },
    DanglingPersonaReference,
    SourceTurnMismatch,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Invariant::DemographicsEnumeration => {
                f.write_str("demographics outside declared enumerations")
            }
            Invariant::EmptyPersonaText => f.write_str("persona text is empty"),
            Invariant::DuplicatePersonaId => f.write_str("duplicate persona id"),
            Invariant::PrtlRequiresGrounding => f.write_str("PRTL requires grounding ids"),
            Invariant::GroundingRequiresPrtl => f.write_str("grounding ids require PRTL"),
            Invariant::AgentMissingRtl => f.write_str("agent turn lacks a response type label"),
            Invariant::UserTurnLabelled => {
                f.write_str("user turn carries rtl or grounding ids")
            }
            Invariant::AgentIntroducesPersona => f.write_str("agent turn introduces persona"),
            Invariant::NotAlternating => {
                f.write_str("turns must alternate USER/AGENT starting with USER")
            }
            Invariant::PersonalizedCap { max } => {
                write!(f, "at most {max} personalized responses per session")
            }
            Invariant::SessionLength { min, max } => {
                write!(f, "session must have {min}..={max} turns")
            }
            Invariant::DanglingPersonaReference => f.write_str("dangling persona reference"),
            Invariant::SourceTurnMismatch => {
                f.write_str("source_turn does not introduce the attribute")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: Invariant,
    pub location: Location,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.invariant, self.location)
    }
}

/// Checks every schema invariant of `episode` against the corpus `header`.
pub fn validate_episode(episode: &Episode, header: &CorpusHeader) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |invariant, location| out.push(Violation { invariant, location });

    let d = &episode.demographics;
    if !header.genders.contains(&d.gender) || !header.age_bands.contains(&d.age_band) {
        push(Invariant::DemographicsEnumeration, Location::Episode);
    }

    let mut ids = HashSet::new();
    for p in &episode.persona_pool {
        if p.text.trim().is_empty() {
            push(Invariant::EmptyPersonaText, Location::Persona(p.id.clone()));
        }
        if !ids.insert(p.id.as_str()) {
            push(Invariant::DuplicatePersonaId, Location::Persona(p.id.clone()));
        }
    }

    for (si, session) in episode.sessions.iter().enumerate() {
        if let Some((min, max)) = header.session_turns {
            let n = session.turns.len();
            if n < min || n > max {
                push(Invariant::SessionLength { min, max }, Location::Session(si));
            }
        }
        if session.personalized_count() > header.max_pr_per_session {
            push(
                Invariant::PersonalizedCap {
                    max: header.max_pr_per_session,
                },
                Location::Session(si),
            );
        }
        for (ti, turn) in session.turns.iter().enumerate() {
            let loc = || Location::Turn(si, ti);
            let expected = if ti % 2 == 0 { Speaker::User } else { Speaker::Agent };
            if turn.speaker != expected {
                push(Invariant::NotAlternating, loc());
            }
            match turn.speaker {
                Speaker::User => {
                    if turn.rtl.is_some() || !turn.grounded_persona_ids.is_empty() {
                        push(Invariant::UserTurnLabelled, loc());
                    }
                }
                Speaker::Agent => {
                    match turn.rtl {
                        None => push(Invariant::AgentMissingRtl, loc()),
                        Some(Rtl::Prtl) if turn.grounded_persona_ids.is_empty() => {
                            push(Invariant::PrtlRequiresGrounding, loc())
                        }
                        Some(Rtl::Crtl) if !turn.grounded_persona_ids.is_empty() => {
                            push(Invariant::GroundingRequiresPrtl, loc())
                        }
                        _ => {}
                    }
                    if !turn.introduces_persona_ids.is_empty() {
                        push(Invariant::AgentIntroducesPersona, loc());
                    }
                }
            }
            let refs = turn
                .grounded_persona_ids
                .iter()
                .chain(&turn.introduces_persona_ids);
            for id in refs {
                if !ids.contains(id.as_str()) {
                    push(Invariant::DanglingPersonaReference, loc());
                }
            }
        }
    }

    for p in &episode.persona_pool {
        if let Some((si, ti)) = p.source_turn {
            let introduced = episode
                .sessions
                .get(si)
                .and_then(|s| s.turns.get(ti))
                .is_some_and(|t| t.introduces_persona_ids.contains(&p.id));
            if !introduced {
                push(Invariant::SourceTurnMismatch, Location::Persona(p.id.clone()));
            }
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Aggregate counts mirroring the corpus statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub episodes: usize,
    pub sessions: usize,
    pub utterances: usize,
    pub avg_turns_per_session: f64,
    pub avg_personalized_per_session: f64,
    pub avg_persona_per_episode: f64,
    pub avg_new_persona_per_episode: f64,
    /// Mean user utterance length in tokens.
    pub avg_user_utterance_len: f64,
    /// Mean agent response length in tokens.
    pub avg_agent_response_len: f64,
}

pub fn corpus_stats(episodes: &[Episode]) -> Result<CorpusStats, CorpusError> {
    if episodes.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut sessions = 0usize;
    let mut utterances = 0usize;
    let mut personalized = 0usize;
    let mut personas = 0usize;
    let mut introduced = 0usize;
    let (mut user_n, mut user_len, mut agent_n, mut agent_len) = (0usize, 0usize, 0usize, 0usize);
    for e in episodes {
        sessions += e.sessions.len();
        personas += e.persona_pool.len();
        let mut new_ids = HashSet::new();
        for s in &e.sessions {
            utterances += s.turns.len();
            personalized += s.personalized_count();
            for t in &s.turns {
                new_ids.extend(t.introduces_persona_ids.iter());
                let len = crate::text::tokenize(&t.text).len();
                match t.speaker {
                    Speaker::User => {
                        user_n += 1;
                        user_len += len;
                    }
                    Speaker::Agent => {
                        agent_n += 1;
                        agent_len += len;
                    }
                }
            }
        }
        introduced += new_ids.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let n = episodes.len();
    Ok(CorpusStats {
        episodes: n,
        sessions,
        utterances,
        avg_turns_per_session: ratio(utterances, sessions),
        avg_personalized_per_session: ratio(personalized, sessions),
        avg_persona_per_episode: ratio(personas, n),
        avg_new_persona_per_episode: ratio(introduced, n),
        avg_user_utterance_len: ratio(user_len, user_n),
        avg_agent_response_len: ratio(agent_len, agent_n),
    })
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, String); 9] = [
            ("# Episodes", self.episodes.to_string()),
            ("# Sessions", self.sessions.to_string()),
            ("# Utterances", self.utterances.to_string()),
            ("Avg. # turns per session", format!("{:.2}", self.avg_turns_per_session)),
            (
                "Avg. # personalized response per session",
                format!("{:.2}", self.avg_personalized_per_session),
            ),
            ("Avg. # user persona per episode", format!("{:.2}", self.avg_persona_per_episode)),
            (
                "Avg. # newly aggregated persona per episode",
                format!("{:.2}", self.avg_new_persona_per_episode),
            ),
            ("Avg. length of user utterances", format!("{:.2}", self.avg_user_utterance_len)),
            ("Avg. length of agent response", format!("{:.2}", self.avg_agent_response_len)),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<45} {v:>10}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn demo() -> Demographics {
        Demographics {
            gender: "female".into(),
            age_band: "20s".into(),
        }
    }

    /// A ten-turn session; agent turns at 1 and 5 ground `p1` / `p2`.
    pub(crate) fn session_with_two_pr() -> Session {
        let mut turns = Vec::new();
        for i in 0..5 {
            turns.push(Turn::user(format!("user line {i}")));
            let agent = match i {
                0 => Turn::agent("your cat is cute", Rtl::Prtl).grounded(&["p1"]),
                2 => Turn::agent("enjoy hiking", Rtl::Prtl).grounded(&["p2"]),
                _ => Turn::agent("that sounds nice", Rtl::Crtl),
            };
            turns.push(agent);
        }
        Session { turns }
    }

    pub(crate) fn episode() -> Episode {
        Episode {
            episode_id: "e0".into(),
            user_id: "u0".into(),
            demographics: demo(),
            persona_pool: vec![
                PersonaAttribute::new("p1", "i have a cat"),
                PersonaAttribute::new("p2", "i like hiking"),
            ],
            sessions: vec![session_with_two_pr()],
        }
    }

    fn invariants(e: &Episode) -> Vec<Invariant> {
        match validate_episode(e, &CorpusHeader::default()) {
            Ok(()) => vec![],
            Err(v) => v.into_iter().map(|v| v.invariant).collect(),
        }
    }

    #[test]
    fn well_formed_episode_validates() {
        assert_eq!(invariants(&episode()), vec![]);
    }

    #[test]
    fn prtl_without_grounding() {
        let mut e = episode();
        e.sessions[0].turns[1].grounded_persona_ids.clear();
        let v = validate_episode(&e, &CorpusHeader::default()).unwrap_err();
        assert_eq!(v[0].invariant, Invariant::PrtlRequiresGrounding);
        assert!(v[0].to_string().contains("PRTL requires grounding ids"));
        assert_eq!(v[0].location, Location::Turn(0, 1));
    }

    #[test]
    fn dangling_reference() {
        let mut e = episode();
        e.sessions[0].turns[1].grounded_persona_ids = vec!["nope".into()];
        let v = validate_episode(&e, &CorpusHeader::default()).unwrap_err();
        assert!(v.iter().any(|v| v.to_string().contains("dangling persona reference")));
    }

    #[test]
    fn third_personalized_turn_breaks_cap() {
        let mut e = episode();
        e.sessions[0].turns[3] = Turn::agent("cats!", Rtl::Prtl).grounded(&["p1"]);
        assert!(invariants(&e).contains(&Invariant::PersonalizedCap { max: 2 }));
    }

    #[test]
    fn user_turn_must_not_carry_labels() {
        let mut e = episode();
        e.sessions[0].turns[0].rtl = Some(Rtl::Crtl);
        assert_eq!(invariants(&e), vec![Invariant::UserTurnLabelled]);
    }

    #[test]
    fn alternation_and_length() {
        let mut e = episode();
        e.sessions[0].turns.swap(0, 1);
        assert!(invariants(&e).contains(&Invariant::NotAlternating));
        let mut e = episode();
        e.sessions[0].turns.truncate(8);
        assert!(invariants(&e).contains(&Invariant::SessionLength { min: 10, max: 12 }));
    }

    #[test]
    fn source_turn_must_introduce() {
        let mut e = episode();
        e.persona_pool[0].source_turn = Some((0, 2));
        assert_eq!(invariants(&e), vec![Invariant::SourceTurnMismatch]);
        e.sessions[0].turns[2].introduces_persona_ids = vec!["p1".into()];
        assert_eq!(invariants(&e), vec![]);
    }

    #[test]
    fn demographics_enumeration() {
        let mut e = episode();
        e.demographics.age_band = "90s".into();
        assert_eq!(invariants(&e), vec![Invariant::DemographicsEnumeration]);
    }

    #[test]
    fn duplicate_and_empty_persona() {
        let mut e = episode();
        e.persona_pool.push(PersonaAttribute::new("p1", " "));
        let inv = invariants(&e);
        assert!(inv.contains(&Invariant::DuplicatePersonaId));
        assert!(inv.contains(&Invariant::EmptyPersonaText));
    }

    #[test]
    fn stats_single_session() {
        let s = corpus_stats(&[episode()]).unwrap();
        assert_eq!(s.avg_turns_per_session, 10.0);
        assert_eq!(s.avg_personalized_per_session, 2.0);
        assert_eq!(s.sessions, 1);
        assert_eq!(s.utterances, 10);
    }

    #[test]
    fn stats_count_sessions_across_episodes() {
        let mut a = episode();
        a.sessions = vec![session_with_two_pr(); 4];
        let mut b = episode();
        b.sessions = vec![session_with_two_pr(); 2];
        assert_eq!(corpus_stats(&[a, b]).unwrap().sessions, 6);
        assert!(matches!(corpus_stats(&[]), Err(CorpusError::Empty)));
    }

    #[test]
    fn context_helpers() {
        let s = session_with_two_pr();
        let c = DialogueContext::before(&s, 5);
        assert!(c.is_well_formed());
        assert_eq!(c.last_user_turns(2), vec!["user line 1", "user line 2"]);
        assert!(!DialogueContext::before(&s, 4).is_well_formed());
    }
}
