//! Token layout of a training instance and its inverse.
//!
//! ```text
//! <BOS> <DEMO> gender age <SEP> [<PERSONA> attr_1 <SEP> ... attr_k <SEP>]
//!   <USR> u_1 <AGT> a_1 ... <USR> u_m <AGT> <RTL> y <EOS>
//! ```
//!
//! The loss mask covers `<RTL> y <EOS>`. With `rtl_slot` off the `<RTL>` token
//! is left out and the mask covers `y <EOS>`. Context turns are dropped oldest
//! first until the sequence fits `max_seq_len`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{PersonaSubset, SubsetKind};
use crate::blending::InstanceRef;
use crate::corpus::{Demographics, DialogueContext, Episode, Rtl, Speaker};
use crate::eval::IdfTable;
use crate::vocab::{self, TokenId, Vocab};

pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    pub max_seq_len: usize,
    /// Emit the response-type token before the response.
    pub rtl_slot: bool,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            rtl_slot: true,
        }
    }
}

/// The `(d, ρ, c, rtl, y)` tuple in text form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub demographics: Demographics,
    pub persona: Vec<String>,
    pub context: DialogueContext,
    /// `None` only for layouts without an RTL slot.
    pub rtl: Option<Rtl>,
    pub response: String,
}

impl Example {
    /// Example for the agent turn at `(session, turn)` with persona subset `rho`.
    pub fn from_turn(episode: &Episode, session: usize, turn: usize, rho: &PersonaSubset) -> Self {
        let s = &episode.sessions[session];
        let t = &s.turns[turn];
        Self {
            demographics: episode.demographics.clone(),
            persona: rho.texts().into_iter().map(String::from).collect(),
            context: DialogueContext::before(s, turn),
            rtl: t.rtl,
            response: t.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub instance: InstanceRef,
    pub kind: Option<SubsetKind>,
    /// Positions of ground-truth attributes within the persona section.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positives: Vec<usize>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dropped_turns: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub input_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub rtl: Rtl,
    pub meta: InstanceMeta,
}

impl TrainingInstance {
    /// Index of the first masked position.
    pub fn target_start(&self) -> usize {
        self.loss_mask.iter().position(|&m| m).unwrap_or(self.loss_mask.len())
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SerializeError {
    #[error("sequence needs {needed} tokens without any context, max_seq_len is {max}")]
    TooLong { needed: usize, max: usize },
    #[error("response is empty")]
    EmptyResponse,
    #[error("layout has an RTL slot but the example carries no label")]
    MissingRtl,
    #[error("malformed sequence: {0}")]
    Malformed(String),
}

fn rtl_token(rtl: Rtl) -> TokenId {
    match rtl {
        Rtl::Prtl => vocab::PRTL,
        Rtl::Crtl => vocab::CRTL,
    }
}

pub fn rtl_of_token(id: TokenId) -> Option<Rtl> {
    match id {
        vocab::PRTL => Some(Rtl::Prtl),
        vocab::CRTL => Some(Rtl::Crtl),
        _ => None,
    }
}

fn header_ids(d: &Demographics, persona: &[String], v: &Vocab) -> Vec<TokenId> {
    let mut ids = vec![vocab::BOS, vocab::DEMO, v.id(&d.gender), v.id(&d.age_band), vocab::SEP];
    if !persona.is_empty() {
        ids.push(vocab::PERSONA);
        for a in persona {
            ids.extend(v.encode(a));
            ids.push(vocab::SEP);
        }
    }
    ids
}

fn turn_ids(context: &DialogueContext, v: &Vocab) -> Vec<Vec<TokenId>> {
    context
        .turns
        .iter()
        .map(|(speaker, text)| {
            let mut t = vec![match speaker {
                Speaker::User => vocab::USR,
                Speaker::Agent => vocab::AGT,
            }];
            t.extend(v.encode(text));
            t
        })
        .collect()
}

/// Header, the surviving context turns and `tail`, dropping oldest turns
/// until the total fits `budget`. Returns the ids and how many turns fell off.
fn assemble(
    header: Vec<TokenId>,
    turns: Vec<Vec<TokenId>>,
    tail: &[TokenId],
    budget: usize,
) -> Result<(Vec<TokenId>, usize), SerializeError> {
    let fixed = header.len() + tail.len();
    if fixed > budget {
        return Err(SerializeError::TooLong { needed: fixed, max: budget });
    }
    let mut total: usize = fixed + turns.iter().map(Vec::len).sum::<usize>();
    let mut drop = 0;
    while total > budget {
        total -= turns[drop].len();
        drop += 1;
    }
    let mut ids = header;
    ids.reserve(total - fixed + tail.len());
    for t in &turns[drop..] {
        ids.extend_from_slice(t);
    }
    ids.extend_from_slice(tail);
    Ok((ids, drop))
}

/// Encodes an example for training or scoring.
pub fn serialize(
    ex: &Example,
    v: &Vocab,
    layout: LayoutConfig,
    meta: InstanceMeta,
) -> Result<TrainingInstance, SerializeError> {
    let y = v.encode(&ex.response);
    if y.is_empty() {
        return Err(SerializeError::EmptyResponse);
    }
    let gold = ex.rtl;
    let mut tail = vec![vocab::AGT];
    if layout.rtl_slot {
        tail.push(rtl_token(gold.ok_or(SerializeError::MissingRtl)?));
    }
    tail.extend(&y);
    tail.push(vocab::EOS);
    let masked = tail.len() - 1;
    let (input_ids, dropped) = assemble(
        header_ids(&ex.demographics, &ex.persona, v),
        turn_ids(&ex.context, v),
        &tail,
        layout.max_seq_len,
    )?;
    let n = input_ids.len();
    let mut loss_mask = vec![false; n];
    loss_mask[n - masked..].iter_mut().for_each(|m| *m = true);
    Ok(TrainingInstance {
        input_ids,
        loss_mask,
        rtl: gold.unwrap_or(Rtl::Crtl),
        meta: InstanceMeta {
            dropped_turns: dropped,
            ..meta
        },
    })
}

/// Prompt for generation: everything up to and including the final `<AGT>`,
/// leaving `reserve` positions free for the RTL slot, response and `<EOS>`.
pub fn encode_prompt(
    d: &Demographics,
    persona: &[String],
    context: &DialogueContext,
    v: &Vocab,
    max_seq_len: usize,
    reserve: usize,
) -> Result<Vec<TokenId>, SerializeError> {
    let budget = max_seq_len
        .checked_sub(reserve)
        .ok_or(SerializeError::TooLong { needed: reserve, max: max_seq_len })?;
    assemble(header_ids(d, persona, v), turn_ids(context, v), &[vocab::AGT], budget).map(|(ids, _)| ids)
}

fn words(ids: &[TokenId], v: &Vocab) -> Result<String, SerializeError> {
    if let Some(&s) = ids.iter().find(|&&i| vocab::is_special(i) && i != vocab::UNK) {
        return Err(SerializeError::Malformed(format!(
            "unexpected {} inside text",
            v.token(s).unwrap_or("?")
        )));
    }
    Ok(v.decode(ids))
}

/// Inverse of [`serialize`] on the token level. Texts come back in canonical
/// form; truncated inputs yield the surviving suffix of the context.
pub fn deserialize(ids: &[TokenId], v: &Vocab, layout: LayoutConfig) -> Result<Example, SerializeError> {
    let bad = |m: &str| SerializeError::Malformed(m.to_string());
    if ids.len() < 5 || ids[0] != vocab::BOS || ids[1] != vocab::DEMO || ids[4] != vocab::SEP {
        return Err(bad("missing <BOS> <DEMO> gender age <SEP> header"));
    }
    let tok = |i: TokenId| v.token(i).unwrap_or("<UNK>").to_string();
    let demographics = Demographics {
        gender: tok(ids[2]),
        age_band: tok(ids[3]),
    };
    let mut pos = 5;
    let mut persona = Vec::new();
    if ids.get(pos) == Some(&vocab::PERSONA) {
        pos += 1;
        while pos < ids.len() && ids[pos] != vocab::USR && ids[pos] != vocab::AGT {
            let end = ids[pos..]
                .iter()
                .position(|&i| i == vocab::SEP)
                .map(|e| pos + e)
                .ok_or_else(|| bad("persona attribute without <SEP>"))?;
            persona.push(words(&ids[pos..end], v)?);
            pos = end + 1;
        }
        if persona.is_empty() {
            return Err(bad("empty persona section"));
        }
    }
    let eos = ids
        .iter()
        .rposition(|&i| i == vocab::EOS)
        .ok_or_else(|| bad("missing <EOS>"))?;
    if eos != ids.len() - 1 {
        return Err(bad("tokens after <EOS>"));
    }
    let body = &ids[pos..eos];
    let mut markers: Vec<usize> = body
        .iter()
        .enumerate()
        .filter(|(_, &i)| i == vocab::USR || i == vocab::AGT)
        .map(|(p, _)| p)
        .collect();
    if markers.first() != Some(&0) {
        return Err(bad("expected a turn marker after the header"));
    }
    let last = markers.pop().expect("non-empty");
    if body[last] != vocab::AGT {
        return Err(bad("response must follow <AGT>"));
    }
    let mut turns = Vec::new();
    for (n, &start) in markers.iter().enumerate() {
        let end = markers.get(n + 1).copied().unwrap_or(last);
        let speaker = if body[start] == vocab::USR { Speaker::User } else { Speaker::Agent };
        turns.push((speaker, words(&body[start + 1..end], v)?));
    }
    let mut reply = &body[last + 1..];
    let mut rtl = None;
    if layout.rtl_slot {
        rtl = Some(
            reply
                .first()
                .and_then(|&i| rtl_of_token(i))
                .ok_or_else(|| bad("missing <RTL> slot"))?,
        );
        reply = &reply[1..];
    }
    if reply.is_empty() {
        return Err(bad("empty response"));
    }
    Ok(Example {
        demographics,
        persona,
        context: DialogueContext { turns },
        rtl,
        response: words(reply, v)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHeader {
    pub format: String,
    pub version: u32,
    pub layout: LayoutConfig,
    pub vocab: Vec<String>,
    pub vocab_sha256: String,
    /// Document frequencies for P-Cover, from the source corpora.
    pub idf: IdfTable,
    pub k: usize,
    pub seed: u64,
    pub n_instances: usize,
}

impl TrainingHeader {
    pub const FORMAT: &'static str = "wwh-train";

    pub fn new(layout: LayoutConfig, v: &Vocab, idf: IdfTable, k: usize, seed: u64, n_instances: usize) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: 1,
            layout,
            vocab: v.tokens().to_vec(),
            vocab_sha256: v.sha256(),
            idf,
            k,
            seed,
            n_instances,
        }
    }

    pub fn vocab(&self) -> Result<Vocab, TrainFileError> {
        let v = Vocab::from_list(self.vocab.clone()).map_err(|e| TrainFileError::Header(e.to_string()))?;
        if v.sha256() != self.vocab_sha256 {
            return Err(TrainFileError::Header("vocabulary hash mismatch".into()));
        }
        Ok(v)
    }
}

#[derive(Debug, Error)]
pub enum TrainFileError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("training file header: {0}")]
    Header(String),
    #[error("training file line {line}: {message}")]
    Record { line: usize, message: String },
}

/// Header line followed by one instance per line.
pub fn write_training_file(
    path: &Path,
    header: &TrainingHeader,
    instances: &[TrainingInstance],
) -> Result<(), TrainFileError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    for inst in instances {
        serde_json::to_writer(&mut w, inst).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_file(path: &Path) -> Result<(TrainingHeader, Vec<TrainingInstance>), TrainFileError> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines().enumerate();
    let header: TrainingHeader = loop {
        match lines.next() {
            Some((_, l)) => {
                let l = l?;
                if !l.trim().is_empty() {
                    break serde_json::from_str(&l).map_err(|e| TrainFileError::Header(e.to_string()))?;
                }
            }
            None => return Err(TrainFileError::Header("empty file".into())),
        }
    };
    if header.format != TrainingHeader::FORMAT {
        return Err(TrainFileError::Header(format!("unknown format {:?}", header.format)));
    }
    let vocab_len = header.vocab.len() as TokenId;
    let mut out = Vec::with_capacity(header.n_instances);
    for (n, l) in lines {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let rec = |message: String| TrainFileError::Record { line: n + 1, message };
        let inst: TrainingInstance = serde_json::from_str(&l).map_err(|e| rec(e.to_string()))?;
        if inst.input_ids.len() != inst.loss_mask.len() {
            return Err(rec("input_ids and loss_mask differ in length".into()));
        }
        if inst.input_ids.len() > header.layout.max_seq_len {
            return Err(rec("sequence exceeds max_seq_len".into()));
        }
        if inst.input_ids.iter().any(|&i| i >= vocab_len) {
            return Err(rec("token id outside the vocabulary".into()));
        }
        if inst.masked_count() == 0 {
            return Err(rec("empty loss mask".into()));
        }
        out.push(inst);
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn vocab() -> Vocab {
        let words = "female 30s i have a pet cat at home my job is being nurse hello how are you ? fine thanks good";
        let counts: BTreeMap<String, usize> = words.split(' ').map(|w| (w.to_string(), 1)).collect();
        Vocab::from_counts(&counts, 1).unwrap()
    }

    fn example(persona: &[&str]) -> Example {
        Example {
            demographics: Demographics {
                gender: "female".into(),
                age_band: "30s".into(),
            },
            persona: persona.iter().map(|s| s.to_string()).collect(),
            context: DialogueContext {
                turns: vec![
                    (Speaker::User, "hello".into()),
                    (Speaker::Agent, "how are you ?".into()),
                    (Speaker::User, "fine thanks".into()),
                ],
            },
            rtl: Some(Rtl::Prtl),
            response: "how is the pet cat at home ?".into(),
        }
    }

    fn names(v: &Vocab, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| v.token(i).unwrap().to_string()).collect()
    }

    #[test]
    fn layout_is_exact() {
        let v = vocab();
        let ex = example(&["i have a pet cat", "my job is being a nurse"]);
        let inst = serialize(&ex, &v, LayoutConfig::default(), InstanceMeta::default()).unwrap();
        let expected = "<BOS> <DEMO> female 30s <SEP> <PERSONA> i have a pet cat <SEP> my job is being a nurse <SEP> \
                        <USR> hello <AGT> how are you ? <USR> fine thanks <AGT> <PRTL> how is <UNK> pet cat at home ? <EOS>";
        assert_eq!(names(&v, &inst.input_ids).join(" "), expected);
        // <PRTL> + 8 response tokens + <EOS>
        assert_eq!(inst.masked_count(), 10);
        assert!(inst.loss_mask[inst.target_start()..].iter().all(|&m| m));
        assert_eq!(inst.input_ids[inst.target_start()], vocab::PRTL);
    }

    #[test]
    fn empty_persona_omits_section() {
        let v = vocab();
        let inst = serialize(&example(&[]), &v, LayoutConfig::default(), InstanceMeta::default()).unwrap();
        assert!(!inst.input_ids.contains(&vocab::PERSONA));
        assert_eq!(inst.input_ids[5], vocab::USR);
    }

    #[test]
    fn no_rtl_layout_masks_response_only() {
        let v = vocab();
        let layout = LayoutConfig {
            rtl_slot: false,
            ..Default::default()
        };
        let inst = serialize(&example(&[]), &v, layout, InstanceMeta::default()).unwrap();
        assert!(!inst.input_ids.contains(&vocab::PRTL));
        assert_eq!(inst.masked_count(), 9);
        let back = deserialize(&inst.input_ids, &v, layout).unwrap();
        assert_eq!(back.rtl, None);
        assert_eq!(inst.rtl, Rtl::Prtl);
    }

    #[test]
    fn round_trip() {
        let v = vocab();
        let ex = example(&["i have a pet cat", "my job is being a nurse"]);
        let ex = Example {
            response: "i have a pet cat".into(),
            ..ex
        };
        let inst = serialize(&ex, &v, LayoutConfig::default(), InstanceMeta::default()).unwrap();
        assert_eq!(deserialize(&inst.input_ids, &v, LayoutConfig::default()).unwrap(), ex);
    }

    #[test]
    fn truncation_keeps_header_and_drops_oldest() {
        let v = vocab();
        let ex = example(&["i have a pet cat"]);
        let full = serialize(&ex, &v, LayoutConfig::default(), InstanceMeta::default()).unwrap();
        let layout = LayoutConfig {
            max_seq_len: full.input_ids.len() - 2,
            rtl_slot: true,
        };
        let cut = serialize(&ex, &v, layout, InstanceMeta::default()).unwrap();
        assert_eq!(cut.meta.dropped_turns, 1);
        let back = deserialize(&cut.input_ids, &v, layout).unwrap();
        assert_eq!(back.persona, ex.persona);
        assert_eq!(back.context.turns, ex.context.turns[1..]);

        let tiny = LayoutConfig {
            max_seq_len: 12,
            rtl_slot: true,
        };
        assert!(matches!(
            serialize(&ex, &v, tiny, InstanceMeta::default()),
            Err(SerializeError::TooLong { .. })
        ));
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        let v = vocab();
        let l = LayoutConfig::default();
        let no_slot = vec![vocab::BOS, vocab::DEMO, 11, 12, vocab::SEP, vocab::USR, 13, vocab::AGT, 14, vocab::EOS];
        assert_eq!(
            deserialize(&no_slot, &v, l),
            Err(SerializeError::Malformed("missing <RTL> slot".into()))
        );
        let no_eos = vec![vocab::BOS, vocab::DEMO, 11, 12, vocab::SEP, vocab::USR, 13, vocab::AGT, vocab::PRTL, 13];
        assert!(matches!(deserialize(&no_eos, &v, l), Err(SerializeError::Malformed(_))));
        let empty = vec![vocab::BOS, vocab::DEMO, 11, 12, vocab::SEP, vocab::USR, 13, vocab::AGT, vocab::PRTL, vocab::EOS];
        assert!(matches!(deserialize(&empty, &v, l), Err(SerializeError::Malformed(_))));
    }

    #[test]
    fn prompt_ends_at_agent_marker() {
        let v = vocab();
        let ex = example(&["i have a pet cat"]);
        let p = encode_prompt(&ex.demographics, &ex.persona, &ex.context, &v, 256, 20).unwrap();
        let inst = serialize(&ex, &v, LayoutConfig::default(), InstanceMeta::default()).unwrap();
        assert_eq!(p[..], inst.input_ids[..inst.target_start()]);
        assert_eq!(*p.last().unwrap(), vocab::AGT);
    }
}
