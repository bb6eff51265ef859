//! Checkpoint-level evaluation over a serialized eval set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{classify_grounding, p_cover, persona_f1, GroundingJudgment, GroundingLevel};
use crate::corpus::{PersonaAttribute, Rtl};
use crate::model::{Checkpoint, DecodeConfig, ModelError};
use crate::scalar::Scalar;
use crate::serialize::{deserialize, rtl_of_token, SerializeError, TrainingInstance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    Empty,
    #[error("no {0} instances in the evaluation set")]
    EmptyClass(Rtl),
    #[error("instance {index}: {message}")]
    Layout { index: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct EvalOptions {
    pub decode: DecodeConfig,
    /// Score F1 and P-Cover against the positive attributes only.
    pub positives_only: bool,
    /// Also decode every PRTL-gold instance under both forced labels.
    pub forced_comparison: bool,
}


#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RtlAccuracy {
    pub prtl: Option<f64>,
    pub crtl: Option<f64>,
    pub n_prtl: usize,
    pub n_crtl: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingCounts {
    pub hard: usize,
    pub soft: usize,
    pub non_personalized: usize,
}

/// Mean F1 of personalized-context responses decoded under each forced label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcedComparison {
    pub f1_prtl: f64,
    pub f1_crtl: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub f1: f64,
    pub p_cover: f64,
    /// Free-decoding accuracy per gold label; absent for models without the label slot.
    pub rtl_accuracy: Option<RtlAccuracy>,
    pub grounding_counts: GroundingCounts,
    pub n_instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced: Option<ForcedComparison>,
}

fn check_layout<T: Scalar>(ck: &Checkpoint<T>, inst: &TrainingInstance, index: usize) -> Result<usize, EvalError> {
    let start = inst.target_start();
    let bad = |message: &str| EvalError::Layout {
        index,
        message: message.to_string(),
    };
    if start == 0 || start >= inst.input_ids.len() {
        return Err(bad("no target span"));
    }
    if inst.input_ids.len() > ck.model.config.max_seq_len {
        return Err(bad("longer than the model context"));
    }
    let slot = rtl_of_token(inst.input_ids[start]).is_some();
    if slot != ck.layout.rtl_slot {
        return Err(bad(if ck.layout.rtl_slot {
            "checkpoint expects a response-type slot"
        } else {
            "checkpoint was trained without a response-type slot"
        }));
    }
    Ok(start)
}

/// exp of the mean negative log-likelihood over every target token, read
/// from the full next-token distributions.
pub fn perplexity<T: Scalar>(ck: &Checkpoint<T>, instances: &[TrainingInstance]) -> Result<f64, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::Empty);
    }
    let v = ck.model.vocab_size();
    let (mut nll, mut count) = (0.0, 0usize);
    for (n, inst) in instances.iter().enumerate() {
        check_layout(ck, inst, n)?;
        let lp = ck.model.log_probs(&inst.input_ids)?;
        for (i, (&id, &m)) in inst.input_ids.iter().zip(&inst.loss_mask).enumerate() {
            if m {
                nll -= lp[(i - 1) * v + id as usize].as_f64();
                count += 1;
            }
        }
    }
    Ok((nll / count as f64).exp())
}

/// Labels the model emits when decoding freely, paired with the gold label.
pub fn rtl_predictions<T: Scalar>(
    ck: &Checkpoint<T>,
    instances: &[TrainingInstance],
    decode: &DecodeConfig,
) -> Result<Vec<(Rtl, Rtl)>, EvalError> {
    instances
        .iter()
        .enumerate()
        .map(|(n, inst)| {
            let start = check_layout(ck, inst, n)?;
            let cfg = DecodeConfig {
                max_new_tokens: 0,
                ..instance_decode(decode, n)
            };
            let g = ck.model.generate_ids(&inst.input_ids[..start], true, None, &cfg)?;
            Ok((inst.rtl, g.rtl.expect("label slot is decoded")))
        })
        .collect()
}

/// Sampling seeds differ per instance so draws are independent.
fn instance_decode(cfg: &DecodeConfig, index: usize) -> DecodeConfig {
    DecodeConfig {
        seed: cfg.seed.wrapping_add(index as u64),
        ..*cfg
    }
}

fn accuracy(pairs: &[(Rtl, Rtl)]) -> RtlAccuracy {
    let class = |r: Rtl| {
        let gold: Vec<_> = pairs.iter().filter(|p| p.0 == r).collect();
        let hit = gold.iter().filter(|p| p.1 == r).count();
        (
            (!gold.is_empty()).then(|| hit as f64 / gold.len() as f64),
            gold.len(),
        )
    };
    let (prtl, n_prtl) = class(Rtl::Prtl);
    let (crtl, n_crtl) = class(Rtl::Crtl);
    RtlAccuracy {
        prtl,
        crtl,
        n_prtl,
        n_crtl,
    }
}

/// Per-class accuracy of freely decoded labels. Requires both classes.
pub fn rtl_accuracy<T: Scalar>(
    ck: &Checkpoint<T>,
    instances: &[TrainingInstance],
    decode: &DecodeConfig,
) -> Result<RtlAccuracy, EvalError> {
    if !ck.layout.rtl_slot {
        return Err(EvalError::Layout {
            index: 0,
            message: "checkpoint was trained without a response-type slot".into(),
        });
    }
    let acc = accuracy(&rtl_predictions(ck, instances, decode)?);
    for (n, r) in [(acc.n_prtl, Rtl::Prtl), (acc.n_crtl, Rtl::Crtl)] {
        if n == 0 {
            return Err(EvalError::EmptyClass(r));
        }
    }
    Ok(acc)
}

/// Grounding level of a response. Without an emitted label, a response
/// sharing no content word with any attribute counts as non-personalized.
pub fn judge_grounding(response: &str, persona: &[PersonaAttribute], rtl: Option<Rtl>) -> GroundingJudgment {
    match rtl {
        Some(r) => classify_grounding(response, persona, r),
        None => {
            let j = classify_grounding(response, persona, Rtl::Prtl);
            if j.similarity > 0.0 {
                j
            } else {
                classify_grounding(response, persona, Rtl::Crtl)
            }
        }
    }
}

struct Reference {
    attrs: Vec<PersonaAttribute>,
    scored: Vec<String>,
}

fn reference<T: Scalar>(ck: &Checkpoint<T>, inst: &TrainingInstance, positives_only: bool) -> Result<Reference, EvalError> {
    let ex = deserialize(&inst.input_ids, &ck.vocab, ck.layout)?;
    let scored = if positives_only {
        inst.meta
            .positives
            .iter()
            .filter_map(|&i| ex.persona.get(i).cloned())
            .collect()
    } else {
        ex.persona.clone()
    };
    let attrs = ex
        .persona
        .into_iter()
        .enumerate()
        .map(|(i, t)| PersonaAttribute::new(format!("{i:03}"), t))
        .collect();
    Ok(Reference { attrs, scored })
}

/// Decodes every instance and aggregates the response metrics; F1 and
/// P-Cover average over all instances, casual ones included.
pub fn evaluate<T: Scalar>(
    ck: &Checkpoint<T>,
    instances: &[TrainingInstance],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let ppl = perplexity(ck, instances)?;
    let (mut f1, mut pc) = (0.0, 0.0);
    let mut counts = GroundingCounts::default();
    let mut pairs = Vec::new();
    let (mut fp, mut fc, mut nf) = (0.0, 0.0, 0usize);
    for (n, inst) in instances.iter().enumerate() {
        let start = check_layout(ck, inst, n)?;
        let prompt = &inst.input_ids[..start];
        let r = reference(ck, inst, opts.positives_only)?;
        let decode = instance_decode(&opts.decode, n);
        let g = ck.model.generate_ids(prompt, ck.layout.rtl_slot, None, &decode)?;
        let text = ck.vocab.decode(&g.token_ids);
        f1 += persona_f1(&text, &r.scored);
        pc += p_cover(&text, &r.scored, &ck.idf);
        if let Some(rtl) = g.rtl {
            pairs.push((inst.rtl, rtl));
        }
        let judged = judge_grounding(&text, &r.attrs, g.rtl);
        match judged.level {
            GroundingLevel::Hard => counts.hard += 1,
            GroundingLevel::Soft => counts.soft += 1,
            GroundingLevel::None => counts.non_personalized += 1,
        }
        if opts.forced_comparison && ck.layout.rtl_slot && inst.rtl == Rtl::Prtl {
            for (force, acc) in [(Rtl::Prtl, &mut fp), (Rtl::Crtl, &mut fc)] {
                let g = ck.model.generate_ids(prompt, true, Some(force), &decode)?;
                *acc += persona_f1(&ck.vocab.decode(&g.token_ids), &r.scored);
            }
            nf += 1;
        }
    }
    let n = instances.len() as f64;
    Ok(EvalReport {
        ppl,
        f1: f1 / n,
        p_cover: pc / n,
        rtl_accuracy: ck.layout.rtl_slot.then(|| accuracy(&pairs)),
        grounding_counts: counts,
        n_instances: instances.len(),
        forced: (nf > 0).then(|| ForcedComparison {
            f1_prtl: fp / nf as f64,
            f1_crtl: fc / nf as f64,
            n: nf,
        }),
    })
}
