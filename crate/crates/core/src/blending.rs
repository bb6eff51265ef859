//! Instance-level weighted dataset blending.
//!
//! Each dataset `i` with weight `w_i` receives `w_i / Σ_j w_j × ‖D‖` training
//! instances, where `‖D‖` is the total number of instances available across all
//! participating datasets. Quotas are computed exactly (weights are decoded into
//! dyadic rationals), rounded half-to-even, and then corrected by largest
//! remainder so the sizes always sum to `‖D‖`.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_traits::{Float, ToPrimitive};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Episode, Rtl, Speaker};

#[derive(Debug, Error, PartialEq)]
pub enum BlendError {
    #[error("blend spec has no datasets")]
    EmptySpec,
    #[error("dataset {dataset_id}: weight must be positive and finite, got {weight}")]
    BadWeight { dataset_id: String, weight: f64 },
    #[error("dataset {dataset_id}: target size {target} but no instances available")]
    NoInstances { dataset_id: String, target: usize },
    #[error("plan has {plan} datasets but {pools} instance pools were supplied")]
    PoolMismatch { plan: usize, pools: usize },
}

/// One training instance: an agent turn and the context before it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceRef {
    pub dataset_id: String,
    pub episode_id: String,
    pub session_index: usize,
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendEntry {
    pub dataset_id: String,
    pub weight: f64,
    /// Instances available in the source dataset.
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendSpec {
    pub entries: Vec<BlendEntry>,
    /// `‖D‖`: instances across all entries before blending.
    pub total_pool: usize,
}

impl BlendSpec {
    pub fn new(entries: Vec<BlendEntry>) -> Self {
        let total_pool = entries.iter().map(|e| e.available).sum();
        Self {
            entries,
            total_pool,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Oversample,
    Undersample,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub dataset_id: String,
    pub weight: f64,
    pub available: usize,
    pub target: usize,
    pub mode: SamplingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendPlan {
    pub entries: Vec<PlanEntry>,
    pub total: usize,
}

impl BlendPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.target).collect()
    }
}

impl fmt::Display for BlendPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>8} {:>10} {:>10}  mode", "dataset", "weight", "available", "target")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<20} {:>8.4} {:>10} {:>10}  {:?}",
                e.dataset_id, e.weight, e.available, e.target, e.mode
            )?;
        }
        write!(f, "{:<20} {:>8} {:>10} {:>10}", "total", "", "", self.total)
    }
}

/// Exact value of a finite positive `f64` as `mantissa × 2^exponent`.
fn decode(w: f64) -> (u64, i32) {
    let (m, e, _) = w.integer_decode();
    (m, e as i32)
}

/// Splits `total` into integer parts proportional to `weights`.
///
/// Parts are the exact quotas rounded half-to-even; if those do not sum to
/// `total`, the parts whose rounding residual is largest (when short) or
/// smallest (when over) move by one, ties going to the lower index.
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    assert!(!weights.is_empty());
    let decoded: Vec<(u64, i32)> = weights.iter().map(|&w| decode(w)).collect();
    let emin = decoded.iter().map(|&(_, e)| e).min().expect("non-empty");
    let scaled: Vec<BigUint> = decoded
        .iter()
        .map(|&(m, e)| BigUint::from(m) << ((e - emin) as usize))
        .collect();
    let denom: BigUint = scaled.iter().sum();
    let denom_i = BigInt::from(denom.clone());
    let total_big = BigUint::from(total);

    let mut parts = Vec::with_capacity(weights.len());
    let mut residuals = Vec::with_capacity(weights.len());
    for a in &scaled {
        let num = a * &total_big;
        let floor = &num / &denom;
        let rem = &num % &denom;
        let twice = &rem << 1usize;
        let round_up = match twice.cmp(&denom) {
            Ordering::Greater => true,
            Ordering::Equal => floor.bit(0),
            Ordering::Less => false,
        };
        let floor = floor.to_usize().expect("part fits in usize");
        let rem = BigInt::from(rem);
        if round_up {
            parts.push(floor + 1);
            residuals.push(rem - &denom_i);
        } else {
            parts.push(floor);
            residuals.push(rem);
        }
    }

    let sum: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..parts.len()).collect();
    match sum.cmp(&total) {
        Ordering::Less => {
            order.sort_by(|&a, &b| residuals[b].cmp(&residuals[a]).then(a.cmp(&b)));
            for &i in order.iter().take(total - sum) {
                parts[i] += 1;
            }
        }
        Ordering::Greater => {
            order.sort_by(|&a, &b| residuals[a].cmp(&residuals[b]).then(a.cmp(&b)));
            for &i in order.iter().take(sum - total) {
                parts[i] -= 1;
            }
        }
        Ordering::Equal => {}
    }
    parts
}

pub fn resolve_plan(spec: &BlendSpec) -> Result<BlendPlan, BlendError> {
    if spec.entries.is_empty() {
        return Err(BlendError::EmptySpec);
    }
    for e in &spec.entries {
        if !(e.weight.is_finite() && e.weight > 0.0) {
            return Err(BlendError::BadWeight {
                dataset_id: e.dataset_id.clone(),
                weight: e.weight,
            });
        }
    }
    let weights: Vec<f64> = spec.entries.iter().map(|e| e.weight).collect();
    let sizes = apportion(&weights, spec.total_pool);
    let entries = spec
        .entries
        .iter()
        .zip(sizes)
        .map(|(e, target)| PlanEntry {
            dataset_id: e.dataset_id.clone(),
            weight: e.weight,
            available: e.available,
            target,
            mode: match target.cmp(&e.available) {
                Ordering::Greater => SamplingMode::Oversample,
                Ordering::Less => SamplingMode::Undersample,
                Ordering::Equal => SamplingMode::Exact,
            },
        })
        .collect();
    Ok(BlendPlan {
        entries,
        total: spec.total_pool,
    })
}

/// Agent-turn instances of `episodes` under `dataset_id`, in corpus order.
pub fn agent_instances<'a>(
    dataset_id: &'a str,
    episodes: &'a [Episode],
    rtl: Option<Rtl>,
) -> impl Iterator<Item = InstanceRef> + 'a {
    episodes.iter().flat_map(move |e| {
        e.sessions.iter().enumerate().flat_map(move |(si, s)| {
            s.turns
                .iter()
                .enumerate()
                .filter(move |(_, t)| t.speaker == Speaker::Agent && (rtl.is_none() || t.rtl == rtl))
                .map(move |(ti, _)| InstanceRef {
                    dataset_id: dataset_id.to_string(),
                    episode_id: e.episode_id.clone(),
                    session_index: si,
                    turn_index: ti,
                })
        })
    })
}

/// Splits a personalized corpus into its personalized and non-personalized
/// agent-turn instances.
pub fn split_mspd(
    episodes: &[Episode],
    pr_id: &str,
    npr_id: &str,
) -> (Vec<InstanceRef>, Vec<InstanceRef>) {
    let pr = agent_instances(pr_id, episodes, Some(Rtl::Prtl)).collect();
    let npr = agent_instances(npr_id, episodes, Some(Rtl::Crtl)).collect();
    (pr, npr)
}

/// Samples every dataset to its planned size and shuffles the result globally.
///
/// `pools[i]` holds the instances of `plan.entries[i]`. A dataset shrinks by
/// uniform sampling without replacement; it grows by whole copies plus a
/// uniform sample of the remainder.
pub fn materialize(
    plan: &BlendPlan,
    pools: &[Vec<InstanceRef>],
    seed: u64,
) -> Result<Vec<InstanceRef>, BlendError> {
    if pools.len() != plan.entries.len() {
        return Err(BlendError::PoolMismatch {
            plan: plan.entries.len(),
            pools: pools.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(plan.total);
    for (entry, pool) in plan.entries.iter().zip(pools) {
        if entry.target == 0 {
            continue;
        }
        if pool.is_empty() {
            return Err(BlendError::NoInstances {
                dataset_id: entry.dataset_id.clone(),
                target: entry.target,
            });
        }
        let copies = entry.target / pool.len();
        let rem = entry.target % pool.len();
        for _ in 0..copies {
            out.extend(pool.iter().cloned());
        }
        let mut picked = index::sample(&mut rng, pool.len(), rem).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::episode;
    use crate::corpus::{Session, Turn};
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn spec(weights: &[f64], available: &[usize]) -> BlendSpec {
        BlendSpec::new(
            weights
                .iter()
                .zip(available)
                .enumerate()
                .map(|(i, (&w, &a))| BlendEntry {
                    dataset_id: format!("d{i}"),
                    weight: w,
                    available: a,
                })
                .collect(),
        )
    }

    #[test]
    fn symmetric_weights_split_evenly() {
        let plan = resolve_plan(&spec(&[0.5, 0.5], &[30, 70])).unwrap();
        assert_eq!(plan.sizes(), vec![50, 50]);
        assert_eq!(plan.entries[0].mode, SamplingMode::Oversample);
        assert_eq!(plan.entries[1].mode, SamplingMode::Undersample);
    }

    #[test]
    fn blending_weight_table_row() {
        // 0.94 : 0.5 : 0.1 of 15,400 is 9,400 : 5,000 : 1,000 exactly
        let plan = resolve_plan(&spec(&[0.94, 0.5, 0.1], &[8000, 6400, 1000])).unwrap();
        assert_eq!(plan.sizes(), vec![9400, 5000, 1000]);
        assert_eq!(plan.entries[2].mode, SamplingMode::Exact);
    }

    #[test]
    fn lone_dataset_takes_everything() {
        let plan = resolve_plan(&spec(&[0.87], &[1234])).unwrap();
        assert_eq!(plan.sizes(), vec![1234]);
    }

    #[test]
    fn half_quotas_round_to_even_then_correct() {
        // quotas 2.5 / 2.5: both round to 2, one gets the leftover
        assert_eq!(apportion(&[1.0, 1.0], 5), vec![3, 2]);
        // quotas 1.5 / 1.5: both round to 2, the lower index gives one back
        assert_eq!(apportion(&[1.0, 1.0], 3), vec![1, 2]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(resolve_plan(&spec(&[], &[])), Err(BlendError::EmptySpec));
        assert!(matches!(
            resolve_plan(&spec(&[0.5, 0.0], &[1, 1])),
            Err(BlendError::BadWeight { .. })
        ));
        assert!(matches!(
            resolve_plan(&spec(&[-1.0], &[1])),
            Err(BlendError::BadWeight { .. })
        ));
    }

    fn pool(id: &str, n: usize) -> Vec<InstanceRef> {
        (0..n)
            .map(|i| InstanceRef {
                dataset_id: id.into(),
                episode_id: format!("e{i}"),
                session_index: 0,
                turn_index: 1,
            })
            .collect()
    }

    fn multiplicities(v: &[InstanceRef]) -> HashMap<&InstanceRef, usize> {
        let mut m = HashMap::new();
        for r in v {
            *m.entry(r).or_default() += 1;
        }
        m
    }

    #[test]
    fn exact_target_is_a_permutation() {
        let plan = resolve_plan(&spec(&[1.0], &[40])).unwrap();
        let p = pool("d0", 40);
        let out = materialize(&plan, std::slice::from_ref(&p), 3).unwrap();
        let mut sorted = out.clone();
        sorted.sort();
        let mut expect = p;
        expect.sort();
        assert_eq!(sorted, expect);
    }

    #[test]
    fn doubling_duplicates_everything() {
        let plan = BlendPlan {
            entries: vec![PlanEntry {
                dataset_id: "d0".into(),
                weight: 1.0,
                available: 25,
                target: 50,
                mode: SamplingMode::Oversample,
            }],
            total: 50,
        };
        let out = materialize(&plan, &[pool("d0", 25)], 1).unwrap();
        assert!(multiplicities(&out).values().all(|&c| c == 2));
        assert_eq!(out.len(), 50);
    }

    #[test]
    fn partial_oversampling_multiplicities() {
        let plan = BlendPlan {
            entries: vec![PlanEntry {
                dataset_id: "d0".into(),
                weight: 1.0,
                available: 8000,
                target: 9400,
                mode: SamplingMode::Oversample,
            }],
            total: 9400,
        };
        let out = materialize(&plan, &[pool("d0", 8000)], 9).unwrap();
        let m = multiplicities(&out);
        assert_eq!(out.len(), 9400);
        assert_eq!(m.len(), 8000);
        assert!(m.values().all(|&c| c == 1 || c == 2));
        assert_eq!(m.values().filter(|&&c| c == 2).count(), 1400);
    }

    #[test]
    fn materialize_is_seeded() {
        let plan = resolve_plan(&spec(&[0.3, 0.7], &[10, 20])).unwrap();
        let pools = [pool("d0", 10), pool("d1", 20)];
        let a = materialize(&plan, &pools, 5).unwrap();
        assert_eq!(a, materialize(&plan, &pools, 5).unwrap());
        assert_ne!(a, materialize(&plan, &pools, 6).unwrap());
    }

    #[test]
    fn empty_pool_with_target_fails() {
        let plan = resolve_plan(&spec(&[0.5, 0.5], &[10, 0])).unwrap();
        let err = materialize(&plan, &[pool("d0", 10), vec![]], 0).unwrap_err();
        assert!(matches!(err, BlendError::NoInstances { .. }));
    }

    #[test]
    fn split_counts_agent_turns() {
        // 11 turns: 6 user, 5 agent, two of them personalized
        let mut e = episode();
        let s = &mut e.sessions[0];
        s.turns.push(Turn::user("one more"));
        let (pr, npr) = split_mspd(std::slice::from_ref(&e), "pr", "npr");
        assert_eq!((pr.len(), npr.len()), (2, 3));
        assert!(pr.iter().all(|r| r.dataset_id == "pr"));
        let casual = Episode {
            persona_pool: vec![],
            sessions: vec![Session {
                turns: vec![Turn::user("hi"), Turn::agent("hello", Rtl::Crtl)],
            }],
            ..episode()
        };
        let (pr, npr) = split_mspd(std::slice::from_ref(&casual), "pr", "npr");
        assert!(pr.is_empty());
        assert_eq!(npr.len(), 1);
    }

    proptest! {
        #[test]
        fn sizes_sum_to_pool(
            weights in prop::collection::vec(1e-3f64..1.0, 1..8),
            total in 0usize..100_000,
        ) {
            let sizes = apportion(&weights, total);
            prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        }

        #[test]
        fn scale_invariant(
            weights in prop::collection::vec(1e-3f64..1.0, 1..6),
            total in 0usize..50_000,
            shift in -8i32..8,
        ) {
            // powers of two scale a dyadic weight exactly
            let c = 2f64.powi(shift);
            let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
            prop_assert_eq!(apportion(&weights, total), apportion(&scaled, total));
        }

        #[test]
        fn monotone_in_own_weight(
            weights in prop::collection::vec(1e-2f64..1.0, 2..6),
            total in 1usize..20_000,
            which in 0usize..6,
            bump in 1e-3f64..2.0,
        ) {
            let i = which % weights.len();
            let before = apportion(&weights, total)[i];
            let mut more = weights.clone();
            more[i] += bump;
            prop_assert!(apportion(&more, total)[i] >= before);
        }
    }
}
