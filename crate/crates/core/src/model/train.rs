use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelError, Transformer};
use crate::scalar::Scalar;
use crate::serialize::TrainingInstance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Exact number of optimizer steps when set; `epochs` is then ignored
    /// and the data cycles as often as needed.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Cosine decay ends at `lr * min_lr_ratio`; 1 keeps the rate constant.
    pub min_lr_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            weight_decay: 0.1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 0,
            min_lr_ratio: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, n_instances: usize) -> usize {
        let per_epoch = n_instances.div_ceil(self.batch_size.max(1));
        self.max_steps.unwrap_or(per_epoch * self.epochs)
    }

    /// Learning rate for the 1-based step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("learning rate and batch size must be positive, lr may be zero")]
    Config,
    #[error("no training instances")]
    Empty,
    #[error("non-finite loss at step {step} (batch starting with instance {instance})")]
    NonFinite { step: usize, instance: usize },
}

/// Adam with decoupled weight decay on a subset of the parameters.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<T>,
    v: Vec<T>,
    decay: Vec<bool>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n: usize, decayed: &[Range<usize>]) -> Self {
        let mut decay = vec![false; n];
        for r in decayed {
            decay[r.clone()].iter_mut().for_each(|d| *d = true);
        }
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            decay,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let lr_t = T::lit(lr);
        let shrink = T::lit(1.0 - lr * cfg.weight_decay);
        let eps = T::lit(cfg.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            if self.decay[i] {
                params[i] *= shrink;
            }
            params[i] -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Token-mean NLL of the batch before the update.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub log: Vec<StepLog>,
}

/// Trains in place. The first epoch follows `data` order; later epochs are
/// reshuffled from the seed. `on_step` sees every step log as it happens.
pub fn train<T: Scalar>(
    model: &mut Transformer<T>,
    data: &[TrainingInstance],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    if cfg.batch_size == 0 || cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(TrainError::Config);
    }
    let total = cfg.total_steps(data.len());
    let mut opt = AdamW::new(model.n_params(), &model.layout.decayed());
    let mut grads = vec![T::zero(); model.n_params()];
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0.. {
        if epoch > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2 + epoch as u64);
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            step += 1;
            grads.iter_mut().for_each(|g| *g = T::zero());
            let tokens: usize = batch.iter().map(|&i| data[i].masked_count()).sum();
            let scale = T::lit(1.0 / tokens.max(1) as f64);
            let mut nll = 0.0;
            for &i in batch {
                let inst = &data[i];
                let (s, _) = model.accumulate_grad(&inst.input_ids, &inst.loss_mask, scale, &mut grads, Some(&mut dropout_rng))?;
                nll += s.as_f64();
            }
            let loss = nll / tokens.max(1) as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    instance: batch[0],
                });
            }
            let norm = grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let k = T::lit(cfg.grad_clip / norm);
                grads.iter_mut().for_each(|g| *g *= k);
            }
            let lr = cfg.lr_at(step, total);
            opt.step(&mut model.params, &grads, lr, cfg);
            let entry = StepLog {
                step,
                loss,
                lr,
                grad_norm: norm,
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok(TrainOutcome { steps: step, log })
}
