//! Decoder-only transformer with hand-written backpropagation.
//!
//! Pre-norm blocks, learned positional embeddings, output head tied to the
//! token embedding, GELU feed-forward, dropout on both residual branches.
//! All parameters live in one flat buffer; [`ParamLayout`] names the slices.

mod checkpoint;
mod generate;
pub mod ops;
mod train;

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::vocab::TokenId;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader};
pub use generate::{DecodeConfig, Generation, KvCache};
pub use train::{train, AdamW, StepLog, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            ffn_mult: 4,
            max_seq_len: 256,
            vocab_size: 0,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return bad("layer count, width, heads and ffn_mult must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    BadToken { id: TokenId, vocab: usize },
    #[error("input_ids and loss_mask lengths differ")]
    ShapeMismatch,
    #[error("loss mask selects no position")]
    EmptyMask,
    #[error("loss mask selects the first position, which has no prefix")]
    MaskAtStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlices {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc_w: Range<usize>,
    pub fc_b: Range<usize>,
    pub fcp_w: Range<usize>,
    pub fcp_b: Range<usize>,
}

/// Offsets of every tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub wte: Range<usize>,
    pub wpe: Range<usize>,
    pub layers: Vec<LayerSlices>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (c, f, v, t) = (cfg.d_model, cfg.ffn_dim(), cfg.vocab_size, cfg.max_seq_len);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let wte = take(v * c);
        let wpe = take(t * c);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlices {
                ln1_g: take(c),
                ln1_b: take(c),
                qkv_w: take(3 * c * c),
                qkv_b: take(3 * c),
                proj_w: take(c * c),
                proj_b: take(c),
                ln2_g: take(c),
                ln2_b: take(c),
                fc_w: take(f * c),
                fc_b: take(f),
                fcp_w: take(c * f),
                fcp_b: take(c),
            })
            .collect();
        let lnf_g = take(c);
        let lnf_b = take(c);
        Self {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            total: at,
        }
    }

    /// Slices that receive weight decay: embeddings and weight matrices.
    pub fn decayed(&self) -> Vec<Range<usize>> {
        let mut v = vec![self.wte.clone(), self.wpe.clone()];
        for l in &self.layers {
            v.extend([l.qkv_w.clone(), l.proj_w.clone(), l.fc_w.clone(), l.fcp_w.clone()]);
        }
        v
    }
}

#[derive(Debug, Clone, Default)]
struct LayerActs<T> {
    inp: Vec<T>,
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    atty: Vec<T>,
    drop1: Vec<T>,
    res2: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fch: Vec<T>,
    fch_gelu: Vec<T>,
    drop2: Vec<T>,
}

#[derive(Debug, Clone, Default)]
struct Acts<T> {
    layers: Vec<LayerActs<T>>,
    out: Vec<T>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T: Scalar> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<T>,
}

fn dropout_mask<T: Scalar, R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

impl<T: Scalar> Transformer<T> {
    /// Freshly initialized model: normal(0, 0.02) weights, residual output
    /// projections scaled by `1/sqrt(2 * n_layers)`, unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.check()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, std / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut fill = |r: &Range<usize>, d: &Normal<f64>, rng: &mut ChaCha8Rng| {
            for p in &mut params[r.clone()] {
                *p = T::lit(d.sample(rng));
            }
        };
        fill(&layout.wte, &normal, &mut rng);
        fill(&layout.wpe, &normal, &mut rng);
        for l in &layout.layers {
            fill(&l.qkv_w, &normal, &mut rng);
            fill(&l.proj_w, &resid, &mut rng);
            fill(&l.fc_w, &normal, &mut rng);
            fill(&l.fcp_w, &resid, &mut rng);
        }
        for l in &layout.layers {
            params[l.ln1_g.clone()].iter_mut().for_each(|g| *g = T::one());
            params[l.ln2_g.clone()].iter_mut().for_each(|g| *g = T::one());
        }
        params[layout.lnf_g.clone()].iter_mut().for_each(|g| *g = T::one());
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        config.check()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::BadToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_mask(&self, ids: &[TokenId], mask: &[bool]) -> Result<usize, ModelError> {
        self.check_ids(ids)?;
        if ids.len() != mask.len() {
            return Err(ModelError::ShapeMismatch);
        }
        if mask.first() == Some(&true) {
            return Err(ModelError::MaskAtStart);
        }
        match mask.iter().filter(|&&m| m).count() {
            0 => Err(ModelError::EmptyMask),
            n => Ok(n),
        }
    }

    fn forward_acts<R: Rng>(&self, ids: &[TokenId], mut dropout: Option<&mut R>) -> Acts<T> {
        let cfg = &self.config;
        let (n, c, f, nh) = (ids.len(), cfg.d_model, cfg.ffn_dim(), cfg.n_heads);
        let p = &self.params;
        let lay = &self.layout;
        let mut x = vec![T::zero(); n * c];
        for (t, &id) in ids.iter().enumerate() {
            let e = &p[lay.wte.start + id as usize * c..][..c];
            let pe = &p[lay.wpe.start + t * c..][..c];
            for i in 0..c {
                x[t * c + i] = e[i] + pe[i];
            }
        }
        let mut acts = Acts {
            layers: Vec::with_capacity(cfg.n_layers),
            ..Default::default()
        };
        for l in &lay.layers {
            let mut a = LayerActs {
                ln1: vec![T::zero(); n * c],
                ln1_mean: vec![T::zero(); n],
                ln1_rstd: vec![T::zero(); n],
                qkv: vec![T::zero(); n * 3 * c],
                att: vec![T::zero(); nh * n * n],
                atty: vec![T::zero(); n * c],
                ln2: vec![T::zero(); n * c],
                ln2_mean: vec![T::zero(); n],
                ln2_rstd: vec![T::zero(); n],
                fch: vec![T::zero(); n * f],
                fch_gelu: vec![T::zero(); n * f],
                ..Default::default()
            };
            ops::layernorm_forward(&mut a.ln1, &mut a.ln1_mean, &mut a.ln1_rstd, &x, &p[l.ln1_g.clone()], &p[l.ln1_b.clone()], n, c);
            ops::matmul_forward(&mut a.qkv, &a.ln1, &p[l.qkv_w.clone()], &p[l.qkv_b.clone()], n, c, 3 * c);
            ops::attention_forward(&mut a.atty, &mut a.att, &a.qkv, n, c, nh);
            let mut branch = vec![T::zero(); n * c];
            ops::matmul_forward(&mut branch, &a.atty, &p[l.proj_w.clone()], &p[l.proj_b.clone()], n, c, c);
            if let Some(rng) = dropout.as_deref_mut() {
                a.drop1 = dropout_mask(rng, n * c, cfg.dropout);
                branch.iter_mut().zip(&a.drop1).for_each(|(b, m)| *b *= *m);
            }
            a.res2 = x.iter().zip(&branch).map(|(a, b)| *a + *b).collect();
            ops::layernorm_forward(&mut a.ln2, &mut a.ln2_mean, &mut a.ln2_rstd, &a.res2, &p[l.ln2_g.clone()], &p[l.ln2_b.clone()], n, c);
            ops::matmul_forward(&mut a.fch, &a.ln2, &p[l.fc_w.clone()], &p[l.fc_b.clone()], n, c, f);
            ops::gelu_forward(&mut a.fch_gelu, &a.fch);
            ops::matmul_forward(&mut branch, &a.fch_gelu, &p[l.fcp_w.clone()], &p[l.fcp_b.clone()], n, f, c);
            if let Some(rng) = dropout.as_deref_mut() {
                a.drop2 = dropout_mask(rng, n * c, cfg.dropout);
                branch.iter_mut().zip(&a.drop2).for_each(|(b, m)| *b *= *m);
            }
            let next: Vec<T> = a.res2.iter().zip(&branch).map(|(a, b)| *a + *b).collect();
            a.inp = std::mem::replace(&mut x, next);
            acts.layers.push(a);
        }
        acts.lnf = vec![T::zero(); n * c];
        acts.lnf_mean = vec![T::zero(); n];
        acts.lnf_rstd = vec![T::zero(); n];
        ops::layernorm_forward(&mut acts.lnf, &mut acts.lnf_mean, &mut acts.lnf_rstd, &x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], n, c);
        acts.out = x;
        acts
    }

    /// Log-softmax of the tied output head for one final hidden state.
    fn head(&self, hidden: &[T], out: &mut [T]) {
        let c = self.config.d_model;
        let wte = &self.params[self.layout.wte.clone()];
        for (v, o) in out.iter_mut().enumerate() {
            *o = ops::dot(hidden, &wte[v * c..(v + 1) * c]);
        }
        ops::log_softmax(out);
    }

    /// Row `t` of the result is the log-distribution of the token after `ids[t]`.
    pub fn log_probs(&self, ids: &[TokenId]) -> Result<Vec<T>, ModelError> {
        self.check_ids(ids)?;
        let acts = self.forward_acts::<ChaCha8Rng>(ids, None);
        let (c, v) = (self.config.d_model, self.config.vocab_size);
        let mut out = vec![T::zero(); ids.len() * v];
        for t in 0..ids.len() {
            self.head(&acts.lnf[t * c..(t + 1) * c], &mut out[t * v..(t + 1) * v]);
            debug_assert!({
                let s: f64 = out[t * v..(t + 1) * v].iter().map(|x| x.as_f64().exp()).sum();
                (s - 1.0).abs() < 1e-6 * v as f64
            });
        }
        Ok(out)
    }

    /// Log-probability of each masked token given its prefix, in sequence order.
    pub fn score(&self, ids: &[TokenId], mask: &[bool]) -> Result<Vec<T>, ModelError> {
        self.check_mask(ids, mask)?;
        let acts = self.forward_acts::<ChaCha8Rng>(ids, None);
        let (c, v) = (self.config.d_model, self.config.vocab_size);
        let mut row = vec![T::zero(); v];
        let mut out = Vec::new();
        for i in (1..ids.len()).filter(|&i| mask[i]) {
            self.head(&acts.lnf[(i - 1) * c..i * c], &mut row);
            out.push(row[ids[i] as usize]);
        }
        Ok(out)
    }

    /// Mean negative log-likelihood over the masked tokens, without dropout.
    pub fn loss(&self, ids: &[TokenId], mask: &[bool]) -> Result<T, ModelError> {
        let s = self.score(ids, mask)?;
        let n = T::lit(s.len() as f64);
        Ok(-s.into_iter().sum::<T>() / n)
    }

    /// Adds `scale * d(Σ masked NLL)/dθ` into `grads` and returns the summed
    /// NLL and the number of masked tokens. Dropout is active when `rng` is given.
    pub fn accumulate_grad(
        &self,
        ids: &[TokenId],
        mask: &[bool],
        scale: T,
        grads: &mut [T],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, usize), ModelError> {
        let count = self.check_mask(ids, mask)?;
        let dropout = if self.config.dropout > 0.0 { rng } else { None };
        let acts = self.forward_acts(ids, dropout);
        let cfg = &self.config;
        let (n, c, f, nh, vs) = (ids.len(), cfg.d_model, cfg.ffn_dim(), cfg.n_heads, cfg.vocab_size);
        let p = &self.params;
        let lay = &self.layout;

        let mut nll = T::zero();
        let mut dlnf = vec![T::zero(); n * c];
        let mut row = vec![T::zero(); vs];
        for i in (1..n).filter(|&i| mask[i]) {
            let h = &acts.lnf[(i - 1) * c..i * c];
            self.head(h, &mut row);
            let target = ids[i] as usize;
            nll -= row[target];
            let dh = &mut dlnf[(i - 1) * c..i * c];
            for (v, lp) in row.iter().enumerate() {
                let mut g = lp.exp();
                if v == target {
                    g -= T::one();
                }
                let g = g * scale;
                ops::axpy(dh, g, &p[lay.wte.start + v * c..][..c]);
                ops::axpy(&mut grads[lay.wte.start + v * c..][..c], g, h);
            }
        }

        let mut dx = vec![T::zero(); n * c];
        let (gg, gb) = weight_bias(grads, &lay.lnf_g, &lay.lnf_b);
        ops::layernorm_backward(&mut dx, gg, gb, &dlnf, &acts.out, &p[lay.lnf_g.clone()], &acts.lnf_mean, &acts.lnf_rstd, n, c);

        let mut dbranch = vec![T::zero(); n * c];
        let mut dfg = vec![T::zero(); n * f];
        let mut dfch = vec![T::zero(); n * f];
        let mut dln = vec![T::zero(); n * c];
        let mut datty = vec![T::zero(); n * c];
        let mut dqkv = vec![T::zero(); n * 3 * c];
        for (l, a) in lay.layers.iter().zip(&acts.layers).rev() {
            // second residual branch
            dbranch.copy_from_slice(&dx);
            if !a.drop2.is_empty() {
                dbranch.iter_mut().zip(&a.drop2).for_each(|(d, m)| *d *= *m);
            }
            dfg.iter_mut().for_each(|v| *v = T::zero());
            let (gw, gb) = weight_bias(grads, &l.fcp_w, &l.fcp_b);
            ops::matmul_backward(&mut dfg, gw, gb, &dbranch, &a.fch_gelu, &p[l.fcp_w.clone()], n, f, c);
            dfch.iter_mut().for_each(|v| *v = T::zero());
            ops::gelu_backward(&mut dfch, &a.fch, &dfg);
            dln.iter_mut().for_each(|v| *v = T::zero());
            let (gw, gb) = weight_bias(grads, &l.fc_w, &l.fc_b);
            ops::matmul_backward(&mut dln, gw, gb, &dfch, &a.ln2, &p[l.fc_w.clone()], n, c, f);
            let (gg, gb) = weight_bias(grads, &l.ln2_g, &l.ln2_b);
            ops::layernorm_backward(&mut dx, gg, gb, &dln, &a.res2, &p[l.ln2_g.clone()], &a.ln2_mean, &a.ln2_rstd, n, c);

            // attention branch
            dbranch.copy_from_slice(&dx);
            if !a.drop1.is_empty() {
                dbranch.iter_mut().zip(&a.drop1).for_each(|(d, m)| *d *= *m);
            }
            datty.iter_mut().for_each(|v| *v = T::zero());
            let (gw, gb) = weight_bias(grads, &l.proj_w, &l.proj_b);
            ops::matmul_backward(&mut datty, gw, gb, &dbranch, &a.atty, &p[l.proj_w.clone()], n, c, c);
            dqkv.iter_mut().for_each(|v| *v = T::zero());
            ops::attention_backward(&mut dqkv, &datty, &a.qkv, &a.att, n, c, nh);
            dln.iter_mut().for_each(|v| *v = T::zero());
            let (gw, gb) = weight_bias(grads, &l.qkv_w, &l.qkv_b);
            ops::matmul_backward(&mut dln, gw, gb, &dqkv, &a.ln1, &p[l.qkv_w.clone()], n, c, 3 * c);
            let (gg, gb) = weight_bias(grads, &l.ln1_g, &l.ln1_b);
            ops::layernorm_backward(&mut dx, gg, gb, &dln, &a.inp, &p[l.ln1_g.clone()], &a.ln1_mean, &a.ln1_rstd, n, c);
        }

        for (t, &id) in ids.iter().enumerate() {
            let d = &dx[t * c..(t + 1) * c];
            ops::axpy(&mut grads[lay.wte.start + id as usize * c..][..c], T::one(), d);
            ops::axpy(&mut grads[lay.wpe.start + t * c..][..c], T::one(), d);
        }
        Ok((nll, count))
    }
}

/// Disjoint mutable views of a weight slice and the bias slice that follows it.
fn weight_bias<'a, T>(grads: &'a mut [T], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(w.end <= b.start);
    let (lo, hi) = grads.split_at_mut(b.start);
    (&mut lo[w.clone()], &mut hi[..b.len()])
}

/// Mean of `-logprobs[i - 1][ids[i]]` over masked positions `i`, where
/// `logprobs` is the `[n, vocab_size]` output of [`Transformer::log_probs`].
pub fn nll_loss<T: Scalar>(logprobs: &[T], vocab_size: usize, ids: &[TokenId], mask: &[bool]) -> Result<T, ModelError> {
    if ids.len() != mask.len() || logprobs.len() != ids.len() * vocab_size {
        return Err(ModelError::ShapeMismatch);
    }
    if mask.first() == Some(&true) {
        return Err(ModelError::MaskAtStart);
    }
    let mut sum = T::zero();
    let mut n = 0usize;
    for i in (1..ids.len()).filter(|&i| mask[i]) {
        sum -= logprobs[(i - 1) * vocab_size + ids[i] as usize];
        n += 1;
    }
    if n == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(sum / T::lit(n as f64))
}
