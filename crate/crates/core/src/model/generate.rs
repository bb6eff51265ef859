use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ops, ModelError, Transformer};
use crate::corpus::Rtl;
use crate::scalar::Scalar;
use crate::serialize::rtl_of_token;
use crate::vocab::{self, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// Greedy when unset; otherwise sample from the `top_k` most likely tokens.
    pub top_k: Option<usize>,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 24,
            top_k: None,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// `None` for models trained without the RTL slot.
    pub rtl: Option<Rtl>,
    pub rtl_logprob: Option<f64>,
    pub token_ids: Vec<TokenId>,
    /// Full-vocabulary log-probability of each emitted response token.
    pub token_logprobs: Vec<f64>,
    pub hit_eos: bool,
}

/// Per-layer key/value rows of the positions processed so far.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(model: &Transformer<T>) -> Self {
        let size = model.config.max_seq_len * model.config.d_model;
        let n = model.config.n_layers;
        Self {
            k: vec![vec![T::zero(); size]; n],
            v: vec![vec![T::zero(); size]; n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn is_response_token(id: usize) -> bool {
    id == vocab::EOS as usize || !vocab::is_special(id as TokenId)
}

impl<T: Scalar> Transformer<T> {
    /// Appends one token and returns the next-token log-distribution.
    pub fn step(&self, cache: &mut KvCache<T>, token: TokenId) -> Result<Vec<T>, ModelError> {
        let cfg = &self.config;
        let (c, f, nh) = (cfg.d_model, cfg.ffn_dim(), cfg.n_heads);
        let hs = c / nh;
        let pos = cache.len;
        if pos >= cfg.max_seq_len {
            return Err(ModelError::TooLong {
                len: pos + 1,
                max: cfg.max_seq_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::BadToken {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        let p = &self.params;
        let lay = &self.layout;
        let mut x: Vec<T> = p[lay.wte.start + token as usize * c..][..c]
            .iter()
            .zip(&p[lay.wpe.start + pos * c..][..c])
            .map(|(a, b)| *a + *b)
            .collect();
        let (mut m, mut r) = ([T::zero()], [T::zero()]);
        let mut h = vec![T::zero(); c];
        let mut qkv = vec![T::zero(); 3 * c];
        let mut y = vec![T::zero(); c];
        let mut branch = vec![T::zero(); c];
        let mut fc = vec![T::zero(); f];
        let mut fg = vec![T::zero(); f];
        let mut scores = vec![T::zero(); pos + 1];
        let scale = T::one() / T::lit(hs as f64).sqrt();
        for (li, l) in lay.layers.iter().enumerate() {
            ops::layernorm_forward(&mut h, &mut m, &mut r, &x, &p[l.ln1_g.clone()], &p[l.ln1_b.clone()], 1, c);
            ops::matmul_forward(&mut qkv, &h, &p[l.qkv_w.clone()], &p[l.qkv_b.clone()], 1, c, 3 * c);
            cache.k[li][pos * c..(pos + 1) * c].copy_from_slice(&qkv[c..2 * c]);
            cache.v[li][pos * c..(pos + 1) * c].copy_from_slice(&qkv[2 * c..]);
            for head in 0..nh {
                let q = &qkv[head * hs..(head + 1) * hs];
                let mut max = T::neg_infinity();
                for (t2, s) in scores.iter_mut().enumerate() {
                    *s = ops::dot(q, &cache.k[li][t2 * c + head * hs..][..hs]) * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let o = &mut y[head * hs..(head + 1) * hs];
                o.iter_mut().for_each(|v| *v = T::zero());
                for (t2, s) in scores.iter().enumerate() {
                    ops::axpy(o, *s / sum, &cache.v[li][t2 * c + head * hs..][..hs]);
                }
            }
            ops::matmul_forward(&mut branch, &y, &p[l.proj_w.clone()], &p[l.proj_b.clone()], 1, c, c);
            x.iter_mut().zip(&branch).for_each(|(a, b)| *a += *b);
            ops::layernorm_forward(&mut h, &mut m, &mut r, &x, &p[l.ln2_g.clone()], &p[l.ln2_b.clone()], 1, c);
            ops::matmul_forward(&mut fc, &h, &p[l.fc_w.clone()], &p[l.fc_b.clone()], 1, c, f);
            ops::gelu_forward(&mut fg, &fc);
            ops::matmul_forward(&mut branch, &fg, &p[l.fcp_w.clone()], &p[l.fcp_b.clone()], 1, f, c);
            x.iter_mut().zip(&branch).for_each(|(a, b)| *a += *b);
        }
        ops::layernorm_forward(&mut h, &mut m, &mut r, &x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], 1, c);
        let mut out = vec![T::zero(); cfg.vocab_size];
        self.head(&h, &mut out);
        cache.len += 1;
        Ok(out)
    }

    /// Decodes after `prompt`, which must end with the `<AGT>` marker.
    ///
    /// With `rtl_slot`, the first emitted token is `<PRTL>` or `<CRTL>`:
    /// `force` fixes it, otherwise it is chosen from those two alone. Response
    /// tokens are word tokens or `<EOS>`.
    pub fn generate_ids(
        &self,
        prompt: &[TokenId],
        rtl_slot: bool,
        force: Option<Rtl>,
        cfg: &DecodeConfig,
    ) -> Result<Generation, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyMask);
        }
        let mut cache = KvCache::new(self);
        let mut dist = Vec::new();
        for &t in prompt {
            dist = self.step(&mut cache, t)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut out = Generation {
            rtl: None,
            rtl_logprob: None,
            token_ids: Vec::new(),
            token_logprobs: Vec::new(),
            hit_eos: false,
        };
        if rtl_slot {
            let tok = match force {
                Some(Rtl::Prtl) => vocab::PRTL,
                Some(Rtl::Crtl) => vocab::CRTL,
                None => self.pick(&dist, |i| i == vocab::PRTL as usize || i == vocab::CRTL as usize, cfg, &mut rng),
            };
            out.rtl = rtl_of_token(tok);
            out.rtl_logprob = Some(dist[tok as usize].as_f64());
            if cache.len < self.config.max_seq_len {
                dist = self.step(&mut cache, tok)?;
            } else {
                return Ok(out);
            }
        }
        while out.token_ids.len() < cfg.max_new_tokens {
            let tok = self.pick(&dist, is_response_token, cfg, &mut rng);
            out.token_logprobs.push(dist[tok as usize].as_f64());
            if tok == vocab::EOS {
                out.hit_eos = true;
                break;
            }
            out.token_ids.push(tok);
            if cache.len >= self.config.max_seq_len {
                break;
            }
            dist = self.step(&mut cache, tok)?;
        }
        Ok(out)
    }

    fn pick(&self, dist: &[T], allowed: impl Fn(usize) -> bool, cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> TokenId {
        let mut cand: Vec<(usize, f64)> = dist
            .iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i))
            .map(|(i, lp)| (i, lp.as_f64()))
            .collect();
        // highest first, lowest id among equals
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        match cfg.top_k {
            None | Some(0) | Some(1) => cand[0].0 as TokenId,
            Some(k) => {
                cand.truncate(k);
                let temp = cfg.temperature.max(1e-6);
                let top = cand[0].1;
                let w: Vec<f64> = cand.iter().map(|(_, lp)| ((lp - top) / temp).exp()).collect();
                let idx = WeightedIndex::new(&w).expect("positive weights").sample(rng);
                cand[idx].0 as TokenId
            }
        }
    }
}
