//! Incremental decoding with a key/value cache and nucleus sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{embed, inject};
use super::ops::{gelu, layernorm, matmul, softmax_inplace};
use super::params::ModelParams;
use super::{Scalar, SteerInjection};
use crate::error::{Error, Result};
use crate::seed;
use crate::textcodec::{is_special, TokenId, END_TURN};

/// Temperatures below this decode greedily.
pub const GREEDY_BELOW: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_p: 0.95,
            max_new: 40,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// Sorted candidate set of nucleus sampling: tokens in descending
/// probability (ties by lower id) up to the shortest prefix whose mass
/// reaches `top_p`, renormalized. Zero-probability tokens never enter.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        // Tolerance absorbs rounding in the running sum.
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

/// Draw the next token from one row of logits. Special tokens other than
/// END_TURN are never sampled.
pub fn sample_next<F: Scalar, R: Rng>(logits: &[F], temperature: f64, top_p: f64, rng: &mut R) -> TokenId {
    let allowed = |i: usize| !is_special(i as TokenId) || i as TokenId == END_TURN;
    // One uniform draw per step keeps the stream aligned across settings.
    let u: f64 = rng.random();
    if temperature < GREEDY_BELOW {
        let mut best = END_TURN as usize;
        for (i, z) in logits.iter().enumerate() {
            if allowed(i) && z.f64() > logits[best].f64() {
                best = i;
            }
        }
        return best as TokenId;
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, z)| if allowed(i) { z.f64() / temperature } else { f64::NEG_INFINITY })
        .collect();
    softmax_inplace(&mut probs);
    let cands = nucleus(&probs, top_p);
    let mut acc = 0.0;
    for &(i, p) in &cands {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    cands.last().map_or(END_TURN, |&(i, _)| i as TokenId)
}

/// Key/value-cached incremental forward pass.
#[derive(Clone)]
pub struct Decoder<'a, F> {
    params: &'a ModelParams<F>,
    injection: Option<SteerInjection<F>>,
    tokens: Vec<TokenId>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    /// Final block output of the last fed token, without a final-layer injection.
    last: Option<Vec<F>>,
}

impl<'a, F: Scalar> Decoder<'a, F> {
    pub fn new(params: &'a ModelParams<F>, injection: Option<SteerInjection<F>>) -> Result<Self> {
        if let Some(inj) = &injection {
            inj.check(params.config.d_model)?;
        }
        let n = params.config.n_layers;
        Ok(Decoder {
            params,
            injection,
            tokens: Vec::new(),
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            last: None,
        })
    }

    pub fn params(&self) -> &'a ModelParams<F> {
        self.params
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn is_full(&self) -> bool {
        self.tokens.len() >= self.params.config.context_len
    }

    fn tap_is_final(&self) -> bool {
        self.params.config.tap() == self.params.config.n_layers
    }

    /// A decoder over the same tokens with a different injection. With the
    /// tap at the final block the cache does not depend on the injection
    /// and is shared; otherwise the prefix is recomputed.
    pub fn fork(&self, injection: Option<SteerInjection<F>>) -> Result<Decoder<'a, F>> {
        if self.tap_is_final() {
            if let Some(inj) = &injection {
                inj.check(self.params.config.d_model)?;
            }
            let mut d = self.clone();
            d.injection = injection;
            return Ok(d);
        }
        let mut d = Decoder::new(self.params, injection)?;
        d.feed(&self.tokens)?;
        Ok(d)
    }

    pub fn feed(&mut self, tokens: &[TokenId]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.step(t))
    }

    pub fn step(&mut self, token: TokenId) -> Result<()> {
        let p = self.params;
        let cfg = &p.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Invalid(format!(
                "token id {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let pos = self.tokens.len();
        if pos >= cfg.context_len {
            return Err(Error::Invalid(format!(
                "decoder is full at the context length {}",
                cfg.context_len
            )));
        }
        let (d, ff, heads) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let tap = cfg.tap();
        let mut x = embed(p, &[token], pos);
        let mut a = vec![F::zero(); d];
        let mut scratch = vec![F::zero(); d];
        let mut xhat = vec![F::zero(); d];
        let mut rstd = [F::zero()];
        let mut q = vec![F::zero(); d];
        let mut kv = vec![F::zero(); d];
        let mut att = vec![F::zero(); d];
        let mut h = vec![F::zero(); ff];
        let n = pos + 1;
        let mut scores = vec![F::zero(); n];
        for (l, b) in p.layout.blocks.iter().enumerate() {
            layernorm(&x, p.get(&b.ln1_g), p.get(&b.ln1_b), &mut a, &mut xhat, &mut rstd, d);
            matmul(&a, p.get(&b.wq), &mut q, 1, d, d);
            matmul(&a, p.get(&b.wk), &mut kv, 1, d, d);
            self.keys[l].extend_from_slice(&kv);
            matmul(&a, p.get(&b.wv), &mut kv, 1, d, d);
            self.values[l].extend_from_slice(&kv);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            att.iter_mut().for_each(|v| *v = F::zero());
            for hd in 0..heads {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + off..j * d + off + dh];
                    *s = qh.iter().zip(kj).map(|(&x, &y)| x * y).sum::<F>() * scale;
                }
                softmax_inplace(&mut scores);
                for (j, &pj) in scores.iter().enumerate() {
                    let vj = &values[j * d + off..j * d + off + dh];
                    for (o, &vv) in att[off..off + dh].iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
            matmul(&att, p.get(&b.wo), &mut scratch, 1, d, d);
            for (xv, &s) in x.iter_mut().zip(&scratch) {
                *xv += s;
            }
            layernorm(&x, p.get(&b.ln2_g), p.get(&b.ln2_b), &mut a, &mut xhat, &mut rstd, d);
            matmul(&a, p.get(&b.w1), &mut h, 1, d, ff);
            for (hv, &bias) in h.iter_mut().zip(p.get(&b.b1)) {
                *hv = gelu(*hv + bias);
            }
            matmul(&h, p.get(&b.w2), &mut scratch, 1, ff, d);
            for ((xv, &s), &bias) in x.iter_mut().zip(&scratch).zip(p.get(&b.b2)) {
                *xv += s + bias;
            }
            if l + 1 == tap && tap < cfg.n_layers {
                if let Some(inj) = &self.injection {
                    inject(&mut x, inj, d);
                }
            }
        }
        self.tokens.push(token);
        self.last = Some(x);
        Ok(())
    }

    /// Next-token logits after the last fed token.
    pub fn logits(&self) -> Result<Vec<F>> {
        let p = self.params;
        let (d, vocab) = (p.config.d_model, p.config.vocab_size);
        let mut x = self
            .last
            .clone()
            .ok_or_else(|| Error::Invalid("decoder has no tokens".into()))?;
        if self.tap_is_final() {
            if let Some(inj) = &self.injection {
                inject(&mut x, inj, d);
            }
        }
        let mut y = vec![F::zero(); d];
        let mut xhat = vec![F::zero(); d];
        let mut rstd = [F::zero()];
        layernorm(&x, p.get(&p.layout.lnf_g), p.get(&p.layout.lnf_b), &mut y, &mut xhat, &mut rstd, d);
        let mut logits = vec![F::zero(); vocab];
        matmul(&y, p.get(&p.layout.w_out), &mut logits, 1, d, vocab);
        Ok(logits)
    }

    /// Sample until END_TURN, `max_new` tokens, or the context is full.
    /// END_TURN itself is not returned.
    pub fn sample<R: Rng>(&mut self, cfg: &SamplingConfig, rng: &mut R) -> Result<Vec<TokenId>> {
        cfg.validate()?;
        let mut out = Vec::new();
        while out.len() < cfg.max_new {
            let next = sample_next(&self.logits()?, cfg.temperature, cfg.top_p, rng);
            if next == END_TURN {
                break;
            }
            out.push(next);
            if self.is_full() {
                break;
            }
            self.step(next)?;
        }
        Ok(out)
    }
}

/// Sample one utterance continuing `prompt`, deterministic in `seed`.
pub fn sample_utterance<F: Scalar>(
    params: &ModelParams<F>,
    prompt: &[TokenId],
    injection: Option<&SteerInjection<F>>,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Invalid("cannot sample from an empty prompt".into()));
    }
    let mut dec = Decoder::new(params, injection.cloned())?;
    dec.feed(prompt)?;
    dec.sample(cfg, &mut seed::rng(seed))
}
