use std::ops::Range;

use super::ops::{
    attention, attention_backward, gelu, gelu_grad, layernorm, layernorm_backward, logsumexp,
    matmul, matmul_at_acc, matmul_bt,
};
use super::params::{GradBundle, ModelParams};
use super::{Scalar, SteerInjection};
use crate::error::{Error, Result};
use crate::textcodec::TokenId;

/// Per-position weighted next-token loss: row `t` of the logits is scored
/// against `targets[t]` with weight `weights[t]` (zero weight = ignored).
/// The loss value is `sum_t weights[t] * -log p(targets[t] | prefix)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLoss<F> {
    pub targets: Vec<TokenId>,
    pub weights: Vec<F>,
}

impl<F: Scalar> TokenLoss<F> {
    /// Mean NLL over the mask-true positions of a rendered sequence. Token
    /// `t` is predicted from row `t - 1`, so `mask[0]` must be false.
    pub fn mean_over_mask(tokens: &[TokenId], mask: &[bool]) -> Result<Self> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Invalid("target mask has no true position".into()));
        }
        if mask.first() == Some(&true) {
            return Err(Error::Invalid("the first token has no prefix to predict it from".into()));
        }
        let w = F::one() / F::of(count as f64);
        let mut loss = Self::empty(tokens.len());
        for t in 1..tokens.len() {
            if mask[t] {
                loss.targets[t - 1] = tokens[t];
                loss.weights[t - 1] = w;
            }
        }
        Ok(loss)
    }

    /// Summed NLL of the tokens in `span` (the negated sequence
    /// log-likelihood of that span given everything before it).
    pub fn sum_over_span(tokens: &[TokenId], span: Range<usize>) -> Result<Self> {
        if span.is_empty() || span.start == 0 || span.end > tokens.len() {
            return Err(Error::Invalid(format!(
                "span {span:?} is not scorable in a sequence of {}",
                tokens.len()
            )));
        }
        let mut loss = Self::empty(tokens.len());
        for t in span {
            loss.targets[t - 1] = tokens[t];
            loss.weights[t - 1] = F::one();
        }
        Ok(loss)
    }

    pub fn empty(len: usize) -> Self {
        TokenLoss {
            targets: vec![0; len],
            weights: vec![F::zero(); len],
        }
    }

    /// First row with non-zero weight.
    pub fn first_row(&self) -> usize {
        self.weights
            .iter()
            .position(|w| *w != F::zero())
            .unwrap_or(self.weights.len())
    }

    pub fn scaled(&self, by: F) -> Self {
        TokenLoss {
            targets: self.targets.clone(),
            weights: self.weights.iter().map(|&w| w * by).collect(),
        }
    }
}

/// Mean negative log-likelihood of `targets[t]` under `logits` row `t`
/// over the mask-true rows.
pub fn nll_masked<F: Scalar>(
    logits: &[F],
    vocab: usize,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<F> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Invalid("target mask has no true position".into()));
    }
    let mut total = F::zero();
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let row = &logits[t * vocab..(t + 1) * vocab];
        total += logsumexp(row) - row[targets[t] as usize];
    }
    Ok(total / F::of(count as f64))
}

/// Which gradients [`backward`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Wrt {
    pub params: bool,
    pub direction: bool,
    pub strength: bool,
}

impl Wrt {
    pub const PARAMS: Wrt = Wrt {
        params: true,
        direction: false,
        strength: false,
    };
    pub const STEER: Wrt = Wrt {
        params: false,
        direction: true,
        strength: true,
    };
    pub const ALL: Wrt = Wrt {
        params: true,
        direction: true,
        strength: true,
    };
}

/// Output of [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<F> {
    /// `[positions, vocab]`.
    pub logits: Vec<F>,
    /// Residual stream after the tap block, before any injection, `[positions, d_model]`.
    pub tapped: Vec<F>,
}

struct BlockCache<F> {
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    a1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    att: Vec<F>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    a2: Vec<F>,
    h_pre: Vec<F>,
    h_act: Vec<F>,
}

struct HeadCache<F> {
    rows: Range<usize>,
    xhat: Vec<F>,
    rstd: Vec<F>,
    y: Vec<F>,
    logits: Vec<F>,
}

struct Trace<F> {
    first_block: usize,
    blocks: Vec<BlockCache<F>>,
    tapped: Option<Vec<F>>,
    head: HeadCache<F>,
}

fn check_tokens<F: Scalar>(p: &ModelParams<F>, tokens: &[TokenId]) -> Result<()> {
    if tokens.len() > p.config.context_len {
        return Err(Error::Invalid(format!(
            "sequence of {} tokens exceeds the context length {}",
            tokens.len(),
            p.config.context_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= p.config.vocab_size) {
        return Err(Error::Invalid(format!(
            "token id {bad} outside vocabulary of {}",
            p.config.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn embed<F: Scalar>(p: &ModelParams<F>, tokens: &[TokenId], start_pos: usize) -> Vec<F> {
    let d = p.config.d_model;
    let tok = p.get(&p.layout.tok_emb);
    let pos = p.get(&p.layout.pos_emb);
    let mut x = vec![F::zero(); tokens.len() * d];
    for (i, &t) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        let e = &tok[t as usize * d..(t as usize + 1) * d];
        let pe = &pos[(start_pos + i) * d..(start_pos + i + 1) * d];
        for c in 0..d {
            row[c] = e[c] + pe[c];
        }
    }
    x
}

pub(crate) fn inject<F: Scalar>(x: &mut [F], inj: &SteerInjection<F>, d: usize) {
    if inj.strength == F::zero() {
        return;
    }
    for row in x.chunks_exact_mut(d) {
        for (v, &dir) in row.iter_mut().zip(&inj.direction) {
            *v += inj.strength * dir;
        }
    }
}

fn block_forward<F: Scalar>(p: &ModelParams<F>, l: usize, x: &mut [F], t: usize) -> BlockCache<F> {
    let cfg = &p.config;
    let (d, ff, heads) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
    let b = &p.layout.blocks[l];
    let zeros = |n: usize| vec![F::zero(); n];

    let mut c = BlockCache {
        xhat1: zeros(t * d),
        rstd1: zeros(t),
        a1: zeros(t * d),
        q: zeros(t * d),
        k: zeros(t * d),
        v: zeros(t * d),
        probs: zeros(heads * t * t),
        att: zeros(t * d),
        xhat2: zeros(t * d),
        rstd2: zeros(t),
        a2: zeros(t * d),
        h_pre: zeros(t * ff),
        h_act: zeros(t * ff),
    };
    layernorm(x, p.get(&b.ln1_g), p.get(&b.ln1_b), &mut c.a1, &mut c.xhat1, &mut c.rstd1, d);
    matmul(&c.a1, p.get(&b.wq), &mut c.q, t, d, d);
    matmul(&c.a1, p.get(&b.wk), &mut c.k, t, d, d);
    matmul(&c.a1, p.get(&b.wv), &mut c.v, t, d, d);
    attention(&c.q, &c.k, &c.v, &mut c.probs, &mut c.att, t, d, heads);
    let mut proj = zeros(t * d);
    matmul(&c.att, p.get(&b.wo), &mut proj, t, d, d);
    for (xv, pv) in x.iter_mut().zip(&proj) {
        *xv += *pv;
    }

    layernorm(x, p.get(&b.ln2_g), p.get(&b.ln2_b), &mut c.a2, &mut c.xhat2, &mut c.rstd2, d);
    matmul(&c.a2, p.get(&b.w1), &mut c.h_pre, t, d, ff);
    let b1 = p.get(&b.b1);
    for row in c.h_pre.chunks_exact_mut(ff) {
        for (h, &bias) in row.iter_mut().zip(b1) {
            *h += bias;
        }
    }
    for (a, &h) in c.h_act.iter_mut().zip(&c.h_pre) {
        *a = gelu(h);
    }
    matmul(&c.h_act, p.get(&b.w2), &mut proj, t, ff, d);
    let b2 = p.get(&b.b2);
    for (r, row) in x.chunks_exact_mut(d).enumerate() {
        for cix in 0..d {
            row[cix] += proj[r * d + cix] + b2[cix];
        }
    }
    c
}

/// Backward through block `l`. On entry `dx` is the gradient with respect
/// to the block output; on exit, with respect to the block input.
fn block_backward<F: Scalar>(
    p: &ModelParams<F>,
    l: usize,
    c: &BlockCache<F>,
    dx: &mut [F],
    t: usize,
    mut grads: Option<&mut [F]>,
) {
    let cfg = &p.config;
    let (d, ff, heads) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
    let b = &p.layout.blocks[l];
    let zeros = |n: usize| vec![F::zero(); n];

    // Feed-forward branch.
    let mut dh = zeros(t * ff);
    matmul_bt(dx, p.get(&b.w2), &mut dh, t, ff, d);
    if let Some(g) = grads.as_deref_mut() {
        matmul_at_acc(&c.h_act, dx, &mut g[b.w2.clone()], t, ff, d);
        let db2 = &mut g[b.b2.clone()];
        for row in dx.chunks_exact(d) {
            for (acc, &v) in db2.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    for (g, &h) in dh.iter_mut().zip(&c.h_pre) {
        *g *= gelu_grad(h);
    }
    if let Some(g) = grads.as_deref_mut() {
        matmul_at_acc(&c.a2, &dh, &mut g[b.w1.clone()], t, d, ff);
        let db1 = &mut g[b.b1.clone()];
        for row in dh.chunks_exact(ff) {
            for (acc, &v) in db1.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let mut da2 = zeros(t * d);
    matmul_bt(&dh, p.get(&b.w1), &mut da2, t, d, ff);
    let mut dln = zeros(t * d);
    match grads.as_deref_mut() {
        Some(g) => {
            let (lo, hi) = g.split_at_mut(b.ln2_b.start);
            layernorm_backward(
                &da2,
                &c.xhat2,
                &c.rstd2,
                p.get(&b.ln2_g),
                &mut dln,
                Some(&mut lo[b.ln2_g.clone()]),
                Some(&mut hi[..d]),
                d,
            );
        }
        None => layernorm_backward(&da2, &c.xhat2, &c.rstd2, p.get(&b.ln2_g), &mut dln, None, None, d),
    }
    for (a, &v) in dx.iter_mut().zip(&dln) {
        *a += v;
    }

    // Attention branch.
    let mut datt = zeros(t * d);
    matmul_bt(dx, p.get(&b.wo), &mut datt, t, d, d);
    if let Some(g) = grads.as_deref_mut() {
        matmul_at_acc(&c.att, dx, &mut g[b.wo.clone()], t, d, d);
    }
    let (mut dq, mut dk, mut dv) = (zeros(t * d), zeros(t * d), zeros(t * d));
    attention_backward(&datt, &c.q, &c.k, &c.v, &c.probs, &mut dq, &mut dk, &mut dv, t, d, heads);
    if let Some(g) = grads.as_deref_mut() {
        matmul_at_acc(&c.a1, &dq, &mut g[b.wq.clone()], t, d, d);
        matmul_at_acc(&c.a1, &dk, &mut g[b.wk.clone()], t, d, d);
        matmul_at_acc(&c.a1, &dv, &mut g[b.wv.clone()], t, d, d);
    }
    let mut da1 = zeros(t * d);
    let mut tmp = zeros(t * d);
    for (dm, w) in [(&dq, &b.wq), (&dk, &b.wk), (&dv, &b.wv)] {
        matmul_bt(dm, p.get(w), &mut tmp, t, d, d);
        for (a, &v) in da1.iter_mut().zip(&tmp) {
            *a += v;
        }
    }
    match grads {
        Some(g) => {
            let (lo, hi) = g.split_at_mut(b.ln1_b.start);
            layernorm_backward(
                &da1,
                &c.xhat1,
                &c.rstd1,
                p.get(&b.ln1_g),
                &mut dln,
                Some(&mut lo[b.ln1_g.clone()]),
                Some(&mut hi[..d]),
                d,
            );
        }
        None => layernorm_backward(&da1, &c.xhat1, &c.rstd1, p.get(&b.ln1_g), &mut dln, None, None, d),
    }
    for (a, &v) in dx.iter_mut().zip(&dln) {
        *a += v;
    }
}

fn head_forward<F: Scalar>(p: &ModelParams<F>, x: &[F], rows: Range<usize>) -> HeadCache<F> {
    let (d, vocab) = (p.config.d_model, p.config.vocab_size);
    let n = rows.len();
    let mut h = HeadCache {
        rows: rows.clone(),
        xhat: vec![F::zero(); n * d],
        rstd: vec![F::zero(); n],
        y: vec![F::zero(); n * d],
        logits: vec![F::zero(); n * vocab],
    };
    layernorm(
        &x[rows.start * d..rows.end * d],
        p.get(&p.layout.lnf_g),
        p.get(&p.layout.lnf_b),
        &mut h.y,
        &mut h.xhat,
        &mut h.rstd,
        d,
    );
    matmul(&h.y, p.get(&p.layout.w_out), &mut h.logits, n, d, vocab);
    h
}

/// Returns the gradient with respect to the head input over all `t` rows.
fn head_backward<F: Scalar>(
    p: &ModelParams<F>,
    h: &HeadCache<F>,
    dlogits: &[F],
    t: usize,
    grads: Option<&mut [F]>,
) -> Vec<F> {
    let (d, vocab) = (p.config.d_model, p.config.vocab_size);
    let n = h.rows.len();
    let mut dy = vec![F::zero(); n * d];
    matmul_bt(dlogits, p.get(&p.layout.w_out), &mut dy, n, d, vocab);
    let mut dx = vec![F::zero(); t * d];
    let dx_rows = &mut dx[h.rows.start * d..h.rows.end * d];
    match grads {
        Some(g) => {
            matmul_at_acc(&h.y, dlogits, &mut g[p.layout.w_out.clone()], n, d, vocab);
            let (lo, hi) = g.split_at_mut(p.layout.lnf_b.start);
            layernorm_backward(
                &dy,
                &h.xhat,
                &h.rstd,
                p.get(&p.layout.lnf_g),
                dx_rows,
                Some(&mut lo[p.layout.lnf_g.clone()]),
                Some(&mut hi[..d]),
                d,
            );
        }
        None => layernorm_backward(&dy, &h.xhat, &h.rstd, p.get(&p.layout.lnf_g), dx_rows, None, None, d),
    }
    dx
}

/// Run blocks `first_block..n_layers` and the head on `x` (`[t, d]`).
/// The injection is applied right after block `tap` (1-based); when
/// `first_block == tap`, `x` is itself the tapped activation.
fn run_from<F: Scalar>(
    p: &ModelParams<F>,
    mut x: Vec<F>,
    first_block: usize,
    injection: Option<&SteerInjection<F>>,
    head_rows: Range<usize>,
    keep_tap: bool,
) -> Trace<F> {
    let d = p.config.d_model;
    let t = x.len() / d;
    let tap = p.config.tap();
    let mut tapped = None;
    let mut at_tap = |x: &mut Vec<F>| {
        if keep_tap {
            tapped = Some(x.clone());
        }
        if let Some(inj) = injection {
            inject(x, inj, d);
        }
    };
    if first_block == tap {
        at_tap(&mut x);
    }
    let mut blocks = Vec::with_capacity(p.config.n_layers - first_block);
    for l in first_block..p.config.n_layers {
        blocks.push(block_forward(p, l, &mut x, t));
        if l + 1 == tap {
            at_tap(&mut x);
        }
    }
    let head = head_forward(p, &x, head_rows);
    Trace {
        first_block,
        blocks,
        tapped,
        head,
    }
}

/// Weighted loss over the head rows and its gradient with respect to them.
fn loss_and_grad<F: Scalar>(head: &HeadCache<F>, loss: &TokenLoss<F>, vocab: usize) -> (F, Vec<F>) {
    let mut total = F::zero();
    let mut dlogits = vec![F::zero(); head.logits.len()];
    for (i, r) in head.rows.clone().enumerate() {
        let w = loss.weights[r];
        if w == F::zero() {
            continue;
        }
        let row = &head.logits[i * vocab..(i + 1) * vocab];
        let lse = logsumexp(row);
        let target = loss.targets[r] as usize;
        total += w * (lse - row[target]);
        let drow = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (g, &z) in drow.iter_mut().zip(row) {
            *g = w * (z - lse).exp();
        }
        drow[target] -= w;
    }
    (total, dlogits)
}

fn check_loss<F: Scalar>(loss: &TokenLoss<F>, t: usize) -> Result<()> {
    if loss.targets.len() != t || loss.weights.len() != t {
        return Err(Error::Invalid(format!(
            "loss covers {} positions, sequence has {t}",
            loss.targets.len()
        )));
    }
    Ok(())
}

/// Logits for every position plus the tapped activation.
pub fn forward<F: Scalar>(
    p: &ModelParams<F>,
    tokens: &[TokenId],
    injection: Option<&SteerInjection<F>>,
) -> Result<Forward<F>> {
    check_tokens(p, tokens)?;
    if let Some(inj) = injection {
        inj.check(p.config.d_model)?;
    }
    let x = embed(p, tokens, 0);
    let trace = run_from(p, x, 0, injection, 0..tokens.len(), true);
    Ok(Forward {
        logits: trace.head.logits,
        tapped: trace.tapped.expect("tap layer is within the model"),
    })
}

/// Residual stream after the tap block, `[positions, d_model]`.
pub fn forward_to_tap<F: Scalar>(p: &ModelParams<F>, tokens: &[TokenId]) -> Result<Vec<F>> {
    check_tokens(p, tokens)?;
    let d = p.config.d_model;
    let t = tokens.len();
    let mut x = embed(p, tokens, 0);
    for l in 0..p.config.tap() {
        block_forward(p, l, &mut x, t);
    }
    debug_assert_eq!(x.len(), t * d);
    Ok(x)
}

/// Continue a forward pass from a tapped activation: apply the injection,
/// run the remaining blocks, and return logits for rows `head_from..`.
pub fn resume_from_tap<F: Scalar>(
    p: &ModelParams<F>,
    tapped: &[F],
    injection: Option<&SteerInjection<F>>,
    head_from: usize,
) -> Result<Vec<F>> {
    if let Some(inj) = injection {
        inj.check(p.config.d_model)?;
    }
    let t = tapped.len() / p.config.d_model;
    let trace = run_from(p, tapped.to_vec(), p.config.tap(), injection, head_from..t, false);
    Ok(trace.head.logits)
}

/// Exact gradients of the weighted token loss. Returns the loss value and
/// the requested gradients. When parameters are not requested, backprop
/// stops at the tap layer.
pub fn backward<F: Scalar>(
    p: &ModelParams<F>,
    tokens: &[TokenId],
    loss: &TokenLoss<F>,
    injection: Option<&SteerInjection<F>>,
    wrt: Wrt,
) -> Result<(F, GradBundle<F>)> {
    check_tokens(p, tokens)?;
    check_loss(loss, tokens.len())?;
    if let Some(inj) = injection {
        inj.check(p.config.d_model)?;
    }
    let x = embed(p, tokens, 0);
    let head_from = if p.config.tap() == p.config.n_layers && !wrt.params {
        loss.first_row()
    } else {
        0
    };
    let trace = run_from(p, x, 0, injection, head_from..tokens.len(), false);
    backward_trace(p, tokens, &trace, loss, injection, wrt)
}

/// Backward restricted to the blocks after the tap, starting from a cached
/// tapped activation. Returns the loss and gradients with respect to the
/// injection direction and strength.
pub fn backward_from_tap<F: Scalar>(
    p: &ModelParams<F>,
    tapped: &[F],
    loss: &TokenLoss<F>,
    injection: &SteerInjection<F>,
) -> Result<(F, GradBundle<F>)> {
    injection.check(p.config.d_model)?;
    let t = tapped.len() / p.config.d_model;
    check_loss(loss, t)?;
    let head_from = if p.config.tap() == p.config.n_layers {
        loss.first_row()
    } else {
        0
    };
    let trace = run_from(p, tapped.to_vec(), p.config.tap(), Some(injection), head_from..t, false);
    backward_trace(p, &[], &trace, loss, Some(injection), Wrt::STEER)
}

fn backward_trace<F: Scalar>(
    p: &ModelParams<F>,
    tokens: &[TokenId],
    trace: &Trace<F>,
    loss: &TokenLoss<F>,
    injection: Option<&SteerInjection<F>>,
    wrt: Wrt,
) -> Result<(F, GradBundle<F>)> {
    let cfg = &p.config;
    let d = cfg.d_model;
    let t = loss.targets.len();
    let tap = cfg.tap();
    let (value, dlogits) = loss_and_grad(&trace.head, loss, cfg.vocab_size);

    let mut grads = wrt.params.then(|| vec![F::zero(); p.layout.total]);
    let mut dx = head_backward(p, &trace.head, &dlogits, t, grads.as_deref_mut());
    let mut tap_grad: Option<Vec<F>> = None;
    let capture = |dx: &[F]| {
        let mut sum = vec![F::zero(); d];
        for row in dx.chunks_exact(d) {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        sum
    };
    for (i, cache) in trace.blocks.iter().enumerate().rev() {
        let l = trace.first_block + i;
        if l + 1 == tap {
            tap_grad = Some(capture(&dx));
            if !wrt.params {
                break;
            }
        }
        block_backward(p, l, cache, &mut dx, t, grads.as_deref_mut());
    }
    if trace.first_block == tap {
        tap_grad = Some(capture(&dx));
    }
    if let Some(g) = grads.as_deref_mut() {
        let tok = p.layout.tok_emb.clone();
        let pos = p.layout.pos_emb.clone();
        for (i, &token) in tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            for c in 0..d {
                g[tok.start + token as usize * d + c] += row[c];
                g[pos.start + i * d + c] += row[c];
            }
        }
    }

    let tap_grad = tap_grad.unwrap_or_else(|| vec![F::zero(); d]);
    let direction = wrt.direction.then(|| {
        let s = injection.map_or(F::zero(), |inj| inj.strength);
        tap_grad.iter().map(|&g| s * g).collect()
    });
    let strength = wrt.strength.then(|| match injection {
        Some(inj) => inj.direction.iter().zip(&tap_grad).map(|(&v, &g)| v * g).sum(),
        None => F::zero(),
    });
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", value.f64())));
    }
    Ok((
        value,
        GradBundle {
            params: grads,
            direction,
            strength,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{ModelConfig, Precision};
    use rand::Rng;

    pub(crate) fn tiny_cfg(tap_layer: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            context_len: 40,
            vocab_size: 23,
            tap_layer,
            precision: Precision::Check,
        }
    }

    fn tiny(tap_layer: usize) -> ModelParams<f64> {
        let mut p = ModelParams::<f64>::init(&tiny_cfg(tap_layer), 1).unwrap();
        // Larger weights make gradients non-trivial everywhere.
        p.jitter(&mut crate::seed::rng(2), 0.2);
        p
    }

    fn tokens(n: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = crate::seed::rng(seed);
        (0..n).map(|_| rng.random_range(0..23)).collect()
    }

    fn random_dir(seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed);
        (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_injection_is_identity() {
        let p = tiny(0);
        let toks = tokens(12, 3);
        let base = forward(&p, &toks, None).unwrap();
        let zero_strength = SteerInjection::new(random_dir(4), 0.0);
        let zero_dir = SteerInjection::new(vec![0.0; 16], 2.5);
        assert_eq!(forward(&p, &toks, Some(&zero_strength)).unwrap().logits, base.logits);
        assert_eq!(forward(&p, &toks, Some(&zero_dir)).unwrap().logits, base.logits);
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = tiny(0).cast::<f32>();
        let toks = tokens(10, 5);
        let out = forward(&p, &toks, None).unwrap();
        for row in out.logits.chunks_exact(23) {
            let lse = logsumexp(row);
            let s: f32 = row.iter().map(|&z| (z - lse).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn steering_equals_two_pass_offset() {
        for tap in [1, 2] {
            let p = tiny(tap);
            let toks = tokens(14, 6);
            let inj = SteerInjection::new(random_dir(7), 0.8);
            let one_pass = forward(&p, &toks, Some(&inj)).unwrap();
            let tapped = forward_to_tap(&p, &toks).unwrap();
            assert_eq!(tapped, one_pass.tapped);
            let two_pass = resume_from_tap(&p, &tapped, Some(&inj), 0).unwrap();
            for (a, b) in one_pass.logits.iter().zip(&two_pass) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strength_folds_into_direction() {
        let p = tiny(1).cast::<f32>();
        let toks = tokens(9, 8);
        let dir: Vec<f32> = random_dir(9).iter().map(|&x| x as f32).collect();
        let s = 0.7f32;
        let a = forward(&p, &toks, Some(&SteerInjection::new(dir.clone(), s))).unwrap();
        let folded: Vec<f32> = dir.iter().map(|&v| s * v).collect();
        let b = forward(&p, &toks, Some(&SteerInjection::new(folded, 1.0))).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() <= 4.0 * f32::EPSILON * x.abs().max(1.0));
        }
    }

    #[test]
    fn nll_examples() {
        // Uniform logits: every target costs ln V.
        let logits = vec![0.5f64; 3 * 7];
        let v = nll_masked(&logits, 7, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-12);
        // Confident logits: near zero.
        let mut logits = vec![0.0f64; 2 * 4];
        logits[2] = 50.0;
        logits[4 + 1] = 50.0;
        assert!(nll_masked(&logits, 4, &[2, 1], &[true, true]).unwrap() < 1e-12);
        // Two positions: the mean of the two token NLLs.
        let logits = vec![1.0f64, 2.0, 0.0, 3.0];
        let a = (1f64.exp() + 2f64.exp()).ln() - 1.0;
        let b = (1.0 + 3f64.exp()).ln() - 3.0;
        let v = nll_masked(&logits, 2, &[0, 1], &[true, true]).unwrap();
        assert!((v - (a + b) / 2.0).abs() < 1e-12);
        assert!(nll_masked(&logits, 2, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn backward_loss_matches_nll_masked() {
        let p = tiny(0);
        let toks = tokens(10, 10);
        let mask: Vec<bool> = (0..10).map(|i| i >= 6).collect();
        let loss = TokenLoss::mean_over_mask(&toks, &mask).unwrap();
        let (value, _) = backward(&p, &toks, &loss, None, Wrt::PARAMS).unwrap();
        let fwd = forward(&p, &toks, None).unwrap();
        let shifted_mask: Vec<bool> = (0..10).map(|i| i + 1 < 10 && mask[i + 1]).collect();
        let direct = nll_masked(&fwd.logits, 23, &loss.targets, &shifted_mask).unwrap();
        assert!((value - direct).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let p = tiny(0);
        assert!(forward(&p, &[1, 2, 23], None).is_err());
        let long = tokens(41, 1);
        assert!(forward(&p, &long, None).is_err());
    }

    #[test]
    fn gradients_scale_linearly() {
        let p = tiny(1);
        let toks = tokens(11, 12);
        let loss = TokenLoss::sum_over_span(&toks, 5..11).unwrap();
        let inj = SteerInjection::new(random_dir(13), 0.4);
        let (_, g1) = backward(&p, &toks, &loss, Some(&inj), Wrt::ALL).unwrap();
        let (_, g2) = backward(&p, &toks, &loss.scaled(2.0), Some(&inj), Wrt::ALL).unwrap();
        let mut doubled = g1.clone();
        doubled.scale(2.0);
        assert_eq!(g2, doubled);
    }

    #[test]
    fn gradient_of_combined_losses_is_combined_gradient() {
        let p = tiny(0);
        let toks = tokens(11, 14);
        let l1 = TokenLoss::sum_over_span(&toks, 3..6).unwrap();
        let l2 = TokenLoss::sum_over_span(&toks, 6..11).unwrap();
        let (a, b) = (0.3, -1.7);
        let mut combined = TokenLoss::empty(11);
        for t in 0..11 {
            combined.targets[t] = toks.get(t + 1).copied().unwrap_or(0);
            combined.weights[t] = a * l1.weights[t] + b * l2.weights[t];
        }
        let g = |l: &TokenLoss<f64>| backward(&p, &toks, l, None, Wrt::PARAMS).unwrap().1.params.unwrap();
        let (g1, g2, gc) = (g(&l1), g(&l2), g(&combined));
        for i in 0..gc.len() {
            assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn direction_gradient_at_unit_strength_is_tap_gradient() {
        let p = tiny(0);
        let toks = tokens(12, 15);
        let loss = TokenLoss::sum_over_span(&toks, 7..12).unwrap();
        // Strength 1, zero direction: the offset is zero, so the direction
        // gradient is the summed loss gradient at the tapped activation.
        let inj = SteerInjection::new(vec![0.0; 16], 1.0);
        let (_, g) = backward(&p, &toks, &loss, Some(&inj), Wrt::STEER).unwrap();
        let dir = g.direction.unwrap();
        // Independent route: finite differences of the loss under a uniform
        // offset along each basis vector.
        let h = 1e-5;
        for c in 0..16 {
            let mut e = vec![0.0; 16];
            e[c] = h;
            let plus = SteerInjection::new(e.clone(), 1.0);
            e[c] = -h;
            let minus = SteerInjection::new(e, 1.0);
            let f = |inj: &SteerInjection<f64>| backward(&p, &toks, &loss, Some(inj), Wrt::default()).unwrap().0;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - dir[c]).abs() < 1e-6 * fd.abs().max(1.0), "coord {c}: {fd} vs {}", dir[c]);
        }
        // With strength 0 the direction has no effect at all.
        let off = SteerInjection::new(random_dir(3), 0.0);
        let (_, g0) = backward(&p, &toks, &loss, Some(&off), Wrt::STEER).unwrap();
        assert!(g0.direction.unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn restricted_backward_matches_full() {
        for tap in [1, 2] {
            let p = tiny(tap);
            let toks = tokens(13, 16);
            let loss = TokenLoss::sum_over_span(&toks, 8..13).unwrap();
            let inj = SteerInjection::new(random_dir(17), 0.6);
            let (v_full, g_full) = backward(&p, &toks, &loss, Some(&inj), Wrt::ALL).unwrap();
            let (v_steer, g_steer) = backward(&p, &toks, &loss, Some(&inj), Wrt::STEER).unwrap();
            let tapped = forward_to_tap(&p, &toks).unwrap();
            let (v_tap, g_tap) = backward_from_tap(&p, &tapped, &loss, &inj).unwrap();
            for (v, g) in [(v_steer, &g_steer), (v_tap, &g_tap)] {
                assert!((v - v_full).abs() < 1e-12);
                let (a, b) = (g.strength.unwrap(), g_full.strength.unwrap());
                assert!((a - b).abs() < 1e-12, "tap {tap}: {a} vs {b}");
                for (a, b) in g.direction.as_ref().unwrap().iter().zip(g_full.direction.as_ref().unwrap()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
