//! A shared steering direction `v` with positive per-tutor coefficients
//! `delta_i`, learned from preference pairs with the base model frozen.
//!
//! For a pair of tutor `i` the margin is
//! `beta * [(log p(c | A + delta_i v) - log p(c | A)) - (log p(r | A + delta_i v) - log p(r | A))]`
//! with summed sequence log-likelihoods, and the loss is the mean of
//! `-log sigmoid(margin)`.

mod artifact;

pub use artifact::{read_steering, steering_json, write_steering};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TutorId;
use crate::error::{Error, Result};
use crate::seed;
use crate::sftpair::PairExample;
use crate::textcodec::TokenId;
use crate::tinylm::{
    backward_from_tap, forward_to_tap, resume_from_tap, Adam, ModelParams, Scalar, SteerInjection,
    TokenLoss,
};

/// Per-tutor coefficients with unit mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector {
    pub delta: Vec<f64>,
}

/// `delta_i = exp(u_i) / mean_m exp(u_m)`, computed with `max(u)`
/// subtracted first so large `u` cannot overflow.
pub fn delta_from_u(u: &[f64]) -> DeltaVector {
    if u.is_empty() {
        return DeltaVector { delta: Vec::new() };
    }
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|&x| (x - max).exp()).collect();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    DeltaVector {
        delta: e.iter().map(|x| x / mean).collect(),
    }
}

/// Chain rule through [`delta_from_u`]:
/// `du_i = delta_i * (g_i - (1/I) sum_j g_j delta_j)`.
pub fn delta_vjp(delta: &[f64], g: &[f64]) -> Vec<f64> {
    let n = delta.len() as f64;
    let s: f64 = delta.iter().zip(g).map(|(d, g)| d * g).sum();
    delta.iter().zip(g).map(|(&d, &gi)| d * (gi - s / n)).collect()
}

/// `-log sigmoid(m)`, stable for large `|m|`.
pub fn neg_log_sigmoid(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairWeighting {
    /// Every pair counts equally.
    PerPair,
    /// Every tutor counts equally; pairs are averaged within a tutor first.
    PerTutor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerConfig {
    pub beta: f64,
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the relative loss improvement stays below this ...
    pub tol: f64,
    /// ... for this many consecutive steps.
    pub patience: usize,
    /// Abort as diverged after this many consecutive loss increases.
    pub diverge_after: usize,
    pub optimizer: Optimizer,
    /// Pairs per step; 0 means full batch.
    pub batch_size: usize,
    pub weighting: PairWeighting,
    /// Standard deviation of the Gaussian initialization of `v`.
    pub init_scale: f64,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            beta: 1.0,
            lr: 0.01,
            max_steps: 200,
            tol: 1e-4,
            patience: 5,
            diverge_after: 20,
            optimizer: Optimizer::Adam,
            batch_size: 0,
            weighting: PairWeighting::PerPair,
            init_scale: 0.5,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("steer: beta must be positive, got {}", self.beta)));
        }
        if !(self.lr > 0.0) || !(self.init_scale >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config(
                "steer: lr must be positive, init_scale and tol non-negative".into(),
            ));
        }
        if self.patience == 0 || self.diverge_after == 0 {
            return Err(Error::Config("steer: patience and diverge_after must be positive".into()));
        }
        Ok(())
    }
}

/// Learned steering parameters and their training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringState {
    /// Tutor order of `u`, ascending.
    pub tutor_ids: Vec<TutorId>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub beta: f64,
    pub seed: u64,
    /// Optimizer steps taken (T).
    pub steps: usize,
    /// Full-objective loss before each step, then after the last one.
    pub loss_history: Vec<f64>,
    pub diverged: bool,
}

impl SteeringState {
    pub fn delta(&self) -> DeltaVector {
        delta_from_u(&self.u)
    }

    pub fn index_of(&self, tutor: TutorId) -> Option<usize> {
        self.tutor_ids.binary_search(&tutor).ok()
    }

    pub fn delta_of(&self, tutor: TutorId) -> Option<f64> {
        self.index_of(tutor).map(|i| self.delta().delta[i])
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    /// Injection `alpha * delta_i * v` for `tutor`.
    pub fn injection<F: Scalar>(&self, tutor: TutorId, alpha: f64) -> Result<SteerInjection<F>> {
        let delta = self
            .delta_of(tutor)
            .ok_or_else(|| Error::Invalid(format!("tutor {tutor} has no steering coefficient")))?;
        Ok(SteerInjection::new(
            self.v.iter().map(|&x| F::of(x)).collect(),
            F::of(alpha * delta),
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.len() != self.tutor_ids.len() {
            return Err(Error::Invalid("steering state: u and tutor ids differ in length".into()));
        }
        if !self.v.iter().chain(&self.u).all(|x| x.is_finite()) {
            return Err(Error::Numeric("steering state has non-finite entries".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Invalid("steering state: beta must be positive".into()));
        }
        Ok(())
    }
}

struct Side<F> {
    tapped: Vec<F>,
    loss: TokenLoss<F>,
    /// Unsteered summed log-likelihood.
    base: f64,
}

struct CachedPair<F> {
    tutor: usize,
    weight: f64,
    chosen: Side<F>,
    rejected: Side<F>,
}

/// The pair objective with the frozen model's tapped activations and
/// unsteered log-likelihoods precomputed.
pub struct BipoObjective<'a, F> {
    params: &'a ModelParams<F>,
    pub tutor_ids: Vec<TutorId>,
    pub beta: f64,
    pairs: Vec<CachedPair<F>>,
    labels: Vec<(u32, usize)>,
}

/// Loss value, per-pair margins and optionally gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BipoEval {
    pub loss: f64,
    pub margins: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub grad_u: Vec<f64>,
}

fn side<F: Scalar>(params: &ModelParams<F>, context: &[TokenId], utterance: &[TokenId]) -> Result<Side<F>> {
    let mut tokens = context.to_vec();
    tokens.extend_from_slice(utterance);
    tokens.push(crate::textcodec::END_TURN);
    let span = context.len()..tokens.len();
    let mut loss = TokenLoss::sum_over_span(&tokens, span.clone())?;
    let mut tapped = forward_to_tap(params, &tokens)?;
    let cfg = &params.config;
    if cfg.tap() == cfg.n_layers {
        // Rows are independent past the last block: keep only the scored ones.
        let first = span.start - 1;
        tapped.drain(..first * cfg.d_model);
        loss.targets.drain(..first);
        loss.weights.drain(..first);
    }
    let logits = resume_from_tap(params, &tapped, None, 0)?;
    let base = -sequence_nll(&logits, &loss, cfg.vocab_size);
    Ok(Side { tapped, loss, base })
}

fn sequence_nll<F: Scalar>(logits: &[F], loss: &TokenLoss<F>, vocab: usize) -> f64 {
    let mut total = 0.0;
    for (t, &w) in loss.weights.iter().enumerate() {
        if w != F::zero() {
            let row = &logits[t * vocab..(t + 1) * vocab];
            let lse = crate::tinylm::ops::logsumexp(row);
            total += (w * (lse - row[loss.targets[t] as usize])).f64();
        }
    }
    total
}

impl<'a, F: Scalar> BipoObjective<'a, F> {
    pub fn new(
        params: &'a ModelParams<F>,
        pairs: &[PairExample],
        beta: f64,
        weighting: PairWeighting,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("no preference pairs".into()));
        }
        let mut tutor_ids: Vec<TutorId> = pairs.iter().map(|p| p.tutor_id).collect();
        tutor_ids.sort_unstable();
        tutor_ids.dedup();
        let mut counts: BTreeMap<TutorId, usize> = BTreeMap::new();
        for p in pairs {
            *counts.entry(p.tutor_id).or_default() += 1;
        }
        let built: Vec<Result<CachedPair<F>>> = pairs
            .par_iter()
            .map(|p| {
                p.validate()?;
                let weight = match weighting {
                    PairWeighting::PerPair => 1.0 / pairs.len() as f64,
                    PairWeighting::PerTutor => 1.0 / (tutor_ids.len() * counts[&p.tutor_id]) as f64,
                };
                Ok(CachedPair {
                    tutor: tutor_ids.binary_search(&p.tutor_id).expect("collected above"),
                    weight,
                    chosen: side(params, &p.context, &p.chosen)?,
                    rejected: side(params, &p.context, &p.rejected)?,
                })
            })
            .collect();
        Ok(BipoObjective {
            params,
            tutor_ids,
            beta,
            pairs: built.into_iter().collect::<Result<_>>()?,
            labels: pairs.iter().map(|p| (p.dialogue_id, p.k)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Cached unsteered log-likelihoods `(chosen, rejected)` of pair `i`.
    pub fn base_loglik(&self, i: usize) -> (f64, f64) {
        (self.pairs[i].chosen.base, self.pairs[i].rejected.base)
    }

    fn check(&self, v: &[f64], u: &[f64]) -> Result<()> {
        if v.len() != self.params.config.d_model || u.len() != self.tutor_ids.len() {
            return Err(Error::Invalid(format!(
                "expected v of length {} and u of length {}, got {} and {}",
                self.params.config.d_model,
                self.tutor_ids.len(),
                v.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// Evaluate over the pairs in `subset` (all pairs when `None`), with
    /// weights renormalized to the subset.
    pub fn eval(&self, v: &[f64], u: &[f64], subset: Option<&[usize]>, grads: bool) -> Result<BipoEval> {
        self.check(v, u)?;
        let all: Vec<usize>;
        let idx = match subset {
            Some(s) => s,
            None => {
                all = (0..self.pairs.len()).collect();
                &all
            }
        };
        let delta = delta_from_u(u).delta;
        let dir: Vec<F> = v.iter().map(|&x| F::of(x)).collect();
        let vocab = self.params.config.vocab_size;
        let d = v.len();
        let per_pair: Vec<Result<(f64, f64, Vec<f64>, f64)>> = idx
            .par_iter()
            .map(|&i| {
                let p = &self.pairs[i];
                let inj = SteerInjection::new(dir.clone(), F::of(delta[p.tutor]));
                // Returns the steered log-likelihood and its gradients.
                let run = |s: &Side<F>| -> Result<(f64, Vec<f64>, f64)> {
                    if grads {
                        let (nll, g) = backward_from_tap(self.params, &s.tapped, &s.loss, &inj)?;
                        let gd = g.direction.expect("requested").iter().map(|x| -x.f64()).collect();
                        Ok((-nll.f64(), gd, -g.strength.expect("requested").f64()))
                    } else {
                        let logits = resume_from_tap(self.params, &s.tapped, Some(&inj), 0)?;
                        Ok((-sequence_nll(&logits, &s.loss, vocab), Vec::new(), 0.0))
                    }
                };
                let (lc, gc, sc) = run(&p.chosen)?;
                let (lr, gr, sr) = run(&p.rejected)?;
                let m = self.beta * ((lc - p.chosen.base) - (lr - p.rejected.base));
                if !m.is_finite() {
                    let (dlg, k) = self.labels[i];
                    return Err(Error::Numeric(format!(
                        "non-finite margin for the pair of dialogue {dlg}, turn {k}"
                    )));
                }
                let gv = if grads {
                    gc.iter().zip(&gr).map(|(a, b)| self.beta * (a - b)).collect()
                } else {
                    Vec::new()
                };
                Ok((m, p.weight, gv, self.beta * (sc - sr)))
            })
            .collect();
        let total_w: f64 = idx.iter().map(|&i| self.pairs[i].weight).sum();
        let mut out = BipoEval {
            loss: 0.0,
            margins: Vec::with_capacity(idx.len()),
            grad_v: vec![0.0; if grads { d } else { 0 }],
            grad_u: vec![0.0; if grads { u.len() } else { 0 }],
        };
        let mut grad_delta = vec![0.0; u.len()];
        for (&i, r) in idx.iter().zip(per_pair) {
            let (m, w, gv, gs) = r?;
            let w = w / total_w;
            out.loss += w * neg_log_sigmoid(m);
            out.margins.push(m);
            if grads {
                let dm = -w * sigmoid(-m);
                // m depends on v through both the direction and delta_i * v.
                for (o, g) in out.grad_v.iter_mut().zip(&gv) {
                    *o += dm * g;
                }
                grad_delta[self.pairs[i].tutor] += dm * gs;
            }
        }
        if grads {
            out.grad_u = delta_vjp(&delta, &grad_delta);
        }
        Ok(out)
    }
}

/// Loss and per-pair margins of `state` on `pairs` (per-pair weighting).
pub fn bipo_loss<F: Scalar>(
    params: &ModelParams<F>,
    state: &SteeringState,
    pairs: &[PairExample],
) -> Result<(f64, Vec<f64>)> {
    let obj = BipoObjective::new(params, pairs, state.beta, PairWeighting::PerPair)?;
    let u = align_u(state, &obj.tutor_ids)?;
    let e = obj.eval(&state.v, &u, None, false)?;
    Ok((e.loss, e.margins))
}

/// Exact gradients of [`bipo_loss`] with respect to `(v, u)`; `u` is
/// returned in the state's tutor order.
pub fn bipo_grad<F: Scalar>(
    params: &ModelParams<F>,
    state: &SteeringState,
    pairs: &[PairExample],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if state.tutor_ids.iter().any(|t| !pairs.iter().any(|p| p.tutor_id == *t)) {
        return Err(Error::Invalid(
            "every tutor of the steering state must appear in the batch".into(),
        ));
    }
    let obj = BipoObjective::new(params, pairs, state.beta, PairWeighting::PerPair)?;
    let u = align_u(state, &obj.tutor_ids)?;
    let e = obj.eval(&state.v, &u, None, true)?;
    Ok((e.grad_v, e.grad_u))
}

fn align_u(state: &SteeringState, tutors: &[TutorId]) -> Result<Vec<f64>> {
    if state.tutor_ids == tutors {
        return Ok(state.u.clone());
    }
    Err(Error::Invalid(format!(
        "pairs cover tutors {tutors:?}, steering state has {:?}",
        state.tutor_ids
    )))
}

/// Result of [`train_steer`].
#[derive(Debug, Clone)]
pub struct SteerRun {
    pub state: SteeringState,
    pub converged: bool,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

/// Learn `(v, u)` from preference pairs with the base model frozen.
pub fn train_steer(
    params: &ModelParams<f32>,
    pairs: &[PairExample],
    config: &SteerConfig,
    seed: u64,
) -> Result<SteerRun> {
    config.validate()?;
    let before = params.checksum();
    let obj = BipoObjective::new(params, pairs, config.beta, config.weighting)?;
    if obj.tutor_ids.len() < 2 {
        log::warn!("only one tutor in the pairs; delta is identically 1");
    }
    let d = params.config.d_model;
    let n_tutors = obj.tutor_ids.len();
    let mut rng = seed::rng(seed::derive(seed, "steer/init", &[]));
    let mut theta: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * config.init_scale
        })
        .chain(std::iter::repeat_n(0.0, n_tutors))
        .collect();
    let mut adam = Adam::new(theta.len(), config.lr);
    let mut history = Vec::new();
    let (mut flat, mut rising, mut converged, mut diverged) = (0usize, 0usize, false, false);
    let mut order: Vec<usize> = (0..obj.len()).collect();
    let mut steps = 0;
    let name = |i: usize| if i < d { format!("v[{i}]") } else { format!("u[tutor {}]", obj.tutor_ids[i - d]) };
    while steps < config.max_steps {
        let (v, u) = theta.split_at(d);
        let full = obj.eval(v, u, None, config.batch_size == 0)?;
        check_delta(u, steps)?;
        if let Some(&prev) = history.last() {
            let rel = (prev - full.loss) / f64::abs(prev).max(f64::MIN_POSITIVE);
            flat = if rel < config.tol { flat + 1 } else { 0 };
            rising = if full.loss > prev { rising + 1 } else { 0 };
        }
        history.push(full.loss);
        log::debug!("steer step {steps}: loss {:.6}", full.loss);
        if rising >= config.diverge_after {
            diverged = true;
            log::error!("steering loss rose for {rising} consecutive steps; stopping");
            break;
        }
        if flat >= config.patience {
            converged = true;
            break;
        }
        let grad: Vec<f64> = if config.batch_size == 0 {
            full.grad_v.iter().chain(&full.grad_u).copied().collect()
        } else {
            order.shuffle(&mut seed::rng(seed::derive(seed, "steer/batch", &[steps as u64])));
            let batch = &order[..config.batch_size.min(order.len())];
            let e = obj.eval(v, u, Some(batch), true)?;
            e.grad_v.iter().chain(&e.grad_u).copied().collect()
        };
        match config.optimizer {
            Optimizer::Adam => adam.step(&mut theta, &grad, name)?,
            Optimizer::Sgd => {
                if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at {}", name(i))));
                }
                theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= config.lr * g);
            }
        }
        steps += 1;
    }
    let (v, u) = theta.split_at(d);
    if !converged && !diverged {
        let last = obj.eval(v, u, None, false)?;
        check_delta(u, steps)?;
        history.push(last.loss);
    }
    let state = SteeringState {
        tutor_ids: obj.tutor_ids.clone(),
        v: v.to_vec(),
        u: u.to_vec(),
        beta: config.beta,
        seed,
        steps,
        loss_history: history,
        diverged,
    };
    state.validate()?;
    let after = params.checksum();
    log::info!(
        "steering: {} steps, loss {:.4} -> {:.4}{}",
        steps,
        state.loss_history[0],
        state.final_loss().unwrap_or(f64::NAN),
        if diverged { " (diverged)" } else { "" }
    );
    Ok(SteerRun {
        state,
        converged,
        base_checksum_before: before,
        base_checksum_after: after,
    })
}

fn check_delta(u: &[f64], step: usize) -> Result<()> {
    let delta = delta_from_u(u).delta;
    let mean = delta.iter().sum::<f64>() / delta.len().max(1) as f64;
    if delta.iter().any(|&x| !(x > 0.0)) || (!delta.is_empty() && (mean - 1.0).abs() > 1e-9) {
        return Err(Error::Numeric(format!(
            "delta lost positivity or unit mean at step {step} (mean {mean})"
        )));
    }
    Ok(())
}
