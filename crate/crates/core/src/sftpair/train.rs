//! Supervised fine-tuning of the population-mean tutor.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, Split, TutorId};
use crate::error::{Error, Result};
use crate::seed;
use crate::textcodec::{render_dialogue, TokenId, Tokenizer};
use crate::tinylm::{backward, forward, Adam, ModelConfig, ModelParams, TokenLoss, Wrt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Approximate number of turn examples per optimizer step. Batches are
    /// made of whole dialogues, so a step may cover slightly more.
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Vocabulary cap including special tokens.
    pub max_vocab: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr: 3e-4,
            epochs: 10,
            batch_size: 32,
            grad_clip: 1.0,
            max_vocab: 4000,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "sft: lr, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("sft: grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// One dialogue rendered once, with per-row loss weights that implement
/// the per-tutor, per-dialogue, per-turn nested mean over a split.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub tutor_id: TutorId,
    pub dialogue_id: u32,
    pub tokens: Vec<TokenId>,
    pub loss: TokenLoss<f32>,
    /// Turn examples the dialogue contributes.
    pub turns: usize,
    /// Sum of the loss weights.
    pub weight: f64,
}

/// Build the weighted examples of one split. Turn `k` of dialogue `j` of
/// tutor `i` gets total weight `1 / (I * J_i * K_j)`, spread evenly over
/// its target tokens (the turn's own loss is a per-token mean), so the
/// weighted sum over all examples is the nested mean objective.
pub fn sft_examples(tok: &Tokenizer, dialogues: &[&Dialogue], context_len: usize) -> Result<Vec<SftExample>> {
    let mut per_tutor: BTreeMap<TutorId, usize> = BTreeMap::new();
    for d in dialogues {
        *per_tutor.entry(d.tutor_id).or_default() += 1;
    }
    let n_tutors = per_tutor.len() as f64;
    let mut out = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let full = render_dialogue(tok, d);
        let spans: Vec<_> = full.spans.iter().filter(|s| s.end <= context_len).cloned().collect();
        if spans.is_empty() {
            return Err(Error::Invalid(format!(
                "dialogue {}: no tutor turn fits the context length {context_len}",
                d.dialogue_id
            )));
        }
        if spans.len() < full.spans.len() {
            log::warn!(
                "dialogue {}: {} of {} tutor turns exceed the context and are skipped",
                d.dialogue_id,
                full.spans.len() - spans.len(),
                full.spans.len()
            );
        }
        let len = spans.last().expect("non-empty").end;
        let mut tokens = full.tokens;
        tokens.truncate(len);
        let turn_weight = 1.0 / (n_tutors * per_tutor[&d.tutor_id] as f64 * spans.len() as f64);
        let mut loss = TokenLoss::<f32>::empty(len);
        for span in &spans {
            let w = turn_weight / span.len() as f64;
            for t in span.clone() {
                loss.targets[t - 1] = tokens[t];
                loss.weights[t - 1] = w as f32;
            }
        }
        out.push(SftExample {
            tutor_id: d.tutor_id,
            dialogue_id: d.dialogue_id,
            tokens,
            loss,
            turns: spans.len(),
            weight: turn_weight * spans.len() as f64,
        });
    }
    Ok(out)
}

/// The nested-mean NLL of `examples` under `params`.
pub fn sft_objective(params: &ModelParams<f32>, examples: &[SftExample]) -> Result<f64> {
    let vocab = params.config.vocab_size;
    let parts: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| {
            let out = forward(params, &ex.tokens, None)?;
            let mut total = 0.0;
            for (t, &w) in ex.loss.weights.iter().enumerate() {
                if w != 0.0 {
                    let row = &out.logits[t * vocab..(t + 1) * vocab];
                    let lse = crate::tinylm::ops::logsumexp(row) as f64;
                    total += w as f64 * (lse - row[ex.loss.targets[t] as usize] as f64);
                }
            }
            Ok(total)
        })
        .collect();
    let mut sum = 0.0;
    for p in parts {
        sum += p?;
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct SftRun {
    /// Parameters of the selected epoch.
    pub params: ModelParams<f32>,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub config: SftConfig,
    pub seed: u64,
    /// Set when training stopped on a non-finite loss or gradient; `params`
    /// then holds the last good selection.
    pub aborted: Option<String>,
}

impl SftRun {
    pub fn initial_train_nll(&self) -> f64 {
        self.curve[0].train_nll
    }

    pub fn final_train_nll(&self) -> f64 {
        self.curve.last().expect("curve is never empty").train_nll
    }
}

fn clip(grads: &mut [f32], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// Train the population-mean model on the train split of `corpus`,
/// selecting the epoch with the lowest validation objective (train
/// objective when there is no validation split).
pub fn train_sft(
    corpus: &Corpus,
    tok: &Tokenizer,
    model: &ModelConfig,
    config: &SftConfig,
    seed: u64,
) -> Result<SftRun> {
    config.validate()?;
    let mut model = model.clone();
    if model.vocab_size == 0 {
        model.vocab_size = tok.vocab_size();
    }
    if model.vocab_size != tok.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match the tokenizer ({})",
            model.vocab_size,
            tok.vocab_size()
        )));
    }
    let train: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Invalid("train split is empty".into()));
    }
    let val: Vec<&Dialogue> = corpus.split(Split::Validation).collect();
    let train_ex = sft_examples(tok, &train, model.context_len)?;
    let val_ex = sft_examples(tok, &val, model.context_len)?;

    let mut params = ModelParams::<f32>::init(&model, seed::derive(seed, "sft/init", &[]))?;
    let mut opt = Adam::new(params.data.len(), config.lr);
    let measure = |p: &ModelParams<f32>| -> Result<(f64, Option<f64>)> {
        let tr = sft_objective(p, &train_ex)?;
        let va = if val_ex.is_empty() { None } else { Some(sft_objective(p, &val_ex)?) };
        Ok((tr, va))
    };
    let (tr0, va0) = measure(&params)?;
    let mut curve = vec![EpochStats {
        epoch: 0,
        train_nll: tr0,
        val_nll: va0,
        steps: 0,
    }];
    log::info!("sft epoch 0: train {tr0:.4} val {va0:?}");
    let mut best = (va0.unwrap_or(tr0), 0usize, params.clone());
    let mut aborted = None;

    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(seed, "sft/shuffle", &[epoch as u64])));
        let mut batches: Vec<Vec<usize>> = Vec::new();
        let mut current = Vec::new();
        let mut count = 0;
        for i in order {
            current.push(i);
            count += train_ex[i].turns;
            if count >= config.batch_size {
                batches.push(std::mem::take(&mut current));
                count = 0;
            }
        }
        if !current.is_empty() {
            batches.push(current);
        }
        for batch in &batches {
            let parts: Vec<Result<(f32, Vec<f32>)>> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train_ex[i];
                    let (loss, g) = backward(&params, &ex.tokens, &ex.loss, None, Wrt::PARAMS)?;
                    Ok((loss, g.params.expect("parameter gradients requested")))
                })
                .collect();
            let mut grads = vec![0.0f32; params.data.len()];
            let mut loss = 0.0f64;
            let mut failure = None;
            for part in parts {
                match part {
                    Ok((l, g)) => {
                        loss += l as f64;
                        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    Err(e) => failure = Some(e.to_string()),
                }
            }
            let weight: f64 = batch.iter().map(|&i| train_ex[i].weight).sum();
            let scale = (1.0 / weight) as f32;
            grads.iter_mut().for_each(|g| *g *= scale);
            if failure.is_none() && !(loss / weight).is_finite() {
                failure = Some(format!("non-finite training loss {}", loss / weight));
            }
            if failure.is_none() {
                clip(&mut grads, config.grad_clip);
                let layout = &params.layout;
                if let Err(e) = opt.step(&mut params.data, &grads, |i| layout.name_of(i)) {
                    failure = Some(e.to_string());
                }
            }
            if let Some(msg) = failure {
                log::error!("sft diverged in epoch {epoch}: {msg}");
                aborted = Some(msg);
                break 'epochs;
            }
        }
        let (tr, va) = measure(&params)?;
        curve.push(EpochStats {
            epoch,
            train_nll: tr,
            val_nll: va,
            steps: opt.steps(),
        });
        log::info!("sft epoch {epoch}: train {tr:.4} val {va:?}");
        if !tr.is_finite() || va.is_some_and(|v| !v.is_finite()) {
            aborted = Some(format!("non-finite objective after epoch {epoch}"));
            break;
        }
        let score = va.unwrap_or(tr);
        if score <= best.0 {
            best = (score, epoch, params.clone());
        }
    }
    Ok(SftRun {
        params: best.2,
        curve,
        best_epoch: best.1,
        config: config.clone(),
        seed,
        aborted,
    })
}
