//! Preference pairs: ground-truth tutor utterance (chosen) against a
//! population-mean sample from the SFT model (rejected).

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::style::affect_rate;
use crate::corpus::{stage_of_turn, Corpus, Dialogue, Split, Stage, Summary, TutorId};
use crate::error::{Error, Result};
use crate::records::{self, FORMAT_VERSION};
use crate::seed;
use crate::textcodec::{is_special, render_context, render_dialogue, TokenId, Tokenizer, END_TURN};
use crate::tinylm::{Decoder, ModelParams, SamplingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsConfig {
    /// Split the pairs are built from.
    pub split: Split,
    pub sampling: SamplingConfig,
}

impl Default for PairsConfig {
    fn default() -> Self {
        PairsConfig {
            split: Split::Validation,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub tutor_id: TutorId,
    pub dialogue_id: u32,
    /// 1-based turn pair index.
    pub k: usize,
    pub stage: Stage,
    /// Rendered prefix ending with the TUT marker.
    #[serde(rename = "context_token_ids")]
    pub context: Vec<TokenId>,
    /// Ground-truth tutor utterance, without END_TURN.
    #[serde(rename = "chosen_token_ids")]
    pub chosen: Vec<TokenId>,
    /// Population-mean sample, without END_TURN.
    #[serde(rename = "rejected_token_ids")]
    pub rejected: Vec<TokenId>,
    /// Chosen and rejected are token-for-token equal.
    pub flag_degenerate: bool,
    /// Sampling ended immediately twice and a single fallback token was used.
    #[serde(default)]
    pub flag_fallback: bool,
    pub seed_used: u64,
}

impl PairExample {
    /// `context ++ utterance ++ END_TURN` and the span scored for the
    /// utterance (END_TURN included).
    pub fn scored(&self, utterance: &[TokenId]) -> (Vec<TokenId>, std::ops::Range<usize>) {
        let mut tokens = self.context.clone();
        tokens.extend_from_slice(utterance);
        tokens.push(END_TURN);
        let span = self.context.len()..tokens.len();
        (tokens, span)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| {
            Err(Error::Invalid(format!(
                "pair (dialogue {}, turn {}): {m}",
                self.dialogue_id, self.k
            )))
        };
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return fail("chosen and rejected must be non-empty");
        }
        if self.context.is_empty() {
            return fail("empty context");
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    format_version: u32,
    #[serde(flatten)]
    pair: PairExample,
}

const PAIR_FIELDS: &[&str] = &[
    "tutor_id",
    "dialogue_id",
    "k",
    "stage",
    "context_token_ids",
    "chosen_token_ids",
    "rejected_token_ids",
    "flag_degenerate",
    "flag_fallback",
    "seed_used",
];

pub fn write_pairs(pairs: &[PairExample], path: &Path) -> Result<()> {
    let recs: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            format_version: FORMAT_VERSION,
            pair: p.clone(),
        })
        .collect();
    records::write_jsonl(path, &recs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairExample>> {
    let recs: Vec<PairRecord> = records::read_jsonl(path, PAIR_FIELDS)?;
    let pairs: Vec<PairExample> = recs.into_iter().map(|r| r.pair).collect();
    pairs.iter().try_for_each(PairExample::validate)?;
    Ok(pairs)
}

/// Per-pair sampling seed.
pub fn pair_seed(seed: u64, tutor: TutorId, dialogue: u32, k: usize) -> u64 {
    seed::derive(seed, "pairs/sample", &[tutor as u64, dialogue as u64, k as u64])
}

/// Sampled utterance plus bookkeeping about how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSample {
    pub tokens: Vec<TokenId>,
    pub seed_used: u64,
    pub fallback: bool,
}

/// Sample from a decoder positioned right after a TUT marker. An
/// immediate END_TURN is retried once with `seed + 1`; a second one
/// yields the most likely non-special token, flagged.
pub fn sample_population_mean(
    prompt: &Decoder<'_, f32>,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<PopulationSample> {
    let context_len = prompt.params().config.context_len;
    let room = context_len.saturating_sub(prompt.tokens().len() + 1);
    if room == 0 {
        return Err(Error::Invalid(format!(
            "prompt of {} tokens leaves no room to generate within {context_len}",
            prompt.tokens().len()
        )));
    }
    let cfg = SamplingConfig {
        max_new: sampling.max_new.min(room),
        ..*sampling
    };
    for attempt in 0..2u64 {
        let s = seed.wrapping_add(attempt);
        let out = prompt.clone().sample(&cfg, &mut seed::rng(s))?;
        if !out.is_empty() {
            return Ok(PopulationSample {
                tokens: out,
                seed_used: s,
                fallback: false,
            });
        }
    }
    let logits = prompt.logits()?;
    let best = (0..logits.len())
        .filter(|&i| !is_special(i as TokenId))
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .ok_or_else(|| Error::Invalid("vocabulary has no ordinary token".into()))?;
    Ok(PopulationSample {
        tokens: vec![best as TokenId],
        seed_used: seed.wrapping_add(1),
        fallback: true,
    })
}

/// Population-mean utterance for turn pair `k` of `dialogue`.
pub fn gen_population_mean(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    dialogue: &Dialogue,
    k: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<PopulationSample> {
    let ex = render_context(tok, dialogue, k, params.config.context_len)?;
    let mut dec = Decoder::new(params, None)?;
    dec.feed(ex.prompt())?;
    sample_population_mean(&dec, sampling, seed)
}

fn dialogue_pairs(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    d: &Dialogue,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<PairExample>> {
    let full = render_dialogue(tok, d);
    let total = d.turn_pairs();
    let mut dec = Decoder::new(params, None)?;
    let mut out = Vec::new();
    for (idx, span) in full.spans.iter().enumerate() {
        if span.end > params.config.context_len {
            log::warn!("dialogue {} turn {}: over the context length, skipped", d.dialogue_id, idx + 1);
            break;
        }
        let k = idx + 1;
        dec.feed(&full.tokens[dec.tokens().len()..span.start])?;
        let s = sample_population_mean(&dec, sampling, pair_seed(seed, d.tutor_id, d.dialogue_id, k))?;
        let chosen = full.tokens[span.start..span.end - 1].to_vec();
        out.push(PairExample {
            tutor_id: d.tutor_id,
            dialogue_id: d.dialogue_id,
            k,
            stage: stage_of_turn(k, total)?,
            context: full.tokens[..span.start].to_vec(),
            flag_degenerate: chosen == s.tokens,
            chosen,
            rejected: s.tokens,
            flag_fallback: s.fallback,
            seed_used: s.seed_used,
        });
    }
    Ok(out)
}

/// One pair per tutor turn of the selected split.
pub fn build_pairs(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    corpus: &Corpus,
    config: &PairsConfig,
    seed: u64,
) -> Result<Vec<PairExample>> {
    config.sampling.validate()?;
    let dialogues: Vec<&Dialogue> = corpus.split(config.split).collect();
    if dialogues.is_empty() {
        return Err(Error::Invalid(format!("{} split is empty", config.split.as_str())));
    }
    let parts: Vec<Result<Vec<PairExample>>> = dialogues
        .par_iter()
        .map(|d| dialogue_pairs(params, tok, d, &config.sampling, seed))
        .collect();
    let mut pairs = Vec::new();
    for p in parts {
        pairs.extend(p?);
    }
    let degenerate = pairs.iter().filter(|p| p.flag_degenerate).count();
    let fallback = pairs.iter().filter(|p| p.flag_fallback).count();
    log::info!(
        "built {} pairs from the {} split ({degenerate} degenerate, {fallback} fallback)",
        pairs.len(),
        config.split.as_str()
    );
    Ok(pairs)
}

/// Cross-tutor spread of the affect-marker rate for generated versus
/// ground-truth tutor utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpread {
    /// Per-tutor mean affect rate of the population-mean samples.
    pub sampled: BTreeMap<TutorId, f64>,
    /// Per-tutor mean affect rate of the ground-truth utterances.
    pub reference: BTreeMap<TutorId, f64>,
    /// Population variance across tutors of `sampled`.
    pub sampled_variance: f64,
    pub reference_variance: f64,
}

pub fn style_spread(pairs: &[PairExample], tok: &Tokenizer) -> Result<StyleSpread> {
    let mut acc: BTreeMap<TutorId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in pairs {
        let e = acc.entry(p.tutor_id).or_default();
        e.0.push(affect_rate(&tok.decode(&p.rejected)?));
        e.1.push(affect_rate(&tok.decode(&p.chosen)?));
    }
    let sampled: BTreeMap<_, _> = acc.iter().map(|(&t, v)| (t, Summary::of(&v.0).mean)).collect();
    let reference: BTreeMap<_, _> = acc.iter().map(|(&t, v)| (t, Summary::of(&v.1).mean)).collect();
    let var = |m: &BTreeMap<TutorId, f64>| Summary::of(&m.values().copied().collect::<Vec<_>>()).std.powi(2);
    Ok(StyleSpread {
        sampled_variance: var(&sampled),
        reference_variance: var(&reference),
        sampled,
        reference,
    })
}
