//! Evaluation of steered generation against ground-truth tutor turns:
//! overlap metrics, a style-embedding similarity, a deterministic
//! pairwise judge, and per-tutor-first aggregation by stage and strength.

mod analysis;
mod embed;
mod metrics;

pub use analysis::{average_ranks, delta_analysis, spearman, style_axis, DeltaReport, DeltaRow};
pub use embed::{
    cosine, cosine_checked, embed, style_features, StyleEmbedding, EMBED_DIM, STYLE_DIM,
    TRIGRAM_DIM,
};
pub use metrics::{bleu, rouge_l, rouge_l_beta};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{stage_of_turn, Corpus, Dialogue, Split, Stage, TutorId};
use crate::error::{Error, Result};
use crate::seed;
use crate::steering::SteeringState;
use crate::textcodec::{render_dialogue, Tokenizer};
use crate::tinylm::{Decoder, ModelParams, SamplingConfig};

/// Scores closer than this count as a tie.
pub const TIE_EPS: f64 = 1e-12;

pub const JUDGE_RULE: &str = "judge: the utterance whose style embedding has the higher cosine \
similarity to the ground-truth tutor utterance wins; |difference| <= 1e-12 is a tie; win rate \
excludes ties";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    SteeredWins,
    UnsteeredWins,
    Tie,
}

pub fn judge(steered: &str, unsteered: &str, reference: &str) -> Verdict {
    let r = embed(reference).vector;
    let s1 = cosine(&embed(steered).vector, &r);
    let s2 = cosine(&embed(unsteered).vector, &r);
    if (s1 - s2).abs() <= TIE_EPS {
        Verdict::Tie
    } else if s1 > s2 {
        Verdict::SteeredWins
    } else {
        Verdict::UnsteeredWins
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    pub sampling: SamplingConfig,
    pub split: Split,
    /// Recall weight of ROUGE-L; 1 is balanced F1.
    pub rouge_beta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alphas: vec![0.0, 0.3, 0.5, 0.7, 1.0],
            sampling: SamplingConfig::default(),
            split: Split::Test,
            rouge_beta: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("eval: alphas must be a non-empty list of finite numbers".into()));
        }
        if !(self.rouge_beta > 0.0) {
            return Err(Error::Config("eval: rouge_beta must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics of one candidate against the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rouge_l: f64,
    pub bleu: f64,
    pub cosine: f64,
}

fn score(candidate: &str, reference: &str, rouge_beta: f64) -> Scores {
    Scores {
        rouge_l: rouge_l_beta(candidate, reference, rouge_beta),
        bleu: bleu(candidate, reference),
        cosine: cosine(&embed(candidate).vector, &embed(reference).vector),
    }
}

/// One test turn under one steering strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub tutor_id: TutorId,
    pub dialogue_id: u32,
    pub k: usize,
    pub stage: Stage,
    pub alpha: f64,
    pub seed: u64,
    pub reference: String,
    pub steered: String,
    pub unsteered: String,
    pub steered_scores: Scores,
    pub unsteered_scores: Scores,
    pub verdict: Verdict,
}

/// Aggregate over the turns of one tutor in one stage at one strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub tutor_id: TutorId,
    pub stage: Stage,
    pub alpha: f64,
    pub count: usize,
    pub rouge_l: f64,
    pub bleu: f64,
    pub cosine: f64,
    pub unsteered_rouge_l: f64,
    pub unsteered_bleu: f64,
    pub unsteered_cosine: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Wins over decided comparisons; `None` when every comparison tied.
    pub win_rate: Option<f64>,
}

/// Cross-tutor means for one stage (or all turns) at one strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    /// "early", "mid", "late" or "all".
    pub stage: String,
    pub alpha: f64,
    pub count: usize,
    pub tutors: usize,
    /// At alpha 0 the generations are the unsteered ones and these are the
    /// population-mean baseline metrics.
    pub baseline: bool,
    pub rouge_l: f64,
    pub bleu: f64,
    pub cosine: f64,
    pub win_rate: Option<f64>,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub judge_rule: String,
    pub alphas: Vec<f64>,
    pub split: Split,
    pub seed: u64,
    pub turns: Vec<TurnResult>,
    pub cells: Vec<Cell>,
    pub rows: Vec<StageRow>,
    /// Generations that ended immediately (empty text).
    pub empty_generations: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn win_rate(wins: usize, losses: usize) -> Option<f64> {
    (wins + losses > 0).then(|| wins as f64 / (wins + losses) as f64)
}

fn alpha_key(a: f64) -> u64 {
    a.to_bits()
}

/// Per-tutor cells from turn results, ordered by (alpha order, tutor, stage).
pub fn aggregate_cells(turns: &[TurnResult], alphas: &[f64]) -> Vec<Cell> {
    let mut groups: BTreeMap<(usize, TutorId, Stage), Vec<&TurnResult>> = BTreeMap::new();
    for t in turns {
        let ai = alphas
            .iter()
            .position(|&a| alpha_key(a) == alpha_key(t.alpha))
            .unwrap_or(alphas.len());
        groups.entry((ai, t.tutor_id, t.stage)).or_default().push(t);
    }
    groups
        .into_iter()
        .map(|((_, tutor, stage), ts)| {
            let wins = ts.iter().filter(|t| t.verdict == Verdict::SteeredWins).count();
            let losses = ts.iter().filter(|t| t.verdict == Verdict::UnsteeredWins).count();
            Cell {
                tutor_id: tutor,
                stage,
                alpha: ts[0].alpha,
                count: ts.len(),
                rouge_l: mean(ts.iter().map(|t| t.steered_scores.rouge_l)),
                bleu: mean(ts.iter().map(|t| t.steered_scores.bleu)),
                cosine: mean(ts.iter().map(|t| t.steered_scores.cosine)),
                unsteered_rouge_l: mean(ts.iter().map(|t| t.unsteered_scores.rouge_l)),
                unsteered_bleu: mean(ts.iter().map(|t| t.unsteered_scores.bleu)),
                unsteered_cosine: mean(ts.iter().map(|t| t.unsteered_scores.cosine)),
                wins,
                losses,
                ties: ts.len() - wins - losses,
                win_rate: win_rate(wins, losses),
            }
        })
        .collect()
}

/// Cross-tutor rows: each tutor's mean over its turns first, then the
/// unweighted mean over tutors. Stage "all" pools a tutor's turns across
/// stages before averaging.
pub fn aggregate_rows(turns: &[TurnResult], alphas: &[f64]) -> Vec<StageRow> {
    let mut rows = Vec::new();
    let stages: Vec<Option<Stage>> = Stage::ALL.iter().copied().map(Some).chain([None]).collect();
    for stage in stages {
        for &alpha in alphas {
            let mut by_tutor: BTreeMap<TutorId, Vec<&TurnResult>> = BTreeMap::new();
            for t in turns {
                if alpha_key(t.alpha) == alpha_key(alpha) && stage.is_none_or(|s| s == t.stage) {
                    by_tutor.entry(t.tutor_id).or_default().push(t);
                }
            }
            let baseline = alpha == 0.0;
            let pick = |t: &TurnResult| if baseline { t.unsteered_scores } else { t.steered_scores };
            let per_tutor: Vec<(Scores, Option<f64>, usize)> = by_tutor
                .values()
                .map(|ts| {
                    let s = Scores {
                        rouge_l: mean(ts.iter().map(|t| pick(t).rouge_l)),
                        bleu: mean(ts.iter().map(|t| pick(t).bleu)),
                        cosine: mean(ts.iter().map(|t| pick(t).cosine)),
                    };
                    let wins = ts.iter().filter(|t| t.verdict == Verdict::SteeredWins).count();
                    let losses = ts.iter().filter(|t| t.verdict == Verdict::UnsteeredWins).count();
                    (s, win_rate(wins, losses), ts.len() - wins - losses)
                })
                .collect();
            let decided: Vec<f64> = per_tutor.iter().filter_map(|p| p.1).collect();
            rows.push(StageRow {
                stage: stage.map_or("all", Stage::as_str).to_string(),
                alpha,
                count: by_tutor.values().map(Vec::len).sum(),
                tutors: by_tutor.len(),
                baseline,
                rouge_l: mean(per_tutor.iter().map(|p| p.0.rouge_l)),
                bleu: mean(per_tutor.iter().map(|p| p.0.bleu)),
                cosine: mean(per_tutor.iter().map(|p| p.0.cosine)),
                win_rate: if baseline || decided.is_empty() {
                    None
                } else {
                    Some(mean(decided.iter().copied()))
                },
                ties: per_tutor.iter().map(|p| p.2).sum(),
            });
        }
    }
    rows
}

impl EvalReport {
    pub fn row(&self, stage: &str, alpha: f64) -> Option<&StageRow> {
        self.rows
            .iter()
            .find(|r| r.stage == stage && alpha_key(r.alpha) == alpha_key(alpha))
    }

    /// Plain-text table: one block per stage, the alpha 0 row as the
    /// population-mean baseline followed by the steered rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.judge_rule);
        let _ = writeln!(
            out,
            "# split {}, seed {}, {} empty generations",
            self.split.as_str(),
            self.seed,
            self.empty_generations
        );
        let _ = writeln!(
            out,
            "{:<6} {:>6}  {:<16} {:>5} {:>8} {:>8} {:>8} {:>9}",
            "Stage", "Count", "Method", "alpha", "ROUGE-L", "BLEU", "CS", "Win Rate"
        );
        for r in &self.rows {
            let method = if r.baseline { "population-mean" } else { "steered" };
            let wr = r.win_rate.map_or("-".to_string(), |w| format!("{w:.3}"));
            let _ = writeln!(
                out,
                "{:<6} {:>6}  {:<16} {:>5.2} {:>8.3} {:>8.3} {:>8.3} {:>9}",
                r.stage, r.count, method, r.alpha, r.rouge_l, r.bleu, r.cosine, wr
            );
        }
        out
    }
}

fn dialogue_turns(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    state: &SteeringState,
    d: &Dialogue,
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<TurnResult>> {
    let full = render_dialogue(tok, d);
    let total = d.turn_pairs();
    let context_len = params.config.context_len;
    let mut dec = Decoder::new(params, None)?;
    let mut out = Vec::new();
    for (idx, span) in full.spans.iter().enumerate() {
        if span.end > context_len {
            break;
        }
        let k = idx + 1;
        dec.feed(&full.tokens[dec.tokens().len()..span.start])?;
        let cfg = SamplingConfig {
            max_new: config.sampling.max_new.min(context_len - span.start - 1),
            ..config.sampling
        };
        let s = seed::derive(seed, "eval/sample", &[d.tutor_id as u64, d.dialogue_id as u64, k as u64]);
        let unsteered_ids = dec.clone().sample(&cfg, &mut seed::rng(s))?;
        let unsteered = tok.decode(&unsteered_ids)?;
        let reference = tok.decode(&full.tokens[span.start..span.end - 1])?;
        let unsteered_scores = score(&unsteered, &reference, config.rouge_beta);
        let stage = stage_of_turn(k, total)?;
        for &alpha in &config.alphas {
            let steered = if alpha == 0.0 {
                unsteered.clone()
            } else {
                let mut fork = dec.fork(Some(state.injection(d.tutor_id, alpha)?))?;
                tok.decode(&fork.sample(&cfg, &mut seed::rng(s))?)?
            };
            out.push(TurnResult {
                tutor_id: d.tutor_id,
                dialogue_id: d.dialogue_id,
                k,
                stage,
                alpha,
                seed: s,
                verdict: judge(&steered, &unsteered, &reference),
                steered_scores: score(&steered, &reference, config.rouge_beta),
                unsteered_scores,
                reference: reference.clone(),
                steered,
                unsteered: unsteered.clone(),
            });
        }
    }
    Ok(out)
}

/// Generate steered and unsteered utterances for every tutor turn of the
/// evaluation split and every strength, with one seed per turn shared by
/// all strengths, and aggregate.
pub fn evaluate(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    state: &SteeringState,
    corpus: &Corpus,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    state.validate()?;
    let dialogues: Vec<&Dialogue> = corpus.split(config.split).collect();
    if dialogues.is_empty() {
        return Err(Error::Invalid(format!("{} split is empty", config.split.as_str())));
    }
    let mut unknown: Vec<TutorId> = dialogues
        .iter()
        .map(|d| d.tutor_id)
        .filter(|&t| state.index_of(t).is_none())
        .collect();
    unknown.sort_unstable();
    unknown.dedup();
    if !unknown.is_empty() {
        return Err(Error::Invalid(format!(
            "tutors {unknown:?} have no steering coefficient"
        )));
    }
    let parts: Vec<Result<Vec<TurnResult>>> = dialogues
        .par_iter()
        .map(|d| dialogue_turns(params, tok, state, d, config, seed))
        .collect();
    let mut turns = Vec::new();
    for p in parts {
        turns.extend(p?);
    }
    let empty_generations = turns
        .iter()
        .filter(|t| t.steered.is_empty() || (t.alpha == config.alphas[0] && t.unsteered.is_empty()))
        .count();
    Ok(EvalReport {
        judge_rule: JUDGE_RULE.to_string(),
        alphas: config.alphas.clone(),
        split: config.split,
        seed,
        cells: aggregate_cells(&turns, &config.alphas),
        rows: aggregate_rows(&turns, &config.alphas),
        turns,
        empty_generations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judge_examples() {
        assert_eq!(judge("well done (:star)", "the answer is 4", "well done (:star)"), Verdict::SteeredWins);
        assert_eq!(judge("same text", "same text", "other words"), Verdict::Tie);
        assert_eq!(judge("the answer is 4", "well done (:star)", "well done (:star)"), Verdict::UnsteeredWins);
    }

    fn turn(tutor: TutorId, stage: Stage, alpha: f64, cos: f64, verdict: Verdict) -> TurnResult {
        let s = Scores {
            rouge_l: cos,
            bleu: cos,
            cosine: cos,
        };
        TurnResult {
            tutor_id: tutor,
            dialogue_id: 0,
            k: 1,
            stage,
            alpha,
            seed: 0,
            reference: String::new(),
            steered: String::new(),
            unsteered: String::new(),
            steered_scores: s,
            unsteered_scores: s,
            verdict,
        }
    }

    #[test]
    fn per_tutor_first_aggregation() {
        // Tutor 1 has three turns at 0.2, tutor 2 one turn at 0.6.
        let mut turns = vec![turn(1, Stage::Mid, 1.0, 0.2, Verdict::SteeredWins); 3];
        turns.push(turn(2, Stage::Mid, 1.0, 0.6, Verdict::UnsteeredWins));
        let rows = aggregate_rows(&turns, &[1.0]);
        let mid = rows.iter().find(|r| r.stage == "mid").unwrap();
        assert!((mid.cosine - 0.4).abs() < 1e-12);
        assert_eq!(mid.count, 4);
        assert_eq!(mid.win_rate, Some(0.5));
        // Duplicating one tutor's turns leaves the cross-tutor mean unchanged.
        let mut doubled = turns.clone();
        doubled.extend(turns[..3].iter().cloned());
        let mid2 = aggregate_rows(&doubled, &[1.0]).into_iter().find(|r| r.stage == "mid").unwrap();
        assert!((mid2.cosine - mid.cosine).abs() < 1e-12);
        assert_eq!(mid2.win_rate, mid.win_rate);
    }

    #[test]
    fn ties_are_excluded_from_win_rate() {
        let turns = vec![
            turn(1, Stage::Early, 0.5, 0.1, Verdict::SteeredWins),
            turn(1, Stage::Early, 0.5, 0.1, Verdict::Tie),
            turn(1, Stage::Early, 0.5, 0.1, Verdict::UnsteeredWins),
            turn(1, Stage::Early, 0.5, 0.1, Verdict::SteeredWins),
        ];
        let cells = aggregate_cells(&turns, &[0.5]);
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].wins, cells[0].losses, cells[0].ties), (2, 1, 1));
        assert_eq!(cells[0].win_rate, Some(2.0 / 3.0));
        let all_ties = vec![turn(1, Stage::Early, 0.5, 0.1, Verdict::Tie)];
        assert_eq!(aggregate_cells(&all_ties, &[0.5])[0].win_rate, None);
    }
}
