//! Stage orchestration over an output directory.
//!
//! Each stage reads its upstream artifacts from the run directory, writes
//! its own, and logs a SHA-256 content hash per file. Stage seeds are
//! derived from the global seed and the stage name, so any stage can be
//! rerun alone and reproduce the files a full run would write.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{
    corpus_stats, gen_corpus, read_corpus, read_personas, split_corpus, write_corpus,
    write_personas, Corpus, Role, Split, TutorId, Turn,
};
use crate::error::{Error, Result};
use crate::evalkit::{delta_analysis, evaluate, DeltaReport, EvalReport};
use crate::records::{write_file, write_jsonl};
use crate::seed;
use crate::sftpair::{
    build_pairs, read_pairs, style_spread, train_sft, write_pairs, PairsConfig, SftRun, StyleSpread,
};
use crate::steering::{read_steering, train_steer, write_steering, SteerRun, SteeringState};
use crate::textcodec::{build_vocab, Tokenizer, TokenId, BOS, END_TURN, Q, STU, TUT};
use crate::tinylm::{read_checkpoint, sample_utterance, write_checkpoint, ModelParams};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const CORPUS: &str = "corpus.jsonl";
pub const PERSONAS: &str = "personas.jsonl";
pub const CORPUS_STATS: &str = "corpus_stats.json";
pub const VOCAB: &str = "vocab.txt";
pub const CHECKPOINT: &str = "model.ckpt";
pub const SFT_CURVE: &str = "sft_curve.json";
pub const PAIRS: &str = "pairs.jsonl";
pub const STYLE_SPREAD: &str = "style_spread.json";
pub const STEERING: &str = "steering.json";
pub const REPORT_TURNS: &str = "report_turns.jsonl";
pub const REPORT_CELLS: &str = "report_cells.jsonl";
pub const REPORT_ROWS: &str = "report_rows.jsonl";
pub const REPORT_TABLE: &str = "report.txt";
pub const DELTA_CSV: &str = "delta.csv";
pub const DELTA_JSON: &str = "delta.json";

/// Files whose contents make up the evaluation and delta reports.
pub const REPORT_FILES: [&str; 6] = [
    REPORT_TURNS,
    REPORT_CELLS,
    REPORT_ROWS,
    REPORT_TABLE,
    DELTA_CSV,
    DELTA_JSON,
];

/// A written file and its content hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Written {
    pub path: PathBuf,
    pub sha256: String,
}

pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

/// The seed a stage draws from.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    seed::derive(global, &format!("stage/{stage}"), &[])
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.out_dir.clone();
        Ok(Run { config, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn emit(&self, name: &str, bytes: &[u8]) -> Result<Written> {
        let path = self.path(name);
        write_file(&path, bytes)?;
        Ok(hashed(path, bytes))
    }

    fn emit_json<T: Serialize>(&self, name: &str, value: &T) -> Result<Written> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Invalid(format!("cannot serialize {name}: {e}")))?;
        text.push('\n');
        self.emit(name, text.as_bytes())
    }

    fn emit_jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<Written> {
        let path = self.path(name);
        write_jsonl(&path, records)?;
        hash_file(&path)
    }

    /// Echo the resolved config beside the outputs.
    pub fn write_config(&self) -> Result<Written> {
        self.emit(RESOLVED_CONFIG, self.config.to_json().as_bytes())
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        read_corpus(&self.require(CORPUS)?)
    }

    pub fn load_tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::read(&self.require(VOCAB)?)
    }

    pub fn load_model(&self) -> Result<ModelParams<f32>> {
        read_checkpoint(&self.require(CHECKPOINT)?)
    }

    pub fn load_steering(&self) -> Result<SteeringState> {
        read_steering(&self.require(STEERING)?)
    }

    pub fn gen_corpus(&self) -> Result<Vec<Written>> {
        let s = stage_seed(self.config.seed, "corpus");
        let (corpus, personas) = gen_corpus(&self.config.corpus, s)?;
        let corpus = split_corpus(&corpus, self.config.corpus.split, s)?;
        write_corpus(&corpus, &self.path(CORPUS))?;
        write_personas(&personas, &self.path(PERSONAS))?;
        Ok(vec![
            hash_file(&self.path(CORPUS))?,
            hash_file(&self.path(PERSONAS))?,
            self.emit_json(CORPUS_STATS, &corpus_stats(&corpus))?,
        ])
    }

    /// Build the vocabulary and train the population-mean model. On a
    /// numeric abort the last good checkpoint and the curve are still
    /// written before the error is returned.
    pub fn train_sft(&self) -> Result<(SftRun, Vec<Written>)> {
        let corpus = self.load_corpus()?;
        let tok = build_vocab(&corpus, self.config.sft.max_vocab)?;
        let run = train_sft(
            &corpus,
            &tok,
            &self.config.model,
            &self.config.sft,
            stage_seed(self.config.seed, "sft"),
        )?;
        let mut out = vec![self.emit(VOCAB, tok.to_vocab_file().as_bytes())?];
        write_checkpoint(&self.path(CHECKPOINT), &run.params)?;
        out.push(hash_file(&self.path(CHECKPOINT))?);
        #[derive(Serialize)]
        struct Curve<'a> {
            best_epoch: usize,
            aborted: &'a Option<String>,
            epochs: &'a [crate::sftpair::EpochStats],
        }
        out.push(self.emit_json(
            SFT_CURVE,
            &Curve {
                best_epoch: run.best_epoch,
                aborted: &run.aborted,
                epochs: &run.curve,
            },
        )?);
        log::info!(
            "sft: train NLL {:.4} -> {:.4}, best epoch {}",
            run.initial_train_nll(),
            run.final_train_nll(),
            run.best_epoch
        );
        match &run.aborted {
            Some(reason) => Err(Error::Numeric(format!("SFT aborted: {reason}"))),
            None => Ok((run, out)),
        }
    }

    pub fn build_pairs(&self) -> Result<(StyleSpread, Vec<Written>)> {
        let corpus = self.load_corpus()?;
        let tok = self.load_tokenizer()?;
        let params = self.load_model()?;
        let pairs = build_pairs(
            &params,
            &tok,
            &corpus,
            &self.config.pairs,
            stage_seed(self.config.seed, "pairs"),
        )?;
        write_pairs(&pairs, &self.path(PAIRS))?;
        let spread = style_spread(&pairs, &tok)?;
        log::info!(
            "pairs: {} pairs, cross-tutor affect variance sampled {:.5} vs reference {:.5}",
            pairs.len(),
            spread.sampled_variance,
            spread.reference_variance
        );
        let out = vec![
            hash_file(&self.path(PAIRS))?,
            self.emit_json(STYLE_SPREAD, &spread)?,
        ];
        Ok((spread, out))
    }

    pub fn train_steer(&self) -> Result<(SteerRun, Vec<Written>)> {
        let params = self.load_model()?;
        let pairs = read_pairs(&self.require(PAIRS)?)?;
        let run = train_steer(
            &params,
            &pairs,
            &self.config.steer,
            stage_seed(self.config.seed, "steer"),
        )?;
        log::info!(
            "steer: loss {:.4} -> {:.4} in {} steps (converged: {})",
            run.state.loss_history.first().copied().unwrap_or(f64::NAN),
            run.state.final_loss().unwrap_or(f64::NAN),
            run.state.steps,
            run.converged
        );
        write_steering(&run.state, &self.path(STEERING))?;
        let out = vec![hash_file(&self.path(STEERING))?];
        Ok((run, out))
    }

    pub fn evaluate(&self) -> Result<(EvalReport, Vec<Written>)> {
        let state = self.load_steering()?;
        let params = self.load_model()?;
        let tok = self.load_tokenizer()?;
        let corpus = self.load_corpus()?;
        let report = evaluate(
            &params,
            &tok,
            &state,
            &corpus,
            &self.config.eval,
            stage_seed(self.config.seed, "eval"),
        )?;
        let out = vec![
            self.emit_jsonl(REPORT_TURNS, &report.turns)?,
            self.emit_jsonl(REPORT_CELLS, &report.cells)?,
            self.emit_jsonl(REPORT_ROWS, &report.rows)?,
            self.emit(REPORT_TABLE, report.to_table().as_bytes())?,
        ];
        Ok((report, out))
    }

    pub fn delta_report(&self) -> Result<(DeltaReport, Vec<Written>)> {
        let state = self.load_steering()?;
        let personas = read_personas(&self.require(PERSONAS)?)?;
        let report = delta_analysis(&state, &personas)?;
        let out = vec![
            self.emit(DELTA_CSV, report.to_csv().as_bytes())?,
            self.emit_json(DELTA_JSON, &report)?,
        ];
        Ok((report, out))
    }

    /// Every stage in order.
    pub fn pipeline(&self) -> Result<Vec<Written>> {
        let mut out = self.gen_corpus()?;
        out.extend(self.train_sft()?.1);
        out.extend(self.build_pairs()?.1);
        out.extend(self.train_steer()?.1);
        out.extend(self.evaluate()?.1);
        out.extend(self.delta_report()?.1);
        Ok(out)
    }

    /// One steered utterance and its unsteered counterpart for `context`,
    /// sampled with the same seed.
    pub fn generate(&self, context: &PromptContext, tutor: TutorId, alpha: f64) -> Result<Generation> {
        let state = self.load_steering()?;
        let params = self.load_model()?;
        let tok = self.load_tokenizer()?;
        let prompt = context.render(&tok)?;
        let room = params.config.context_len.saturating_sub(prompt.len() + 1);
        if room == 0 {
            return Err(Error::Invalid(format!(
                "context renders to {} tokens, no room left in {}",
                prompt.len(),
                params.config.context_len
            )));
        }
        let sampling = crate::tinylm::SamplingConfig {
            max_new: self.config.eval.sampling.max_new.min(room),
            ..self.config.eval.sampling
        };
        let s = seed::derive(stage_seed(self.config.seed, "generate"), "generate/sample", &[tutor as u64]);
        let injection = state.injection(tutor, alpha)?;
        let steered = sample_utterance(&params, &prompt, Some(&injection), &sampling, s)?;
        let unsteered = sample_utterance(&params, &prompt, None, &sampling, s)?;
        Ok(Generation {
            tutor_id: tutor,
            alpha,
            seed: s,
            steered: tok.decode(&steered)?,
            unsteered: tok.decode(&unsteered)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tutor_id: TutorId,
    pub alpha: f64,
    pub seed: u64,
    pub steered: String,
    pub unsteered: String,
}

/// Dialogue so far for `generate`: the question and the turns up to and
/// including the student turn the tutor should answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptContext {
    pub question: String,
    pub turns: Vec<Turn>,
}

impl PromptContext {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = crate::records::read_file(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Tokens ending with the TUT marker that opens the next tutor turn.
    pub fn render(&self, tok: &Tokenizer) -> Result<Vec<TokenId>> {
        match self.turns.last() {
            Some(t) if t.role == Role::Student => {}
            _ => {
                return Err(Error::Invalid(
                    "context must end with a student turn".into(),
                ))
            }
        }
        let mut tokens = vec![BOS, Q];
        tokens.extend(tok.encode(&self.question));
        for turn in &self.turns {
            tokens.push(if turn.role == Role::Student { STU } else { TUT });
            tokens.extend(tok.encode(&turn.text));
            tokens.push(END_TURN);
        }
        tokens.push(TUT);
        Ok(tokens)
    }
}

/// Override the split a stage reads: pair building for `build-pairs`,
/// evaluation otherwise.
pub fn with_split(mut config: RunConfig, stage: &str, split: Split) -> RunConfig {
    match stage {
        "build-pairs" => config.pairs = PairsConfig { split, ..config.pairs },
        _ => config.eval.split = split,
    }
    config
}

fn hashed(path: PathBuf, bytes: &[u8]) -> Written {
    let sha256 = seed::content_hash(bytes);
    log::info!("wrote {} sha256 {}", path.display(), sha256);
    Written { path, sha256 }
}

fn hash_file(path: &Path) -> Result<Written> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hashed(path.to_path_buf(), &bytes))
}
