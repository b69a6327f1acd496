//! `tutorsteer`: run the steering pipeline stage by stage or end to end.
//!
//! Settings resolve as flag > config file > built-in default. Exit codes:
//! 0 ok, 2 missing artifact, 3 config error, 4 numeric failure, 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tutorsteer::config::RunConfig;
use tutorsteer::corpus::{Split, TutorId};
use tutorsteer::pipeline::{with_split, PromptContext, Run};
use tutorsteer::Error;

#[derive(Debug, Parser)]
#[command(name = "tutorsteer", version, about = "Tutor-persona activation steering pipeline")]
struct Cli {
    /// JSON run config, or `default` for the built-in settings.
    #[arg(long, global = true, default_value = "default")]
    config: PathBuf,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and persona table.
    GenCorpus,
    /// Build the vocabulary and train the population-mean model.
    TrainSft,
    /// Sample population-mean utterances and write preference pairs.
    BuildPairs {
        #[arg(long)]
        split: Option<Split>,
    },
    /// Learn the steering direction and per-tutor coefficients.
    TrainSteer,
    /// Print one steered utterance and its unsteered counterpart.
    Generate {
        #[arg(long)]
        tutor: TutorId,
        #[arg(long)]
        alpha: f64,
        /// JSON file: {"question": ..., "turns": [{"role": "student", "text": ...}, ...]}
        #[arg(long)]
        context: PathBuf,
    },
    /// Score steered against unsteered generation over the alpha grid.
    Evaluate {
        #[arg(long)]
        split: Option<Split>,
        /// Evaluate a single steering strength instead of the config grid.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Compare learned coefficients with the ground-truth persona axis.
    DeltaReport,
    /// Run every stage in order.
    Pipeline {
        /// Evaluation split.
        #[arg(long)]
        split: Option<Split>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainSft => "train-sft",
            Command::BuildPairs { .. } => "build-pairs",
            Command::TrainSteer => "train-steer",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::DeltaReport => "delta-report",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    match &cli.command {
        Command::BuildPairs { split: Some(s) }
        | Command::Evaluate { split: Some(s), .. }
        | Command::Pipeline { split: Some(s) } => {
            config = with_split(config, cli.command.name(), *s);
        }
        _ => {}
    }
    if let Command::Evaluate { alpha: Some(a), .. } = cli.command {
        config.eval.alphas = vec![a];
    }
    Ok(config)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let run = Run::new(resolve(cli)?)?;
    run.write_config()?;
    let stage = cli.command.name();
    log::info!("{stage}: seed {}, output {}", run.config.seed, run.dir.display());
    match &cli.command {
        Command::GenCorpus => {
            run.gen_corpus()?;
        }
        Command::TrainSft => {
            run.train_sft()?;
        }
        Command::BuildPairs { .. } => {
            run.build_pairs()?;
        }
        Command::TrainSteer => {
            run.train_steer()?;
        }
        Command::Generate {
            tutor,
            alpha,
            context,
        } => {
            let ctx = PromptContext::read(context)
                .with_context(|| format!("reading context {}", context.display()))?;
            let g = run.generate(&ctx, *tutor, *alpha)?;
            println!("steered (tutor {}, alpha {}): {}", g.tutor_id, g.alpha, g.steered);
            println!("unsteered: {}", g.unsteered);
        }
        Command::Evaluate { .. } => {
            let (report, _) = run.evaluate()?;
            print!("{}", report.to_table());
        }
        Command::DeltaReport => {
            let (report, _) = run.delta_report()?;
            print!("{}", report.to_csv());
            match report.spearman {
                Some(rho) => println!("spearman {rho:.4}"),
                None => println!("spearman undefined"),
            }
        }
        Command::Pipeline { .. } => {
            run.pipeline()?;
            print!("{}", std::fs::read_to_string(run.path(tutorsteer::pipeline::REPORT_TABLE))?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::MissingArtifact(_)) => 2,
        Some(Error::Config(_)) => 3,
        Some(Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
