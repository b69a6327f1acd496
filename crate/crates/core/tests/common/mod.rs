#![allow(dead_code)]

use tutorsteer::corpus::{gen_corpus, split_corpus, Corpus, CorpusConfig, PersonaSpec, SplitRatios};
use tutorsteer::seed;
use tutorsteer::textcodec::{build_vocab, Tokenizer};
use tutorsteer::tinylm::{ModelConfig, ModelParams, Precision};

pub const CONTEXT: usize = 128;

/// Three tutors, eight short dialogues each, split 80/10/10.
pub fn small_corpus(seed: u64) -> (Corpus, Vec<PersonaSpec>, Tokenizer) {
    let cfg = CorpusConfig {
        n_tutors: 3,
        dialogues_per_tutor: 8,
        turn_pairs_per_dialogue: 4,
        context_len: CONTEXT,
        ..CorpusConfig::default()
    };
    let (c, personas) = gen_corpus(&cfg, seed).unwrap();
    let c = split_corpus(&c, SplitRatios::default(), seed).unwrap();
    let tok = build_vocab(&c, 4000).unwrap();
    (c, personas, tok)
}

pub fn tiny_config(vocab_size: usize, precision: Precision) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        context_len: CONTEXT,
        vocab_size,
        tap_layer: 0,
        precision,
    }
}

/// A randomly initialized tiny model with weights large enough to give
/// non-trivial outputs.
pub fn tiny_params(vocab_size: usize, seed_value: u64) -> ModelParams<f32> {
    let mut p = ModelParams::<f32>::init(&tiny_config(vocab_size, Precision::Fast), seed_value).unwrap();
    p.jitter(&mut seed::rng(seed_value + 100), 0.2);
    p
}
