mod common;

use common::{small_corpus, tiny_config, tiny_params, CONTEXT};
use tutorsteer::corpus::{stage_of_turn, Corpus, Dialogue, Question, Role, Split, Turn};
use tutorsteer::sftpair::{
    build_pairs, gen_population_mean, read_pairs, sample_population_mean, sft_examples,
    sft_objective, train_sft, write_pairs, PairsConfig, SftConfig,
};
use tutorsteer::textcodec::{build_vocab, is_special, render_context, END_TURN, N_SPECIAL};
use tutorsteer::tinylm::{forward, nll_masked, Decoder, ModelParams, Precision, SamplingConfig};

fn dialogue(id: u32, tutor: u32, pairs: &[(&str, &str)]) -> Dialogue {
    Dialogue {
        dialogue_id: id,
        tutor_id: tutor,
        split: Split::Train,
        question: Question {
            text: "what is two plus two ?".into(),
            answer: "4".into(),
        },
        turns: pairs
            .iter()
            .flat_map(|(s, t)| {
                [
                    Turn {
                        role: Role::Student,
                        text: s.to_string(),
                    },
                    Turn {
                        role: Role::Tutor,
                        text: t.to_string(),
                    },
                ]
            })
            .collect(),
    }
}

#[test]
fn objective_is_the_nested_mean() {
    // Tutor 1: one dialogue; tutor 2: two dialogues of different lengths.
    let corpus = Corpus::new(vec![
        dialogue(0, 1, &[("hi", "hello there"), ("is it 4 ?", "yes great work")]),
        dialogue(1, 2, &[("help", "add two and two")]),
        dialogue(2, 2, &[("i am stuck", "count up from two"), ("3 ?", "one more"), ("4", "well done (:star)")]),
    ]);
    let tok = build_vocab(&corpus, 1000).unwrap();
    let params = tiny_params(tok.vocab_size(), 3);
    let dialogues: Vec<&Dialogue> = corpus.dialogues.iter().collect();
    let examples = sft_examples(&tok, &dialogues, CONTEXT).unwrap();
    let got = sft_objective(&params, &examples).unwrap();

    let turn_nll = |d: &Dialogue, k: usize| -> f64 {
        let ex = render_context(&tok, d, k, CONTEXT).unwrap();
        let out = forward(&params, &ex.tokens, None).unwrap();
        // Row t predicts token t + 1.
        let targets: Vec<u32> = ex.tokens[1..].to_vec();
        let mask: Vec<bool> = ex.target_mask[1..].to_vec();
        let rows = &out.logits[..targets.len() * tok.vocab_size()];
        nll_masked(rows, tok.vocab_size(), &targets, &mask).unwrap() as f64
    };
    let d = &corpus.dialogues;
    let tutor1 = (turn_nll(&d[0], 1) + turn_nll(&d[0], 2)) / 2.0;
    let tutor2 = (turn_nll(&d[1], 1) + (turn_nll(&d[2], 1) + turn_nll(&d[2], 2) + turn_nll(&d[2], 3)) / 3.0) / 2.0;
    let expected = (tutor1 + tutor2) / 2.0;
    assert!((got - expected).abs() < 1e-5 * expected, "{got} vs {expected}");
    let total: f64 = examples.iter().map(|e| e.weight).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

fn quick_sft() -> SftConfig {
    SftConfig {
        epochs: 3,
        lr: 3e-3,
        batch_size: 8,
        ..SftConfig::default()
    }
}

#[test]
fn sft_reduces_loss_and_is_deterministic() {
    let (corpus, _, tok) = small_corpus(2);
    let model = tiny_config(0, Precision::Fast);
    let a = train_sft(&corpus, &tok, &model, &quick_sft(), 5).unwrap();
    let b = train_sft(&corpus, &tok, &model, &quick_sft(), 5).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.curve, b.curve);
    assert!(a.aborted.is_none());
    assert_eq!(a.curve.len(), 4);
    assert!(a.curve.iter().all(|e| e.train_nll.is_finite()));
    assert!(a.final_train_nll() < a.initial_train_nll());
    let best = &a.curve[a.best_epoch];
    assert!(best.val_nll.unwrap() <= a.curve[0].val_nll.unwrap());
    assert_eq!(a.params.config.vocab_size, tok.vocab_size());
    // Re-evaluating the selected model reproduces its validation objective.
    let val: Vec<&Dialogue> = corpus.split(Split::Validation).collect();
    let ex = sft_examples(&tok, &val, CONTEXT).unwrap();
    let v1 = sft_objective(&a.params, &ex).unwrap();
    let v2 = sft_objective(&a.params, &ex).unwrap();
    assert_eq!(v1, v2);
    assert!((v1 - best.val_nll.unwrap()).abs() < 1e-9);
}

#[test]
fn sft_rejects_bad_input() {
    let (corpus, _, tok) = small_corpus(2);
    let model = tiny_config(0, Precision::Fast);
    let empty = Corpus::new(corpus.split(Split::Test).cloned().collect());
    assert!(train_sft(&empty, &tok, &model, &quick_sft(), 1).is_err());
    let wrong_vocab = tiny_config(tok.vocab_size() + 1, Precision::Fast);
    assert!(train_sft(&corpus, &tok, &wrong_vocab, &quick_sft(), 1).is_err());
    let bad = SftConfig {
        lr: 0.0,
        ..quick_sft()
    };
    assert!(train_sft(&corpus, &tok, &model, &bad, 1).is_err());
}

#[test]
fn sft_aborts_cleanly_on_divergence() {
    let (corpus, _, tok) = small_corpus(2);
    let model = tiny_config(0, Precision::Fast);
    let cfg = SftConfig {
        lr: 1e30,
        grad_clip: 0.0,
        epochs: 2,
        ..quick_sft()
    };
    let run = train_sft(&corpus, &tok, &model, &cfg, 1).unwrap();
    assert!(run.aborted.is_some());
    assert!(run.params.all_finite());
}

#[test]
fn pairs_cover_every_tutor_turn() {
    let (corpus, _, tok) = small_corpus(4);
    let params = tiny_params(tok.vocab_size(), 7);
    for split in [Split::Validation, Split::Train] {
        let cfg = PairsConfig {
            split,
            ..PairsConfig::default()
        };
        let pairs = build_pairs(&params, &tok, &corpus, &cfg, 9).unwrap();
        let expected: usize = corpus.split(split).map(Dialogue::turn_pairs).sum();
        assert_eq!(pairs.len(), expected);
        for p in &pairs {
            let d = corpus.dialogues.iter().find(|d| d.dialogue_id == p.dialogue_id).unwrap();
            assert_eq!(d.split, split);
            assert_eq!(p.stage, stage_of_turn(p.k, d.turn_pairs()).unwrap());
            assert!(!p.chosen.is_empty() && !p.rejected.is_empty());
            assert!(p.rejected.iter().all(|&t| !is_special(t)));
            assert_eq!(p.flag_degenerate, p.chosen == p.rejected);
            // Chosen and context come straight from the stored dialogue.
            let ex = render_context(&tok, d, p.k, CONTEXT).unwrap();
            assert_eq!(p.context, ex.prompt());
            let mut chosen = p.chosen.clone();
            chosen.push(END_TURN);
            assert_eq!(chosen, ex.tokens[ex.target_span()]);
        }
        if split == Split::Validation {
            assert_eq!(pairs, build_pairs(&params, &tok, &corpus, &cfg, 9).unwrap());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("pairs.jsonl");
            write_pairs(&pairs, &path).unwrap();
            assert_eq!(read_pairs(&path).unwrap(), pairs);
        }
    }
    let none = Corpus::new(corpus.split(Split::Train).cloned().collect());
    assert!(build_pairs(&params, &tok, &none, &PairsConfig::default(), 1).is_err());
}

#[test]
fn population_mean_sample_is_seeded() {
    let (corpus, _, tok) = small_corpus(4);
    let params = tiny_params(tok.vocab_size(), 7);
    let d = corpus.split(Split::Validation).next().unwrap();
    let cfg = SamplingConfig::default();
    let a = gen_population_mean(&params, &tok, d, 2, &cfg, 11).unwrap();
    let b = gen_population_mean(&params, &tok, d, 2, &cfg, 11).unwrap();
    assert_eq!(a, b);
    assert!(!a.tokens.is_empty());
    let pairs = build_pairs(&params, &tok, &corpus, &PairsConfig::default(), 3).unwrap();
    let p = pairs.iter().find(|p| p.dialogue_id == d.dialogue_id && p.k == 2).unwrap();
    let again = gen_population_mean(&params, &tok, d, 2, &cfg, p.seed_used).unwrap();
    if !p.flag_fallback {
        assert_eq!(again.tokens, p.rejected);
    }
}

#[test]
fn immediate_end_falls_back_to_a_flagged_token() {
    let (_, _, tok) = small_corpus(4);
    let mut params: ModelParams<f32> = tiny_params(tok.vocab_size(), 7);
    let (d, v) = (16, tok.vocab_size());
    // Make END_TURN dominate every position.
    let layout = params.layout.clone();
    params.data[layout.lnf_g.clone()].iter_mut().for_each(|x| *x = 0.0);
    params.data[layout.lnf_b.clone()].iter_mut().for_each(|x| *x = 0.0);
    params.data[layout.lnf_b.start] = 1.0;
    params.data[layout.w_out.clone()].iter_mut().for_each(|x| *x = 0.0);
    params.data[layout.w_out.start + END_TURN as usize] = 100.0;
    assert_eq!(layout.w_out.len(), d * v);
    let mut dec = Decoder::new(&params, None).unwrap();
    dec.feed(&[2, 4, 9, 6]).unwrap();
    let s = sample_population_mean(&dec, &SamplingConfig::default(), 5).unwrap();
    assert!(s.fallback);
    assert_eq!(s.seed_used, 6);
    // All ordinary tokens tie; the lowest id wins.
    assert_eq!(s.tokens, vec![N_SPECIAL as u32]);
}
