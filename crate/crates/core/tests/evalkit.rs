mod common;

use common::{small_corpus, tiny_params};
use tutorsteer::corpus::{PersonaSpec, Split, Stage};
use tutorsteer::evalkit::{
    bleu, cosine, delta_analysis, embed, evaluate, judge, rouge_l, spearman, EvalConfig, Verdict,
};
use tutorsteer::steering::SteeringState;
use tutorsteer::textcodec::render_dialogue;
use tutorsteer::tinylm::{sample_utterance, SamplingConfig, SteerInjection};
use tutorsteer::Error;

fn state(tutors: Vec<u32>, d_model: usize, scale: f64) -> SteeringState {
    let n = tutors.len();
    SteeringState {
        tutor_ids: tutors,
        v: (0..d_model).map(|i| scale * ((i as f64) * 0.7).sin()).collect(),
        u: (0..n).map(|i| 0.3 * i as f64).collect(),
        beta: 1.0,
        seed: 0,
        steps: 0,
        loss_history: Vec::new(),
        diverged: false,
    }
}

fn persona(tutor_id: u32, s: f64) -> PersonaSpec {
    PersonaSpec {
        tutor_id,
        affect: s,
        scaffold: s,
        directness: 1.0 - s,
        verbosity: 1.0,
    }
}

#[test]
fn metric_oracles() {
    assert_eq!(rouge_l("the cat sat", "the cat on the mat"), 0.5);
    assert!((bleu("a b c d", "a b c d e") - (1.0f64 - 5.0 / 4.0).exp()).abs() <= 1e-9);
    assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() <= 1e-12);
    assert_eq!(spearman(&[1.0, 3.0, 2.0], &[1.0, 2.0, 3.0]), Some(0.5));
    assert_eq!(rouge_l("a b", "a b"), 1.0);
    assert_eq!(bleu("x y z w", "a b c d"), 0.0);
}

#[test]
fn judge_examples() {
    let reference = "great (:smiling) first find the gap";
    assert_eq!(judge(reference, "the answer is 14", reference), Verdict::SteeredWins);
    assert_eq!(judge("the answer is 14", reference, reference), Verdict::UnsteeredWins);
    assert_eq!(judge("same text", "same text", reference), Verdict::Tie);
    assert!(embed("").empty);
}

#[test]
fn zero_steering_is_token_identical() {
    let cfg = SamplingConfig {
        max_new: 12,
        ..SamplingConfig::default()
    };
    let mut contexts = 0;
    for corpus_seed in 3.. {
        let (corpus, _, tok) = small_corpus(corpus_seed);
        let params = tiny_params(tok.vocab_size(), corpus_seed + 6);
        let d_model = params.config.d_model;
        let direction: Vec<f32> = (0..d_model).map(|i| (i as f32 * 0.37).cos()).collect();
        for d in &corpus.dialogues {
            let full = render_dialogue(&tok, d);
            for span in &full.spans {
                if contexts == 100 {
                    return;
                }
                let prompt = &full.tokens[..span.start];
                let seed = 1000 + contexts as u64;
                let plain = sample_utterance(&params, prompt, None, &cfg, seed).unwrap();
                let alpha0 = SteerInjection::new(direction.clone(), 0.0);
                let v0 = SteerInjection::new(vec![0.0; d_model], 1.0);
                assert_eq!(sample_utterance(&params, prompt, Some(&alpha0), &cfg, seed).unwrap(), plain);
                assert_eq!(sample_utterance(&params, prompt, Some(&v0), &cfg, seed).unwrap(), plain);
                contexts += 1;
            }
        }
    }
}

#[test]
fn evaluation_bookkeeping_and_determinism() {
    let (corpus, _, tok) = small_corpus(4);
    let params = tiny_params(tok.vocab_size(), 2);
    let st = state(corpus.tutor_ids(), params.config.d_model, 2.0);
    let cfg = EvalConfig {
        alphas: vec![0.0, 0.5, 1.0],
        sampling: SamplingConfig {
            max_new: 10,
            ..SamplingConfig::default()
        },
        ..EvalConfig::default()
    };
    let report = evaluate(&params, &tok, &st, &corpus, &cfg, 5).unwrap();
    let test_turns: usize = corpus.split(Split::Test).map(|d| d.turn_pairs()).sum();
    assert_eq!(report.turns.len(), test_turns * cfg.alphas.len());
    assert_eq!(report.cells.iter().map(|c| c.count).sum::<usize>(), test_turns * cfg.alphas.len());

    // Alpha 0 reproduces the unsteered sample: every comparison ties.
    let base = report.row("all", 0.0).unwrap();
    assert!(base.baseline);
    assert_eq!(base.win_rate, None);
    assert_eq!(base.ties, test_turns);
    for t in report.turns.iter().filter(|t| t.alpha == 0.0) {
        assert_eq!(t.steered, t.unsteered);
        assert_eq!(t.verdict, Verdict::Tie);
    }
    // Unsteered text is shared across strengths for the same turn.
    for t in &report.turns {
        let at0 = report
            .turns
            .iter()
            .find(|u| u.alpha == 0.0 && u.dialogue_id == t.dialogue_id && u.k == t.k)
            .unwrap();
        assert_eq!(t.unsteered, at0.unsteered);
    }
    for stage in Stage::ALL {
        if let Some(row) = report.row(stage.as_str(), 1.0) {
            assert!(!row.baseline);
        }
    }
    let again = evaluate(&params, &tok, &st, &corpus, &cfg, 5).unwrap();
    assert_eq!(report, again);
    assert!(report.to_table().contains("population-mean"));
}

#[test]
fn unknown_tutors_are_listed() {
    let (corpus, _, tok) = small_corpus(4);
    let params = tiny_params(tok.vocab_size(), 2);
    let ids = corpus.tutor_ids();
    let st = state(ids[..1].to_vec(), params.config.d_model, 1.0);
    let err = evaluate(&params, &tok, &st, &corpus, &EvalConfig::default(), 1).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)));
    let msg = err.to_string();
    assert!(msg.contains(&ids[1].to_string()) && msg.contains(&ids[2].to_string()), "{msg}");
}

#[test]
fn delta_report_orders_tutors_and_correlates_with_the_axis() {
    // u increasing with directness gives a perfect rank correlation.
    let st = SteeringState {
        u: vec![1.0, -1.0, 0.0, 0.5],
        ..state(vec![1, 2, 3, 4], 4, 1.0)
    };
    let personas = vec![persona(1, 0.1), persona(2, 0.9), persona(3, 0.6), persona(4, 0.3)];
    let r = delta_analysis(&st, &personas).unwrap();
    assert_eq!(r.rows.iter().map(|r| r.tutor_id).collect::<Vec<_>>(), vec![1, 4, 3, 2]);
    assert!((r.spearman.unwrap() - 1.0).abs() < 1e-12);
    assert!(!r.low_power);
    let mean_delta = r.rows.iter().map(|r| r.delta).sum::<f64>() / 4.0;
    assert!((mean_delta - 1.0).abs() < 1e-12);
    assert!(r.to_csv().starts_with("tutor_id,u,delta,axis\n1,"));

    let two = state(vec![1, 2], 4, 1.0);
    assert!(delta_analysis(&two, &personas).unwrap().low_power);
    assert!(delta_analysis(&st, &personas[..3]).is_err());
}
