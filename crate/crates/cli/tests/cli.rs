use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tutorsteer::config::RunConfig;
use tutorsteer::pipeline::{REPORT_FILES, RESOLVED_CONFIG, STEERING};

const TINY: &str = r#"{
  "corpus": {"n_tutors": 3, "dialogues_per_tutor": 6, "turn_pairs_per_dialogue": 4, "context_len": 128},
  "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "context_len": 128},
  "sft": {"epochs": 1},
  "pairs": {"sampling": {"max_new": 8}},
  "steer": {"max_steps": 10},
  "eval": {"alphas": [0.0, 1.0], "sampling": {"max_new": 8}}
}"#;

fn tutorsteer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tutorsteer"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pipeline_is_reproducible_and_echoes_its_config() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = tutorsteer(dir.path(), &["pipeline", "--config", "tiny.json", "--seed", "4", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("Win Rate"));
    }
    for name in REPORT_FILES {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
    let echoed = RunConfig::load(&dir.path().join("a").join(RESOLVED_CONFIG)).unwrap();
    let mut expected = RunConfig::from_json(TINY, Path::new("tiny.json")).unwrap();
    expected.seed = 4;
    expected.out_dir = "a".into();
    assert_eq!(echoed, expected);
}

#[test]
fn stages_run_separately_match_the_pipeline() {
    let dir = setup();
    let base = ["--config", "tiny.json", "--seed", "2"];
    let o = tutorsteer(dir.path(), &[&["pipeline"][..], &base, &["--out", "whole"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    for stage in ["gen-corpus", "train-sft", "build-pairs", "train-steer", "evaluate", "delta-report"] {
        let o = tutorsteer(dir.path(), &[&[stage][..], &base, &["--out", "staged"]].concat());
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for name in REPORT_FILES {
        let a = fs::read(dir.path().join("whole").join(name)).unwrap();
        let b = fs::read(dir.path().join("staged").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }

    let ctx = r#"{"question": "work out 3 + 4 x 2",
                  "turns": [{"role": "student", "text": "is it 14 ?"}]}"#;
    fs::write(dir.path().join("ctx.json"), ctx).unwrap();
    let gen = |alpha: &str| {
        let o = tutorsteer(
            dir.path(),
            &[&["generate", "--tutor", "1", "--alpha", alpha, "--context", "ctx.json"][..], &base, &["--out", "whole"]].concat(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    let out = gen("0.5");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    assert!(lines[0].starts_with("steered (tutor 1, alpha 0.5): "));
    assert!(lines[1].starts_with("unsteered: "));
    assert_eq!(out, gen("0.5"));
    // At zero strength both samples coincide.
    let zero = gen("0");
    let z: Vec<&str> = zero.lines().collect();
    assert_eq!(z[0].split_once(": ").unwrap().1, z[1].split_once(": ").unwrap().1);
}

#[test]
fn evaluate_without_steering_artifact_exits_2() {
    let dir = setup();
    let o = tutorsteer(dir.path(), &["evaluate", "--config", "tiny.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(STEERING), "{}", stderr(&o));
}

#[test]
fn generate_without_artifacts_exits_2() {
    let dir = setup();
    let o = tutorsteer(dir.path(), &["generate", "--tutor", "1", "--alpha", "1", "--context", "none.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_3_with_position() {
    let dir = setup();
    fs::write(dir.path().join("bad.json"), "{\n  \"seed\": 1,\n  \"sft\": {\"epoch\": 3}\n}").unwrap();
    let o = tutorsteer(dir.path(), &["gen-corpus", "--config", "bad.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("bad.json:3:") && err.contains("epoch"), "{err}");

    let o = tutorsteer(dir.path(), &["gen-corpus", "--config", "absent.json"]);
    assert_eq!(o.status.code(), Some(3));

    fs::write(dir.path().join("neg.json"), r#"{"steer": {"beta": -1}}"#).unwrap();
    let o = tutorsteer(dir.path(), &["gen-corpus", "--config", "neg.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
