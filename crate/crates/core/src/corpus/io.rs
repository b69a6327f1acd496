use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, PersonaSpec, Question, Split, TutorId, Turn};
use crate::error::Result;
use crate::records;

pub use crate::records::FORMAT_VERSION;

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    format_version: u32,
    dialogue_id: u32,
    tutor_id: TutorId,
    split: Split,
    question: Question,
    turns: Vec<Turn>,
}

const DIALOGUE_FIELDS: &[&str] = &["dialogue_id", "tutor_id", "split", "question", "turns"];

#[derive(Serialize, Deserialize)]
struct PersonaRecord {
    format_version: u32,
    #[serde(flatten)]
    persona: PersonaSpec,
}

const PERSONA_FIELDS: &[&str] = &["tutor_id", "affect", "scaffold", "directness", "verbosity"];

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let recs: Vec<DialogueRecord> = corpus
        .dialogues
        .iter()
        .map(|d| DialogueRecord {
            format_version: FORMAT_VERSION,
            dialogue_id: d.dialogue_id,
            tutor_id: d.tutor_id,
            split: d.split,
            question: d.question.clone(),
            turns: d.turns.clone(),
        })
        .collect();
    records::write_jsonl(path, &recs)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let recs: Vec<DialogueRecord> = records::read_jsonl(path, DIALOGUE_FIELDS)?;
    Ok(Corpus::new(
        recs.into_iter()
            .map(|r| Dialogue {
                dialogue_id: r.dialogue_id,
                tutor_id: r.tutor_id,
                split: r.split,
                question: r.question,
                turns: r.turns,
            })
            .collect(),
    ))
}

pub fn write_personas(personas: &[PersonaSpec], path: &Path) -> Result<()> {
    let recs: Vec<PersonaRecord> = personas
        .iter()
        .map(|p| PersonaRecord {
            format_version: FORMAT_VERSION,
            persona: p.clone(),
        })
        .collect();
    records::write_jsonl(path, &recs)
}

pub fn read_personas(path: &Path) -> Result<Vec<PersonaSpec>> {
    let recs: Vec<PersonaRecord> = records::read_jsonl(path, PERSONA_FIELDS)?;
    let personas: Vec<PersonaSpec> = recs.into_iter().map(|r| r.persona).collect();
    for p in &personas {
        p.validate()?;
    }
    Ok(personas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, split_corpus, CorpusConfig, SplitRatios};
    use crate::error::Error;

    fn sample() -> (Corpus, Vec<PersonaSpec>) {
        let cfg = CorpusConfig {
            n_tutors: 3,
            dialogues_per_tutor: 5,
            ..CorpusConfig::default()
        };
        let (c, p) = gen_corpus(&cfg, 21).unwrap();
        (split_corpus(&c, SplitRatios::default(), 21).unwrap(), p)
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let (corpus, personas) = sample();
        write_corpus(&corpus, &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);

        let ppath = dir.path().join("personas.jsonl");
        write_personas(&personas, &ppath).unwrap();
        assert_eq!(read_personas(&ppath).unwrap(), personas);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_tutor_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let (corpus, _) = sample();
        write_corpus(&corpus, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        rec.as_object_mut().unwrap().remove("tutor_id");
        lines[2] = rec.to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_corpus(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("tutor_id"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.jsonl");
        let (corpus, _) = sample();
        let mut text = String::new();
        for d in &corpus.dialogues {
            let mut v = serde_json::to_value(DialogueRecord {
                format_version: FORMAT_VERSION,
                dialogue_id: d.dialogue_id,
                tutor_id: d.tutor_id,
                split: d.split,
                question: d.question.clone(),
                turns: d.turns.clone(),
            })
            .unwrap();
            v["annotator"] = "x".into();
            text.push_str(&v.to_string());
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = read_corpus(Path::new("/nonexistent/corpus.jsonl")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
