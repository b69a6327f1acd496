//! Synthetic tutor–student dialogue corpus.
//!
//! Tutors differ along four known style axes ([`PersonaSpec`]); student turns
//! come from a persona-independent distribution, so tutor text is the only
//! place a persona leaves a trace. The corpus is split at the dialogue level,
//! stratified per tutor, and persisted as JSON lines.

mod generate;
mod io;
mod questions;
mod split;
mod stats;
pub mod style;

pub use generate::{gen_corpus, CorpusConfig, PersonaLayout};
pub use io::{read_corpus, read_personas, write_corpus, write_personas, FORMAT_VERSION};
pub use questions::Question;
pub use split::{split_corpus, SplitRatios};
pub use stats::{corpus_stats, CorpusStats, SplitStats, Summary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TutorId = u32;

/// Ground-truth style parameters of one synthetic tutor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub tutor_id: TutorId,
    /// Emoji and praise propensity, in `[0, 1]`.
    pub affect: f64,
    /// Step-by-step elaboration propensity, in `[0, 1]`.
    pub scaffold: f64,
    /// Propensity to state answers instead of asking guiding questions, in `[0, 1]`.
    pub directness: f64,
    /// Multiplier on tutor utterance length; strictly positive.
    pub verbosity: f64,
}

impl PersonaSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("affect", self.affect),
            ("scaffold", self.scaffold),
            ("directness", self.directness),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Invalid(format!(
                    "tutor {}: {name} = {value} outside [0, 1]",
                    self.tutor_id
                )));
            }
        }
        if !(self.verbosity > 0.0 && self.verbosity.is_finite()) {
            return Err(Error::Invalid(format!(
                "tutor {}: verbosity must be positive, got {}",
                self.tutor_id, self.verbosity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Tutor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One question-anchored dialogue between a single tutor and a student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: u32,
    pub tutor_id: TutorId,
    pub split: Split,
    pub question: Question,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// True when the dialogue opens with a student turn before the first
    /// (student, tutor) pair.
    pub fn has_leading_student(&self) -> bool {
        // With a leading student turn the sequence starts student, student.
        self.turns.len() >= 2
            && self.turns[0].role == Role::Student
            && self.turns[1].role == Role::Student
    }

    /// Number of (student, tutor) turn pairs, K.
    pub fn turn_pairs(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Tutor).count()
    }

    fn pair_offset(&self) -> usize {
        usize::from(self.has_leading_student())
    }

    /// Student turn of pair `k` (1-based).
    pub fn student_turn(&self, k: usize) -> &Turn {
        &self.turns[self.pair_offset() + 2 * (k - 1)]
    }

    /// Tutor turn of pair `k` (1-based).
    pub fn tutor_turn(&self, k: usize) -> &Turn {
        &self.turns[self.pair_offset() + 2 * (k - 1) + 1]
    }

    /// Checks role alternation, non-empty text and at least one tutor turn.
    ///
    /// The layout is an optional leading student turn followed by strict
    /// (student, tutor) pairs.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Invalid(format!(
                "dialogue {}: {msg}",
                self.dialogue_id
            )))
        };
        if self.turns.iter().any(|t| t.text.trim().is_empty()) {
            return fail("empty turn text".into());
        }
        let offset = self.pair_offset();
        let body = &self.turns[offset..];
        if body.is_empty() || body.len() % 2 != 0 {
            return fail(format!(
                "expected (student, tutor) pairs after the opening, found {} turns",
                body.len()
            ));
        }
        for (pos, pair) in body.chunks(2).enumerate() {
            if pair[0].role != Role::Student || pair[1].role != Role::Tutor {
                return fail(format!("roles do not alternate at pair {}", pos + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Mid,
    Late,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Early, Stage::Mid, Stage::Late];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Mid => "mid",
            Stage::Late => "late",
        }
    }
}

/// Position bucket of turn pair `k` out of `total`: early when `k/K <= 0.1`,
/// late when `k/K > 0.9`, mid otherwise.
pub fn stage_of_turn(k: usize, total: usize) -> Result<Stage> {
    if k == 0 || k > total {
        return Err(Error::Invalid(format!(
            "turn index {k} out of range 1..={total}"
        )));
    }
    // Compare 10k against K and 9K in integers so that k/K = 0.1 exactly is early.
    let (k10, total) = (10 * k, total);
    Ok(if k10 <= total {
        Stage::Early
    } else if k10 > 9 * total {
        Stage::Late
    } else {
        Stage::Mid
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Self {
        Corpus { dialogues }
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter().filter(move |d| d.split == split)
    }

    /// Sorted, de-duplicated tutor ids.
    pub fn tutor_ids(&self) -> Vec<TutorId> {
        let mut ids: Vec<_> = self.dialogues.iter().map(|d| d.tutor_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(role: Role, text: &str) -> Turn {
        Turn {
            role,
            text: text.into(),
        }
    }

    fn dialogue(turns: Vec<Turn>) -> Dialogue {
        Dialogue {
            dialogue_id: 0,
            tutor_id: 0,
            split: Split::Train,
            question: Question {
                text: "work out 2 + 3 x 4".into(),
                answer: "14".into(),
            },
            turns,
        }
    }

    #[test]
    fn stage_examples() {
        assert_eq!(stage_of_turn(1, 12).unwrap(), Stage::Early);
        assert_eq!(stage_of_turn(6, 12).unwrap(), Stage::Mid);
        assert_eq!(stage_of_turn(12, 12).unwrap(), Stage::Late);
        assert_eq!(stage_of_turn(1, 10).unwrap(), Stage::Early);
        assert_eq!(stage_of_turn(2, 10).unwrap(), Stage::Mid);
        assert_eq!(stage_of_turn(9, 10).unwrap(), Stage::Mid);
        assert_eq!(stage_of_turn(11, 12).unwrap(), Stage::Late);
        assert!(stage_of_turn(0, 12).is_err());
        assert!(stage_of_turn(13, 12).is_err());
    }

    #[test]
    fn stages_partition_every_dialogue_length() {
        for total in 1..=40 {
            let counts = (1..=total).fold([0usize; 3], |mut acc, k| {
                acc[stage_of_turn(k, total).unwrap() as usize] += 1;
                acc
            });
            assert_eq!(counts.iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn alternation_accepts_leading_student_turn() {
        let d = dialogue(vec![
            turn(Role::Student, "hi"),
            turn(Role::Student, "help"),
            turn(Role::Tutor, "sure"),
        ]);
        assert!(d.validate().is_ok());
        assert!(d.has_leading_student());
        assert_eq!(d.turn_pairs(), 1);
        assert_eq!(d.tutor_turn(1).text, "sure");
        assert_eq!(d.student_turn(1).text, "help");
    }

    #[test]
    fn alternation_rejects_bad_layouts() {
        let tutor_first = dialogue(vec![turn(Role::Tutor, "hi"), turn(Role::Student, "x")]);
        assert!(tutor_first.validate().is_err());
        let no_tutor = dialogue(vec![turn(Role::Student, "hi")]);
        assert!(no_tutor.validate().is_err());
        let empty_text = dialogue(vec![turn(Role::Student, " "), turn(Role::Tutor, "x")]);
        assert!(empty_text.validate().is_err());
    }
}
