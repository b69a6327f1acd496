use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::questions::{draw_question, Worked};
use super::split::SplitRatios;
use super::style::{EMOJI, PRAISE};
use super::{Corpus, Dialogue, PersonaSpec, Role, Split, Turn};
use crate::error::{Error, Result};
use crate::seed;

/// How persona axes are laid out across tutors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaLayout {
    /// One scalar style per tutor, evenly spaced in `[0.05, 0.95]`:
    /// affect = scaffold = s, directness = 1 - s, verbosity = 1.
    /// Tutor ids are assigned to positions by a seeded shuffle.
    OneDimensional,
    /// Every axis drawn independently (affect, scaffold, directness uniform
    /// in `[0, 1]`, verbosity uniform in `[0.7, 1.3]`).
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_tutors: usize,
    pub dialogues_per_tutor: usize,
    pub turn_pairs_per_dialogue: usize,
    /// Each dialogue has `turn_pairs_per_dialogue ± jitter` pairs (at least 3).
    pub turn_pairs_jitter: usize,
    pub persona_axis_layout: PersonaLayout,
    pub leading_student_prob: f64,
    /// Longest rendered dialogue in tokens, special markers included.
    pub context_len: usize,
    /// Dialogue-level train/validation/test ratios, applied per tutor.
    pub split: SplitRatios,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_tutors: 8,
            dialogues_per_tutor: 40,
            turn_pairs_per_dialogue: 10,
            turn_pairs_jitter: 1,
            persona_axis_layout: PersonaLayout::OneDimensional,
            leading_student_prob: 0.5,
            context_len: 256,
            split: SplitRatios::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tutors < 2 {
            return Err(Error::Config(format!(
                "n_tutors must be >= 2, got {}",
                self.n_tutors
            )));
        }
        if self.dialogues_per_tutor < 1 {
            return Err(Error::Config("dialogues_per_tutor must be >= 1".into()));
        }
        if self.turn_pairs_per_dialogue < 3 {
            return Err(Error::Config(format!(
                "turn_pairs_per_dialogue must be >= 3, got {}",
                self.turn_pairs_per_dialogue
            )));
        }
        if !(0.0..=1.0).contains(&self.leading_student_prob) {
            return Err(Error::Config("leading_student_prob must lie in [0, 1]".into()));
        }
        if self.context_len < 64 {
            return Err(Error::Config("context_len must be >= 64".into()));
        }
        self.split.validate()
    }
}

/// Generate a corpus and the personas behind it. Every dialogue starts in the
/// train split; use [`super::split_corpus`] to assign splits.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<(Corpus, Vec<PersonaSpec>)> {
    config.validate()?;
    let personas = make_personas(config, seed);
    let mut dialogues = Vec::with_capacity(config.n_tutors * config.dialogues_per_tutor);
    for persona in &personas {
        for _ in 0..config.dialogues_per_tutor {
            let id = dialogues.len() as u32;
            dialogues.push(gen_dialogue(config, persona, id, seed));
        }
    }
    Ok((Corpus::new(dialogues), personas))
}

fn make_personas(config: &CorpusConfig, seed: u64) -> Vec<PersonaSpec> {
    let mut rng = seed::rng(seed::derive(seed, "corpus/personas", &[]));
    let n = config.n_tutors;
    match config.persona_axis_layout {
        PersonaLayout::OneDimensional => {
            let mut styles: Vec<f64> = (0..n)
                .map(|i| 0.05 + 0.9 * i as f64 / (n - 1) as f64)
                .collect();
            styles.shuffle(&mut rng);
            styles
                .into_iter()
                .enumerate()
                .map(|(i, s)| PersonaSpec {
                    tutor_id: i as u32 + 1,
                    affect: s,
                    scaffold: s,
                    directness: 1.0 - s,
                    verbosity: 1.0,
                })
                .collect()
        }
        PersonaLayout::Independent => (0..n)
            .map(|i| PersonaSpec {
                tutor_id: i as u32 + 1,
                affect: rng.random_range(0.0..=1.0),
                scaffold: rng.random_range(0.0..=1.0),
                directness: rng.random_range(0.0..=1.0),
                verbosity: rng.random_range(0.7..=1.3),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StudentMove {
    Opening,
    Correct,
    Wrong,
    Partial,
    Unsure,
    Closing,
}

fn gen_dialogue(config: &CorpusConfig, persona: &PersonaSpec, dialogue_id: u32, seed: u64) -> Dialogue {
    let idx = u64::from(dialogue_id);
    // Separate streams: student text must not depend on the tutor's persona.
    let mut shared = seed::rng(seed::derive(seed, "corpus/dialogue", &[idx]));
    let mut student_rng = seed::rng(seed::derive(seed, "corpus/student", &[idx]));
    let mut tutor_rng = seed::rng(seed::derive(seed, "corpus/tutor", &[idx]));

    let worked = draw_question(&mut shared);
    let jitter = config.turn_pairs_jitter as i64;
    let base = config.turn_pairs_per_dialogue as i64 + shared.random_range(-jitter..=jitter);
    let mut pairs = base.max(3) as usize;
    let leading = shared.random_bool(config.leading_student_prob);

    let (students, moves) = student_turns(&worked, pairs, leading, &mut student_rng);
    let mut tutors: Vec<String> = (1..=pairs)
        .map(|k| tutor_turn(persona, &worked, k, pairs, moves[k - 1], &mut tutor_rng))
        .collect();

    let mut students = students;
    // Drop mid pairs until the rendered dialogue fits the context window.
    while rendered_len(&worked, &students, &tutors) > config.context_len && pairs > 3 {
        let drop = pairs - 1;
        let s_idx = drop - 1 + usize::from(leading);
        students.remove(s_idx);
        tutors.remove(drop - 1);
        pairs -= 1;
    }

    let mut turns = Vec::with_capacity(students.len() + tutors.len());
    let mut students = students.into_iter();
    if leading {
        turns.push(Turn {
            role: Role::Student,
            text: students.next().expect("leading student turn"),
        });
    }
    for tutor in tutors {
        turns.push(Turn {
            role: Role::Student,
            text: students.next().expect("student turn per pair"),
        });
        turns.push(Turn {
            role: Role::Tutor,
            text: tutor,
        });
    }

    Dialogue {
        dialogue_id,
        tutor_id: persona.tutor_id,
        split: Split::Train,
        question: worked.question.clone(),
        turns,
    }
}

fn rendered_len(worked: &Worked, students: &[String], tutors: &[String]) -> usize {
    let words = |s: &str| s.split_whitespace().count();
    // BOS, Q, question, then role marker + text + END_TURN per turn.
    2 + words(&worked.question.text)
        + students.iter().map(|s| words(s) + 2).sum::<usize>()
        + tutors.iter().map(|t| words(t) + 2).sum::<usize>()
}

fn student_turns<R: Rng>(
    worked: &Worked,
    pairs: usize,
    leading: bool,
    rng: &mut R,
) -> (Vec<String>, Vec<StudentMove>) {
    let mut texts = Vec::with_capacity(pairs + 1);
    let mut moves = Vec::with_capacity(pairs);
    if leading {
        let opener = ["hi , i need help with this question .", "hello , can we do this one ?", "hi , i am stuck ."];
        texts.push(opener.choose(rng).unwrap().to_string());
    }
    let wrong = worked.wrong.choose(rng).unwrap().clone();
    for k in 1..=pairs {
        let (mv, text) = if k == 1 {
            let options = [
                "can you help me with this ?".to_string(),
                "i do not know where to start .".to_string(),
                format!("i think it is {wrong} ."),
            ];
            (StudentMove::Opening, options.choose(rng).unwrap().clone())
        } else if k == pairs {
            let options = ["thank you .", "thanks , i get it now .", "ok thanks , bye ."];
            (StudentMove::Closing, options.choose(rng).unwrap().to_string())
        } else {
            let progress = (k - 1) as f64 / (pairs - 1) as f64;
            let r: f64 = rng.random();
            if r < 0.6 * progress {
                let options = [
                    format!("is it {} ?", worked.question.answer),
                    format!("i got {} .", worked.question.answer),
                ];
                (StudentMove::Correct, options.choose(rng).unwrap().clone())
            } else {
                match rng.random_range(0..4) {
                    0 => {
                        let w = worked.wrong.choose(rng).unwrap();
                        (StudentMove::Wrong, format!("is it {w} ?"))
                    }
                    1 => (StudentMove::Partial, format!("i got {} .", worked.partial)),
                    2 => (StudentMove::Unsure, "i am not sure .".to_string()),
                    _ => (StudentMove::Unsure, "what do i do next ?".to_string()),
                }
            }
        };
        texts.push(text);
        moves.push(mv);
    }
    (texts, moves)
}

const EXTRAS: &[&str] = &["take your time .", "check each step .", "write it down ."];

fn tutor_turn<R: Rng>(
    persona: &PersonaSpec,
    worked: &Worked,
    k: usize,
    pairs: usize,
    student: StudentMove,
    rng: &mut R,
) -> String {
    let affect = persona.affect;
    let mut parts: Vec<String> = Vec::new();
    let emoji = |rng: &mut R| EMOJI.choose(rng).unwrap().to_string();
    let praise = |rng: &mut R| PRAISE.choose(rng).unwrap().to_string();

    if k == 1 {
        parts.push(["hi there", "hello", "hi"].choose(rng).unwrap().to_string());
        if rng.random_bool(affect) {
            parts.push(emoji(rng));
        }
        if rng.random_bool(persona.scaffold) {
            parts.push("we can take it one step at a time .".into());
        }
        if rng.random_bool(persona.directness) {
            parts.push("let us work through this question .".into());
        } else {
            parts.push("what do you think the first step is ?".into());
        }
    } else if k == pairs {
        if rng.random_bool(affect) {
            parts.push(format!("{} work today", praise(rng)));
        } else {
            parts.push("well done today".into());
        }
        if rng.random_bool(affect) {
            parts.push(emoji(rng));
        }
        parts.push("see you next time .".into());
    } else {
        let step = ((k - 2) * worked.steps.len() / (pairs - 2).max(1)).min(worked.steps.len() - 1);
        if rng.random_bool(affect) {
            parts.push(emoji(rng));
        }
        match student {
            StudentMove::Correct => {
                if rng.random_bool(affect) {
                    parts.push(format!("{} ,", praise(rng)));
                }
                parts.push("yes that is right .".into());
            }
            StudentMove::Wrong => {
                if rng.random_bool(affect) {
                    parts.push(format!("{} effort , but not quite .", praise(rng)));
                } else {
                    parts.push("no , that is not right .".into());
                }
            }
            _ => {
                if rng.random_bool(affect) {
                    parts.push(format!("{} thinking .", praise(rng)));
                }
            }
        }
        if student != StudentMove::Correct {
            if rng.random_bool(persona.scaffold) {
                parts.push(worked.steps[step].clone());
            }
            if rng.random_bool(persona.directness) {
                parts.push(worked.directs[step].clone());
            } else {
                parts.push(worked.prompts[step].clone());
            }
        }
        let extra_p = (0.25 * persona.verbosity).clamp(0.0, 1.0);
        for _ in 0..2 {
            if rng.random_bool(extra_p) {
                parts.push(EXTRAS.choose(rng).unwrap().to_string());
            }
        }
        if rng.random_bool(affect * affect) {
            parts.push(emoji(rng));
        }
    }
    parts.join(" ")
}
