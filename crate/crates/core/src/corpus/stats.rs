use serde::{Deserialize, Serialize};

use super::{Corpus, Split};

/// Population mean and standard deviation (denominator `n`, not `n - 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// No observations; mean and std are reported as 0.
    pub empty: bool,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary {
                mean: 0.0,
                std: 0.0,
                n: 0,
                empty: true,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
            n: values.len(),
            empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: Split,
    pub dialogues: usize,
    /// Dialogue count per tutor, over every tutor in the corpus.
    pub dialogues_per_tutor: Summary,
    /// Turns (student and tutor utterances) per dialogue in this split.
    pub turns_per_dialogue: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub tutors: usize,
    pub splits: Vec<SplitStats>,
}

impl CorpusStats {
    pub fn get(&self, split: Split) -> &SplitStats {
        self.splits
            .iter()
            .find(|s| s.split == split)
            .expect("stats cover every split")
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let tutors = corpus.tutor_ids();
    let splits = Split::ALL
        .iter()
        .map(|&split| {
            let per_tutor: Vec<f64> = tutors
                .iter()
                .map(|&t| corpus.split(split).filter(|d| d.tutor_id == t).count() as f64)
                .collect();
            let turns: Vec<f64> = corpus.split(split).map(|d| d.turns.len() as f64).collect();
            let dialogues = turns.len();
            SplitStats {
                split,
                dialogues,
                dialogues_per_tutor: if dialogues == 0 {
                    Summary::of(&[])
                } else {
                    Summary::of(&per_tutor)
                },
                turns_per_dialogue: Summary::of(&turns),
            }
        })
        .collect();
    CorpusStats {
        tutors: tutors.len(),
        splits,
    }
}
