use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Corpus, Split, TutorId};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(format!("split ratios must be non-negative: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1: {parts:?}")));
        }
        Ok(())
    }

    /// (train, validation, test) counts for a tutor with `n >= 3` dialogues.
    /// Validation and test get `max(1, round(ratio * n))`; train gets the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = ((self.validation * n as f64).round() as usize).max(1);
        let test = ((self.test * n as f64).round() as usize).max(1);
        let (val, test) = if val + test >= n {
            (1, 1)
        } else {
            (val, test)
        };
        (n - val - test, val, test)
    }
}

/// Assign splits per dialogue, stratified per tutor.
pub fn split_corpus(corpus: &Corpus, ratios: SplitRatios, seed: u64) -> Result<Corpus> {
    ratios.validate()?;
    let mut by_tutor: BTreeMap<TutorId, Vec<usize>> = BTreeMap::new();
    for (idx, d) in corpus.dialogues.iter().enumerate() {
        by_tutor.entry(d.tutor_id).or_default().push(idx);
    }
    let mut out = corpus.clone();
    for (tutor, mut indices) in by_tutor {
        if indices.len() < 3 {
            return Err(Error::Invalid(format!(
                "tutor {tutor} has {} dialogues; at least 3 are needed for a train/validation/test split",
                indices.len()
            )));
        }
        let (n_train, n_val, _) = ratios.counts(indices.len());
        let mut rng = seed::rng(seed::derive(seed, "split", &[u64::from(tutor)]));
        indices.shuffle(&mut rng);
        for (pos, idx) in indices.into_iter().enumerate() {
            out.dialogues[idx].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, CorpusConfig};
    use proptest::prelude::*;

    #[test]
    fn rounding_examples() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(40), (32, 4, 4));
        assert_eq!(r.counts(10), (8, 1, 1));
        assert_eq!(r.counts(3), (1, 1, 1));
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let bad = SplitRatios {
            train: 0.7,
            validation: 0.1,
            test: 0.1,
        };
        let corpus = Corpus::default();
        assert!(matches!(split_corpus(&corpus, bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn names_tutor_with_too_few_dialogues() {
        let cfg = CorpusConfig {
            n_tutors: 2,
            dialogues_per_tutor: 3,
            ..CorpusConfig::default()
        };
        let (mut corpus, _) = gen_corpus(&cfg, 1).unwrap();
        corpus.dialogues.retain(|d| !(d.tutor_id == 2 && d.dialogue_id == 5));
        let err = split_corpus(&corpus, SplitRatios::default(), 1).unwrap_err();
        assert!(err.to_string().contains("tutor 2"), "{err}");
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let cfg = CorpusConfig {
            n_tutors: 3,
            dialogues_per_tutor: 20,
            ..CorpusConfig::default()
        };
        let (corpus, _) = gen_corpus(&cfg, 4).unwrap();
        let a = split_corpus(&corpus, SplitRatios::default(), 8).unwrap();
        let b = split_corpus(&corpus, SplitRatios::default(), 8).unwrap();
        assert_eq!(a, b);
        for tutor in a.tutor_ids() {
            let count = |s| a.split(s).filter(|d| d.tutor_id == tutor).count();
            assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (16, 2, 2));
        }
    }

    proptest! {
        #[test]
        fn every_tutor_gets_validation_and_test(n in 5usize..400) {
            let (train, val, test) = SplitRatios::default().counts(n);
            prop_assert!(val >= 1 && test >= 1);
            prop_assert_eq!(train + val + test, n);
            prop_assert!((train as f64 / n as f64 - 0.8).abs() <= 1.0 / n as f64 + 1e-12);
        }
    }
}
