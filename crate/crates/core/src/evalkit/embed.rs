//! Deterministic style embedding: hashed character trigrams plus a small
//! block of style features.

use serde::{Deserialize, Serialize};

use crate::corpus::style::{is_emoji, is_praise};

pub const TRIGRAM_DIM: usize = 512;
pub const STYLE_DIM: usize = 6;
pub const EMBED_DIM: usize = TRIGRAM_DIM + STYLE_DIM;
pub const TRIGRAM_WEIGHT: f64 = 0.7;
pub const STYLE_WEIGHT: f64 = 0.3;
/// Utterance length at which the length feature reaches 1.
pub const LENGTH_SCALE: f64 = 40.0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding {
    pub vector: Vec<f64>,
    /// The text had no tokens; the vector is all zeros.
    pub empty: bool,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Style features in order: emoji rate, praise rate, question marks per
/// token, length (tokens / 40, capped at 1), uppercase share of letters,
/// digit share of non-space characters.
pub fn style_features(text: &str) -> [f64; STYLE_DIM] {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.is_empty() {
        return [0.0; STYLE_DIM];
    }
    let n = toks.len() as f64;
    let lower: Vec<String> = toks.iter().map(|t| t.to_lowercase()).collect();
    let emoji = lower.iter().filter(|t| is_emoji(t)).count() as f64 / n;
    let praise = lower.iter().filter(|t| is_praise(t)).count() as f64 / n;
    let questions = text.matches('?').count() as f64 / n;
    let length = (n / LENGTH_SCALE).min(1.0);
    let letters = text.chars().filter(|c| c.is_alphabetic()).count();
    let upper = text.chars().filter(|c| c.is_uppercase()).count();
    let visible = text.chars().filter(|c| !c.is_whitespace()).count();
    let digits = text.chars().filter(|c| c.is_ascii_digit()).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    [emoji, praise, questions, length, ratio(upper, letters), ratio(digits, visible)]
}

/// Embed `text`. Trigrams are taken over the lowercase text with
/// whitespace collapsed and a space on each side, hashed with 64-bit
/// FNV-1a (standard offset basis) into 512 buckets.
pub fn embed(text: &str) -> StyleEmbedding {
    let toks: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if toks.is_empty() {
        return StyleEmbedding {
            vector: vec![0.0; EMBED_DIM],
            empty: true,
        };
    }
    let padded: Vec<char> = format!(" {} ", toks.join(" ")).chars().collect();
    let mut tri = vec![0.0; TRIGRAM_DIM];
    let mut buf = String::new();
    for w in padded.windows(3) {
        buf.clear();
        buf.extend(w);
        tri[(fnv1a(buf.as_bytes()) % TRIGRAM_DIM as u64) as usize] += 1.0;
    }
    normalize(&mut tri);
    let mut style = style_features(text).to_vec();
    normalize(&mut style);
    let vector = tri
        .iter()
        .map(|x| x * TRIGRAM_WEIGHT)
        .chain(style.iter().map(|x| x * STYLE_WEIGHT))
        .collect();
    StyleEmbedding { vector, empty: false }
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine_checked(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity, defined as 0 when either norm is 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_checked(a, b).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!(cosine_checked(&[0.0], &[1.0]).is_none());
    }

    #[test]
    fn embedding_is_deterministic_and_bounded() {
        let a = embed("great work ! what comes next ?");
        let b = embed("great work ! what comes next ?");
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), EMBED_DIM);
        let norm = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 1.0);
        let e = embed("   ");
        assert!(e.empty && e.vector.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn appended_emoji_raises_emoji_coordinate() {
        let base = embed("well done , what is the next step ?");
        let more = embed("well done , what is the next step ? (:smiling) (:smiling)");
        assert!(more.vector[TRIGRAM_DIM] > base.vector[TRIGRAM_DIM]);
        let f = style_features("well done (:smiling) 12");
        assert_eq!(f[0], 0.25);
        assert_eq!(f[5], 2.0 / 20.0);
    }

    proptest! {
        #[test]
        fn cosine_range(text_a in "[a-z?!( ):]{0,40}", text_b in "[a-z0-9 ]{0,40}") {
            let c = cosine(&embed(&text_a).vector, &embed(&text_b).vector);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
