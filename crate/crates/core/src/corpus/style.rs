//! Closed style lexicon shared by the generator and the feature extractors.

/// Emoji rendered as ASCII tokens.
pub const EMOJI: &[&str] = &[
    "(:smiling)",
    "(:thumbs_up)",
    "(:star)",
    "(:party)",
    "(:waving)",
];

pub const PRAISE: &[&str] = &[
    "great",
    "brilliant",
    "excellent",
    "fantastic",
    "superb",
    "amazing",
];

pub fn is_emoji(token: &str) -> bool {
    token.starts_with("(:") && token.ends_with(')')
}

pub fn is_praise(token: &str) -> bool {
    PRAISE.contains(&token)
}

/// Emoji plus praise tokens per whitespace token.
pub fn affect_rate(text: &str) -> f64 {
    let mut n = 0usize;
    let mut hits = 0usize;
    for tok in text.split_whitespace() {
        n += 1;
        let tok = tok.to_lowercase();
        if is_emoji(&tok) || is_praise(&tok) {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}
