//! Surface-overlap metrics on lowercase whitespace tokens.

use std::collections::HashMap;

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_beta(candidate, reference, 1.0)
}

/// ROUGE-L F-measure with recall weighted by `beta` (1 is balanced F1).
pub fn rouge_l_beta(candidate: &str, reference: &str, beta: f64) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU up to 4-grams with uniform weights, add-one smoothing
/// for n >= 2 and the standard brevity penalty.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(&c, n);
        let refc = ngram_counts(&r, n);
        let matched: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let total = c.len().saturating_sub(n - 1);
        let (num, den) = if n == 1 {
            (matched as f64, total as f64)
        } else {
            (matched as f64 + 1.0, total as f64 + 1.0)
        };
        if num == 0.0 {
            return 0.0;
        }
        log_sum += 0.25 * (num / den).ln();
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * log_sum.exp()
}
