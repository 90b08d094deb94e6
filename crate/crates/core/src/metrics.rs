//! Text quality metrics and speedup arithmetic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tokenizer::EOT;

fn bigrams<T: Eq + std::hash::Hash>(items: &[T]) -> HashMap<(&T, &T), usize> {
    let mut counts = HashMap::new();
    for w in items.windows(2) {
        *counts.entry((&w[0], &w[1])).or_insert(0) += 1;
    }
    counts
}

/// Bigram-overlap F1 with clipped multiset counts. Zero when either side
/// has fewer than two items.
pub fn rouge2_f1_items<T: Eq + std::hash::Hash>(reference: &[T], hypothesis: &[T]) -> f64 {
    if reference.len() < 2 || hypothesis.len() < 2 {
        return 0.0;
    }
    let r = bigrams(reference);
    let h = bigrams(hypothesis);
    let overlap: usize = h
        .iter()
        .map(|(k, &c)| c.min(r.get(k).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / (hypothesis.len() - 1) as f64;
    let recall = overlap as f64 / (reference.len() - 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// ROUGE-2 F1 over whitespace-separated words, no stemming.
pub fn rouge2_f1(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    rouge2_f1_items(&r, &h)
}

fn trim_end(tokens: &[u32]) -> &[u32] {
    let mut end = tokens.len();
    while end > 0 && tokens[end - 1] == EOT {
        end -= 1;
    }
    &tokens[..end]
}

/// 1 iff the sequences agree after dropping trailing end-of-text ids.
pub fn exact_match(reference: &[u32], hypothesis: &[u32]) -> u8 {
    u8::from(trim_end(reference) == trim_end(hypothesis))
}

/// Per-token-time speedup of `new_ms` over `base_ms`.
pub fn speedup(base_ms_per_token: f64, new_ms_per_token: f64) -> Result<f64> {
    if new_ms_per_token == 0.0 || !new_ms_per_token.is_finite() || !base_ms_per_token.is_finite() {
        return Err(Error::Config(format!(
            "speedup undefined for {base_ms_per_token} / {new_ms_per_token} ms per token"
        )));
    }
    Ok(base_ms_per_token / new_ms_per_token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge2_f1("a b c d", "a b c d"), 1.0);
        assert_eq!(rouge2_f1("a b c", "x y z"), 0.0);
        let f = rouge2_f1("the cat sat on mat", "the cat on mat");
        assert!((f - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge2_f1("a", "a"), 0.0);
        assert_eq!(rouge2_f1("", "a b"), 0.0);
        // clipping: hypothesis repeats a bigram the reference has once
        let f = rouge2_f1("a b c", "a b a b");
        let (p, r) = (1.0 / 3.0, 1.0 / 2.0);
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match(&[1, 2, 3], &[1, 2, 3]), 1);
        assert_eq!(exact_match(&[1, 2, 3], &[1, 2, 4]), 0);
        assert_eq!(exact_match(&[], &[]), 1);
        assert_eq!(exact_match(&[1, 2, EOT], &[1, 2]), 1);
        assert_eq!(exact_match(&[1, 2, EOT], &[1, 2, EOT, EOT]), 1);
    }

    #[test]
    fn speedup_cases() {
        assert_eq!(speedup(36.0, 18.0).unwrap(), 2.0);
        assert_eq!(speedup(5.0, 5.0).unwrap(), 1.0);
        assert!(speedup(1.0, 0.0).is_err());
        assert!((127.9f64 / 62.7 - 2.04).abs() < 0.005);
    }

    proptest! {
        #[test]
        fn symmetric_for_equal_lengths(
            a in prop::collection::vec(0u8..4, 0..12),
            b in prop::collection::vec(0u8..4, 0..12),
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let x = rouge2_f1_items(a, b);
            let y = rouge2_f1_items(b, a);
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
