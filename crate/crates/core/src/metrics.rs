//! Answer scoring: exact match and unigram F1 under SQuAD normalisation,
//! plus F1 normalised between the Full Reuse and Full Attention baselines.

use std::collections::HashMap;

/// Lowercase, drop punctuation and the articles `a`/`an`/`the`, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &gt {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &pt {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best unigram F1 over the gold answers.
pub fn f1_score(pred: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_single(pred, g)).fold(0.0, f64::max)
}

/// `(f1 - f1_fr) / (f1_fa - f1_fr) * 100`; `None` when the two baselines
/// coincide.
pub fn normalized_f1(f1: f64, f1_fr: f64, f1_fa: f64) -> Option<f64> {
    let den = f1_fa - f1_fr;
    if den.abs() < 1e-12 {
        None
    } else {
        Some((f1 - f1_fr) / den * 100.0)
    }
}

/// CSV cell for a possibly undefined normalised score.
pub fn fmt_normalized(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

/// Sum over bins of `(f - 1/B)^2 / (1/B)` for the normalised histogram `f`.
/// Zero for a perfectly flat histogram.
pub fn chi2_to_uniform(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 || hist.is_empty() {
        return 0.0;
    }
    let e = 1.0 / hist.len() as f64;
    hist.iter()
        .map(|&h| {
            let f = h as f64 / total as f64;
            (f - e) * (f - e) / e
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_normalises() {
        assert_eq!(exact_match("answer", &g(&["answer"])), 1.0);
        assert_eq!(exact_match("The Answer.", &g(&["answer"])), 1.0);
        assert_eq!(exact_match("foo", &g(&["bar"])), 0.0);
        assert_eq!(normalize_answer("  An  apple, the PIE! "), "apple pie");
    }

    #[test]
    fn f1_counts_overlap() {
        assert_eq!(f1_score("x y z", &g(&["x y z"])), 1.0);
        assert!((f1_score("x y", &g(&["y z"])) - 0.5).abs() < 1e-12);
        // "a" is an article and is dropped before counting
        assert!((f1_score("a b", &g(&["b c"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_score("", &g(&["x"])), 0.0);
        assert_eq!(f1_score("x", &g(&[""])), 0.0);
        // duplicates count once per gold occurrence
        assert!((f1_score("x x", &g(&["x"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_score("q", &g(&["w", "q"])), 1.0);
    }

    #[test]
    fn normalized_f1_worked_example() {
        let v = normalized_f1(0.781, 0.712, 0.852).unwrap();
        // printed as 49.2 (truncated)
        assert!((49.2..49.3).contains(&v), "{v}");
        assert_eq!(normalized_f1(0.852, 0.712, 0.852), Some(100.0));
        assert_eq!(normalized_f1(0.712, 0.712, 0.852), Some(0.0));
        assert_eq!(normalized_f1(0.5, 0.3, 0.3), None);
        assert_eq!(fmt_normalized(None), "undefined");
    }

    #[test]
    fn chi2_is_zero_for_flat_histograms() {
        assert_eq!(chi2_to_uniform(&[3, 3, 3]), 0.0);
        assert!((chi2_to_uniform(&[4, 0]) - 1.0).abs() < 1e-12);
        assert_eq!(chi2_to_uniform(&[]), 0.0);
    }
}
