//! Ranked-list retrieval metrics. Missing ranks count as irrelevant.

use std::collections::HashSet;

/// Fraction of the first `k` results that are relevant.
pub fn precision_at_k(relevant: &[bool], k: usize) -> f64 {
    assert!(k >= 1, "precision@k needs k >= 1");
    let hits = relevant.iter().take(k).filter(|&&r| r).count();
    hits as f64 / k as f64
}

/// Mean of precision@1 through precision@20.
pub fn avg_precision_at_20(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for k in 1..=20 {
        if relevant.get(k - 1).copied().unwrap_or(false) {
            hits += 1;
        }
        total += hits as f64 / k as f64;
    }
    total / 20.0
}

/// 1 if any ground-truth id is among the first `k` results, else 0.
pub fn recall_at_k(ranked: &[u64], ground_truth: &HashSet<u64>, k: usize) -> f64 {
    if ranked.iter().take(k).any(|id| ground_truth.contains(id)) {
        1.0
    } else {
        0.0
    }
}

/// Recall@k from relevance flags.
pub fn hit_at_k(relevant: &[bool], k: usize) -> f64 {
    if relevant.iter().take(k).any(|&r| r) {
        1.0
    } else {
        0.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
