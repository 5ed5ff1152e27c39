//! Token-overlap metrics: clipped BLEU precision, ROUGE-N and ROUGE-L.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tokenize;

/// Smoothing applied to orders with zero clipped matches.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when an input was too short to contain any n-gram.
    pub degenerate: bool,
}

impl Prf {
    fn from_counts(overlap: usize, cand_total: usize, ref_total: usize) -> Self {
        let degenerate = cand_total == 0 || ref_total == 0;
        let precision = if cand_total == 0 { 0.0 } else { overlap as f64 / cand_total as f64 };
        let recall = if ref_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
        Self { precision, recall, f1: harmonic_mean(precision, recall), degenerate }
    }
}

pub(crate) fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and the candidate's n-gram total.
pub fn clipped_overlap<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap = cand.iter().map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0))).sum();
    (overlap, cand.values().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    /// Clipped precision per order; `None` where the candidate has no n-grams.
    pub precisions: Vec<Option<f64>>,
    pub brevity_penalty: f64,
    pub degenerate: bool,
}

/// Geometric mean of clipped n-gram precisions for n = 1..=max_n.
///
/// Orders where the candidate is too short to have n-grams are left out of
/// the mean. A zero match count is replaced by [`BLEU_EPSILON`].
pub fn bleu_tokens<T: AsRef<str>>(candidate: &[T], reference: &[T], max_n: usize, brevity_penalty: bool) -> BleuScore {
    if candidate.is_empty() || reference.is_empty() {
        return BleuScore { value: 0.0, precisions: vec![None; max_n], brevity_penalty: 1.0, degenerate: true };
    }
    let mut precisions = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (overlap, total) = clipped_overlap(candidate, reference, n);
        if total == 0 {
            precisions.push(None);
            continue;
        }
        let numerator = if overlap == 0 { BLEU_EPSILON } else { overlap as f64 };
        let p = numerator / total as f64;
        precisions.push(Some(overlap as f64 / total as f64));
        log_sum += p.ln();
        orders += 1;
    }
    let bp = if brevity_penalty && candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    let value = bp * (log_sum / orders as f64).exp();
    BleuScore { value: value.clamp(0.0, 1.0), precisions, brevity_penalty: bp, degenerate: false }
}

pub fn bleu_precision(candidate: &str, reference: &str, max_n: usize) -> BleuScore {
    bleu_tokens(&tokenize(candidate), &tokenize(reference), max_n, false)
}

pub fn rouge_n_tokens<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    let (overlap, cand_total) = clipped_overlap(candidate, reference, n);
    let ref_total = if reference.len() < n { 0 } else { reference.len() - n + 1 };
    Prf::from_counts(overlap, cand_total, ref_total)
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Prf {
    rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_tokens<T: AsRef<str> + PartialEq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}
