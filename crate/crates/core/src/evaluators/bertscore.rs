//! Greedy token-embedding matching (BERTScore without idf or rescaling).

use std::collections::HashMap;
use std::sync::Arc;

use super::ngram::{harmonic_mean, Prf};
use super::tokenize;
use crate::error::{Error, Result};
use crate::model::EmbedderSpec;

/// Supplies one vector per token of a text.
pub trait TokenEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> std::result::Result<Vec<Vec<f64>>, String>;
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b && a.iter().any(|x| *x != 0.0) {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn greedy(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let total: f64 = from.iter().map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max)).sum();
    (total / from.len() as f64).max(0.0)
}

/// Precision averages each candidate token's best match in the reference,
/// recall the reverse. Negative similarities are clamped to zero.
pub fn bert_score_vectors(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf { precision: 0.0, recall: 0.0, f1: 0.0, degenerate: true };
    }
    let precision = greedy(candidate, reference);
    let recall = greedy(reference, candidate);
    Prf { precision, recall, f1: harmonic_mean(precision, recall), degenerate: false }
}

pub fn bert_score(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> std::result::Result<Prf, String> {
    Ok(bert_score_vectors(&embedder.embed(candidate)?, &embedder.embed(reference)?))
}

/// Offline embedder: hashed character trigrams of each token, mixed with
/// its neighbours so that word order has some influence.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    context_weight: f64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, context_weight: f64) -> Self {
        Self { dim: dim.max(1), context_weight }
    }

    fn fnv1a(bytes: &[u8]) -> u64 {
        bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let padded: Vec<char> = format!("<{token}>").chars().collect();
        let mut v = vec![0.0; self.dim];
        for gram in padded.windows(3.min(padded.len())) {
            let s: String = gram.iter().collect();
            let h = Self::fnv1a(s.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        v
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl TokenEmbedder for HashingEmbedder {
    fn embed(&self, text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
        let base: Vec<Vec<f64>> = tokenize(text).iter().map(|t| normalize(self.token_vector(t))).collect();
        Ok((0..base.len())
            .map(|i| {
                let mut v = base[i].clone();
                for j in [i.wrapping_sub(1), i + 1] {
                    if let Some(n) = base.get(j) {
                        v.iter_mut().zip(n).for_each(|(x, y)| *x += self.context_weight * 0.5 * y);
                    }
                }
                normalize(v)
            })
            .collect())
    }
}

/// Looks tokens up in a fixed table; unknown tokens are an error.
#[derive(Debug, Clone, Default)]
pub struct FixedEmbedder {
    vectors: HashMap<String, Vec<f64>>,
}

impl FixedEmbedder {
    pub fn new(vectors: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        Self { vectors: vectors.into_iter().collect() }
    }
}

impl TokenEmbedder for FixedEmbedder {
    fn embed(&self, text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
        tokenize(text)
            .into_iter()
            .map(|t| self.vectors.get(&t).cloned().ok_or_else(|| format!("no embedding for token '{t}'")))
            .collect()
    }
}

/// Named embedders available to `registered` embedder specs.
#[derive(Clone, Default)]
pub struct EmbedderRegistry {
    named: HashMap<String, Arc<dyn TokenEmbedder>>,
}

impl EmbedderRegistry {
    pub fn register(&mut self, name: impl Into<String>, embedder: Arc<dyn TokenEmbedder>) {
        self.named.insert(name.into(), embedder);
    }

    pub fn resolve(&self, spec: &EmbedderSpec) -> Result<Arc<dyn TokenEmbedder>> {
        match spec {
            EmbedderSpec::Hashing { dim, context_weight } => Ok(Arc::new(HashingEmbedder::new(*dim, *context_weight))),
            EmbedderSpec::Registered { name } => self.named.get(name).cloned().ok_or_else(|| {
                let mut known: Vec<_> = self.named.keys().cloned().collect();
                known.sort();
                Error::Config(format!("unknown embedder '{name}' (registered: {})", known.join(", ")))
            }),
        }
    }
}
