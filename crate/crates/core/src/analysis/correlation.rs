use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    #[default]
    Spearman,
    Kendall,
    Pearson,
}

impl std::str::FromStr for CorrelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spearman" => Ok(Self::Spearman),
            "kendall" | "kendall_tau_b" => Ok(Self::Kendall),
            "pearson" => Ok(Self::Pearson),
            other => Err(Error::Argument(format!("unknown correlation '{other}' (spearman, kendall, pearson)"))),
        }
    }
}

/// A correlation value, or `Degenerate` when either input has no variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    Value(f64),
    Degenerate,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(v),
            Correlation::Degenerate => None,
        }
    }
}

fn check(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Argument(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 paired values, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Argument("correlation inputs must be finite".into()));
    }
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    check(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::Degenerate);
    }
    Ok(Correlation::Value((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// 1-based ranks; tied values get the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    check(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Kendall's tau-b, which corrects for ties in either input.
pub fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    check(xs, ys)?;
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let dx = xs[i].total_cmp(&xs[j]) as i64;
            let dy = ys[i].total_cmp(&ys[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom = (((concordant + discordant + tie_x) * (concordant + discordant + tie_y)) as f64).sqrt();
    if denom == 0.0 {
        return Ok(Correlation::Degenerate);
    }
    Ok(Correlation::Value(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0)))
}

pub fn correlate(kind: CorrelationKind, xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    match kind {
        CorrelationKind::Spearman => spearman(xs, ys),
        CorrelationKind::Kendall => kendall_tau_b(xs, ys),
        CorrelationKind::Pearson => pearson(xs, ys),
    }
}

/// Minimum shared samples for a metric pair to be correlated.
pub const MIN_PAIR_SAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub metric_a: String,
    pub metric_b: String,
    /// `None` when unavailable (too few shared samples or no variance).
    pub correlation: Option<f64>,
    pub n_samples: usize,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub kind: CorrelationKind,
    pub metrics: Vec<String>,
    /// Row-major, `metrics.len()` squared cells.
    pub cells: Vec<CorrelationCell>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<&CorrelationCell> {
        let i = self.metrics.iter().position(|m| m == a)?;
        let j = self.metrics.iter().position(|m| m == b)?;
        self.cells.get(i * self.metrics.len() + j)
    }
}

/// Pairwise correlation of metrics over the samples both have scored.
pub fn correlate_metrics(
    scores: &BTreeMap<String, BTreeMap<String, f64>>,
    kind: CorrelationKind,
) -> Result<CorrelationMatrix> {
    let metrics: Vec<String> = scores.keys().cloned().collect();
    if metrics.len() < 2 {
        return Err(Error::AnalysisInput(format!("need at least 2 metrics to correlate, got {}", metrics.len())));
    }
    let mut cells = Vec::with_capacity(metrics.len() * metrics.len());
    for a in &metrics {
        for b in &metrics {
            let (sa, sb) = (&scores[a], &scores[b]);
            let (xs, ys): (Vec<f64>, Vec<f64>) = sa.iter().filter_map(|(id, x)| sb.get(id).map(|y| (*x, *y))).unzip();
            let n = xs.len();
            let (correlation, status) = if a == b {
                (Some(1.0), "ok")
            } else if n < MIN_PAIR_SAMPLES {
                (None, "insufficient_overlap")
            } else {
                match correlate(kind, &xs, &ys)? {
                    Correlation::Value(v) => (Some(v), "ok"),
                    Correlation::Degenerate => (None, "degenerate"),
                }
            };
            cells.push(CorrelationCell {
                metric_a: a.clone(),
                metric_b: b.clone(),
                correlation,
                n_samples: n,
                status: status.into(),
            });
        }
    }
    Ok(CorrelationMatrix { kind, metrics, cells })
}
