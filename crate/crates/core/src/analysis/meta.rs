use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::correlation::{correlate, Correlation, CorrelationKind};
use crate::error::Result;
use crate::generation::PerturbationLadder;
use crate::model::MAX_PERTURBATION_LEVEL;

/// Scores by metric, then by (source experiment, sample, level).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelScores {
    by_metric: BTreeMap<String, BTreeMap<(String, String, u8), f64>>,
}

impl LevelScores {
    pub fn insert(&mut self, metric: &str, source_key: &str, sample_id: &str, level: u8, value: f64) {
        self.by_metric
            .entry(metric.to_string())
            .or_default()
            .insert((source_key.to_string(), sample_id.to_string(), level), value);
    }

    pub fn metrics(&self) -> impl Iterator<Item = &str> {
        self.by_metric.keys().map(String::as_str)
    }

    pub fn get(&self, metric: &str, source_key: &str, sample_id: &str, level: u8) -> Option<f64> {
        self.by_metric.get(metric)?.get(&(source_key.to_string(), sample_id.to_string(), level)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCorrelation {
    pub source_experiment_key: String,
    pub sample_id: String,
    /// `None` when the sample's scores have no variance across levels.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedSample {
    pub source_experiment_key: String,
    pub sample_id: String,
    pub missing_levels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEvalResult {
    pub metric_name: String,
    /// Mean over non-degenerate samples; `None` if every sample was degenerate.
    pub avg_correlation: Option<f64>,
    /// Samples with scores at every level (degenerate ones included).
    pub n_samples: usize,
    pub n_degenerate: usize,
    pub per_sample: Vec<SampleCorrelation>,
    pub excluded: Vec<ExcludedSample>,
}

impl MetaEvalResult {
    pub fn is_degenerate(&self) -> bool {
        self.avg_correlation.is_none()
    }
}

/// Correlates each ladder's scores over levels 0..=3 with the ground-truth
/// quality order (level 0 best) and averages per metric.
///
/// Results are ordered by descending average correlation; metrics without
/// any non-degenerate sample come last, by name.
pub fn meta_evaluate(
    ladders: &[PerturbationLadder],
    scores: &LevelScores,
    kind: CorrelationKind,
) -> Result<Vec<MetaEvalResult>> {
    let levels: Vec<u8> = (0..=MAX_PERTURBATION_LEVEL).collect();
    let quality: Vec<f64> = levels.iter().map(|l| (MAX_PERTURBATION_LEVEL - l) as f64).collect();
    let mut out = Vec::new();
    for metric in scores.metrics() {
        let mut per_sample = Vec::new();
        let mut excluded = Vec::new();
        for ladder in ladders {
            let src = &ladder.source_experiment_key;
            let values: Vec<Option<f64>> =
                levels.iter().map(|&l| scores.get(metric, src, &ladder.sample_id, l)).collect();
            let missing: Vec<u8> = levels.iter().zip(&values).filter(|(_, v)| v.is_none()).map(|(l, _)| *l).collect();
            if !missing.is_empty() {
                excluded.push(ExcludedSample {
                    source_experiment_key: src.clone(),
                    sample_id: ladder.sample_id.clone(),
                    missing_levels: missing,
                });
                continue;
            }
            let xs: Vec<f64> = values.into_iter().flatten().collect();
            per_sample.push(SampleCorrelation {
                source_experiment_key: src.clone(),
                sample_id: ladder.sample_id.clone(),
                correlation: match correlate(kind, &xs, &quality)? {
                    Correlation::Value(v) => Some(v),
                    Correlation::Degenerate => None,
                },
            });
        }
        let valid: Vec<f64> = per_sample.iter().filter_map(|s| s.correlation).collect();
        let avg_correlation = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        out.push(MetaEvalResult {
            metric_name: metric.to_string(),
            avg_correlation,
            n_samples: per_sample.len(),
            n_degenerate: per_sample.len() - valid.len(),
            per_sample,
            excluded,
        });
    }
    out.sort_by(|a, b| match (a.avg_correlation, b.avg_correlation) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.metric_name.cmp(&b.metric_name)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.metric_name.cmp(&b.metric_name),
    });
    Ok(out)
}
