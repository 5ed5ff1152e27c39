use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::project::{failure_log, generation_log, score_log, ExperimentStatus, Manifest, Progress, MANIFEST_FILE};
use super::records::{read_jsonl, CorruptLine};
use crate::error::{Error, Result};
use crate::model::{GenerationRecord, ScoreFailure, ScoreRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentView {
    pub experiment_key: String,
    pub status: ExperimentStatus,
    pub model: String,
    pub perturbation_level: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_key: Option<String>,
    /// Recounted from the generation log.
    pub generation: Progress,
    /// Recounted from the score and failure logs.
    pub scores: BTreeMap<String, Progress>,
    pub logs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectStatus {
    pub root: PathBuf,
    pub experiments: Vec<ExperimentView>,
    pub corrupt: Vec<CorruptLine>,
    /// Logs ending in an incomplete line, repaired on the next append.
    pub torn: Vec<PathBuf>,
}

/// Read-only view of a project; does not take the lock, so it works while
/// a run is in progress.
pub fn status(root: &Path) -> Result<ProjectStatus> {
    if !root.join(MANIFEST_FILE).is_file() {
        return Err(Error::ProjectNotFound(root.to_path_buf()));
    }
    let manifest = Manifest::read(root)?;
    let mut out = ProjectStatus { root: root.to_path_buf(), experiments: vec![], corrupt: vec![], torn: vec![] };
    for (key, entry) in &manifest.experiments {
        let gen_path = root.join(generation_log(key));
        let gens = read_jsonl::<GenerationRecord>(&gen_path)?;
        note(&mut out, &gen_path, gens.corrupt, gens.torn_tail);
        let gen_latest = latest(gens.items.iter().map(|r| (r.sample_id.as_str(), r.is_succeeded())));
        let mut generation = Progress { total: entry.generation.total, ..Default::default() };
        for ok in gen_latest.values() {
            if *ok {
                generation.succeeded += 1;
            } else {
                generation.failed += 1;
            }
        }
        generation.total = generation.total.max(gen_latest.len());

        let mut scores = BTreeMap::new();
        let mut logs = vec![gen_path];
        for ev in &entry.config.evaluators {
            let metric = ev.metric_name();
            let score_path = root.join(score_log(key, &metric));
            let fail_path = root.join(failure_log(key, &metric));
            let s = read_jsonl::<ScoreRecord>(&score_path)?;
            let f = read_jsonl::<ScoreFailure>(&fail_path)?;
            note(&mut out, &score_path, s.corrupt, s.torn_tail);
            note(&mut out, &fail_path, f.corrupt, f.torn_tail);
            let scored: HashSet<&str> = s.items.iter().map(|r| r.sample_id.as_str()).collect();
            let failed = latest(
                f.items
                    .iter()
                    .filter(|r| !scored.contains(r.sample_id.as_str()))
                    .map(|r| (r.sample_id.as_str(), r.degenerate)),
            );
            scores.insert(
                metric,
                Progress {
                    total: generation.succeeded,
                    succeeded: scored.len(),
                    failed: failed.len(),
                    degenerate: failed.values().filter(|d| **d).count(),
                },
            );
            logs.extend([score_path, fail_path]);
        }
        out.experiments.push(ExperimentView {
            experiment_key: key.clone(),
            status: entry.status,
            model: entry.config.producing_model().model_name.clone(),
            perturbation_level: entry.config.perturbation_level,
            source_key: entry.source_key.clone(),
            generation,
            scores,
            logs,
            error: entry.error.clone(),
        });
    }
    Ok(out)
}

fn latest<'a, T>(items: impl Iterator<Item = (&'a str, T)>) -> BTreeMap<&'a str, T> {
    items.collect()
}

fn note(out: &mut ProjectStatus, path: &Path, corrupt: Vec<CorruptLine>, torn: bool) {
    out.corrupt.extend(corrupt);
    if torn {
        out.torn.push(path.to_path_buf());
    }
}
