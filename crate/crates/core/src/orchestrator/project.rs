use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::records::{append_jsonl, read_jsonl, write_atomic, CorruptLine};
use crate::error::{Error, Result};
use crate::model::{ExperimentConfig, GenerationRecord, ScoreFailure, ScoreRecord};

pub const MANIFEST_FILE: &str = "project.json";
pub const LOCK_FILE: &str = ".lock";
const MANIFEST_VERSION: u32 = 1;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always reports the same instant; makes record files reproducible.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    Pending,
    Running,
    Succeeded,
    PartiallyFailed,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// Failures caused by degenerate inputs; included in `failed`.
    #[serde(default)]
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config: ExperimentConfig,
    /// Level-0 experiment this one perturbs, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_key: Option<String>,
    pub status: ExperimentStatus,
    #[serde(default)]
    pub generation: Progress,
    #[serde(default)]
    pub scores: BTreeMap<String, Progress>,
    #[serde(default)]
    pub logs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub experiments: BTreeMap<String, ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { version: MANIFEST_VERSION, experiments: BTreeMap::new() }
    }
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
    }
}

/// Relative path of an experiment's generation log.
pub fn generation_log(key: &str) -> String {
    format!("generations/{key}.jsonl")
}

/// Relative path of an experiment's score log for one metric.
pub fn score_log(key: &str, metric: &str) -> String {
    format!("scores/{key}/{metric}.jsonl")
}

pub fn failure_log(key: &str, metric: &str) -> String {
    format!("scores/{key}/{metric}.failures.jsonl")
}

/// Exclusive handle on a project directory. Holds the `.lock` file for its
/// lifetime; all writes go through it.
#[derive(Debug)]
pub struct Project {
    root: PathBuf,
    manifest: Manifest,
    _lock: File,
}

impl Project {
    /// Opens `root`, creating the project if needed.
    pub fn init(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let lock = Self::lock(&root)?;
        let manifest = if root.join(MANIFEST_FILE).exists() {
            Manifest::read(&root)?
        } else {
            let m = Manifest::default();
            write_atomic(&root.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&m)?)?;
            m
        };
        Ok(Self { root, manifest, _lock: lock })
    }

    /// Opens an existing project.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.join(MANIFEST_FILE).is_file() {
            return Err(Error::ProjectNotFound(root));
        }
        let lock = Self::lock(&root)?;
        let manifest = Manifest::read(&root)?;
        Ok(Self { root, manifest, _lock: lock })
    }

    fn lock(root: &Path) -> Result<File> {
        let path = root.join(LOCK_FILE);
        let file =
            OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(file),
            Err(TryLockError::WouldBlock) => Err(Error::ProjectLocked(root.to_path_buf())),
            Err(TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn entry(&self, key: &str) -> Option<&ManifestEntry> {
        self.manifest.experiments.get(key)
    }

    /// Applies `f` and persists the manifest atomically.
    pub fn update_manifest(&mut self, f: impl FnOnce(&mut Manifest)) -> Result<()> {
        let mut next = self.manifest.clone();
        f(&mut next);
        write_atomic(&self.root.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&next)?)?;
        self.manifest = next;
        Ok(())
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }

    pub fn append_generation(&self, record: &GenerationRecord) -> Result<()> {
        append_jsonl(&self.path(&generation_log(&record.experiment_key)), record)
    }

    pub fn append_score(&self, record: &ScoreRecord) -> Result<()> {
        append_jsonl(&self.path(&score_log(&record.experiment_key, &record.metric_name)), record)
    }

    pub fn append_failure(&self, failure: &ScoreFailure) -> Result<()> {
        append_jsonl(&self.path(&failure_log(&failure.experiment_key, &failure.metric_name)), failure)
    }

    /// Latest generation record per sample, in order of first appearance.
    pub fn load_generations(&self, key: &str) -> Result<Vec<GenerationRecord>> {
        load_generations_at(&self.root, key)
    }

    /// Latest score per sample for one metric.
    pub fn load_scores(&self, key: &str, metric: &str) -> Result<Vec<ScoreRecord>> {
        load_scores_at(&self.root, key, metric)
    }

    /// Metric names with a score log for `key`.
    pub fn scored_metrics(&self, key: &str) -> Result<Vec<String>> {
        scored_metrics_at(&self.root, key)
    }

    /// Deletes all generation and score files of an experiment.
    pub fn reset_experiment(&self, key: &str) -> Result<()> {
        let gen = self.path(&generation_log(key));
        if gen.exists() {
            fs::remove_file(&gen).map_err(|e| Error::io(&gen, e))?;
        }
        self.reset_scores(key, None)
    }

    /// Deletes score files of an experiment, for one metric or all.
    pub fn reset_scores(&self, key: &str, metric: Option<&str>) -> Result<()> {
        match metric {
            Some(m) => {
                for rel in [score_log(key, m), failure_log(key, m)] {
                    let p = self.path(&rel);
                    if p.exists() {
                        fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
            }
            None => {
                let dir = self.root.join("scores").join(key);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
            }
        }
        Ok(())
    }
}

fn latest_by_sample<T>(items: Vec<T>, id: impl Fn(&T) -> &str) -> Vec<T> {
    let mut order: Vec<String> = Vec::new();
    let mut latest: BTreeMap<String, T> = BTreeMap::new();
    for item in items {
        let sid = id(&item).to_string();
        if !latest.contains_key(&sid) {
            order.push(sid.clone());
        }
        latest.insert(sid, item);
    }
    order.into_iter().filter_map(|sid| latest.remove(&sid)).collect()
}

fn warn_corrupt(corrupt: &[CorruptLine]) {
    for c in corrupt {
        log::warn!("skipping corrupt record {}:{}: {}", c.path.display(), c.line, c.error);
    }
}

pub(crate) fn load_generations_at(root: &Path, key: &str) -> Result<Vec<GenerationRecord>> {
    let contents = read_jsonl::<GenerationRecord>(&root.join(generation_log(key)))?;
    warn_corrupt(&contents.corrupt);
    Ok(latest_by_sample(contents.items, |r| &r.sample_id))
}

pub(crate) fn load_scores_at(root: &Path, key: &str, metric: &str) -> Result<Vec<ScoreRecord>> {
    let contents = read_jsonl::<ScoreRecord>(&root.join(score_log(key, metric)))?;
    warn_corrupt(&contents.corrupt);
    Ok(latest_by_sample(contents.items, |r| &r.sample_id))
}

pub(crate) fn scored_metrics_at(root: &Path, key: &str) -> Result<Vec<String>> {
    let dir = root.join("scores").join(key);
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&dir, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(metric) = name.strip_suffix(".jsonl") {
            if !metric.ends_with(".failures") {
                out.push(metric.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}
