//! Pipeline stages as library calls. The CLI is a thin adapter over these.

mod config;
mod serve;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use config::{load_config, parse_config, MetaSettings, PipelineConfig, RuntimeSettings, BUILTIN_TEMPLATES};
pub use serve::{ApiServer, Response, GUIDE_KB};

use crate::analysis::{
    correlate_metrics, correlation_table, meta_evaluate, meta_table, tabulate, CellValue, CorrelationKind,
    CorrelationMatrix, LevelScores, MetaEvalResult, ResultsMatrix, ResultsRow, Table,
};
use crate::datasets::DatasetLoader;
use crate::error::{Error, Result};
use crate::generation::{build_ladders, LadderSet};
use crate::model::ExperimentConfig;
use crate::orchestrator::{
    execute, plan_schedule, records::write_atomic, Clock, ExecuteOptions, Project, ProjectStatus, RunReport, Runtime,
};
use crate::provider::Gateway;

/// Which experiments a run covers and what it does with them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Generation and scoring of every selected experiment.
    Run,
    /// Perturbation runs (levels 1..=3) and their scoring.
    Perturb,
    /// Scoring of existing generations only.
    Score,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
    pub levels: Option<Vec<u8>>,
    pub metrics: Option<Vec<String>>,
}

/// Providers, dataset loader and clock for a config, with relative paths
/// resolved against the config file's directory and the dataset cache
/// under `<project>/cache` unless `EVAL_CACHE_DIR` is set.
pub fn runtime_for(config: &PipelineConfig, project_root: &Path) -> Runtime {
    let rt = &config.runtime;
    let gateway = Gateway::new(rt.retry.clone(), rt.max_in_flight)
        .with_timeout(Duration::from_secs(rt.timeout_secs))
        .with_base_dir(&config.base_dir);
    let loader = DatasetLoader::from_env(project_root.join("cache")).with_base_dir(&config.base_dir);
    Runtime::new(gateway, loader)
}

/// Experiments of `config` selected for `stage` and the level filter.
pub fn select(config: &PipelineConfig, stage: Stage, levels: Option<&[u8]>) -> Vec<ExperimentConfig> {
    config
        .experiments
        .iter()
        .filter(|c| stage != Stage::Perturb || c.perturbation_level > 0)
        .filter(|c| levels.is_none_or(|l| l.contains(&c.perturbation_level)))
        .cloned()
        .collect()
}

/// Runs one stage against the project at `project_root`, creating it if
/// needed.
pub fn run_stage(
    config: &PipelineConfig,
    project_root: &Path,
    stage: Stage,
    options: &RunOptions,
    runtime: &Runtime,
) -> Result<RunReport> {
    let configs = select(config, stage, options.levels.as_deref());
    if configs.is_empty() {
        return Err(Error::Argument("no experiments match the requested levels".into()));
    }
    if stage == Stage::Score {
        for (i, c) in configs.iter().enumerate() {
            c.validate_for_scoring().map_err(|e| match e {
                Error::Invalid(issues) => {
                    Error::Invalid(issues.into_iter().map(|x| x.under(&format!("experiments[{i}]"))).collect())
                }
                other => other,
            })?;
        }
    }
    if let Some(metrics) = &options.metrics {
        let known: Vec<String> = configs.iter().flat_map(|c| c.evaluators.iter().map(|e| e.metric_name())).collect();
        if let Some(m) = metrics.iter().find(|m| !known.contains(m)) {
            return Err(Error::Argument(format!("metric '{m}' is not configured; configured: {}", known.join(", "))));
        }
    }
    let plan = plan_schedule(&configs);
    let mut project = Project::init(project_root)?;
    let exec = ExecuteOptions {
        resume: options.resume,
        generate: stage != Stage::Score,
        score: true,
        metrics: options.metrics.clone(),
    };
    execute(&configs, &plan, &mut project, runtime, &exec)
}

/// One-line-per-experiment summary of a run.
pub fn report_table(report: &RunReport) -> Table {
    let headers =
        ["experiment_key", "status", "generated", "failed", "total", "metrics", "errors"].map(String::from).to_vec();
    let rows: Vec<Vec<CellValue>> = report
        .experiments
        .iter()
        .map(|e| {
            let complete = e.scores.values().filter(|p| p.succeeded == p.total).count();
            let incomplete: Vec<String> = e
                .scores
                .iter()
                .filter(|(_, p)| p.succeeded < p.total)
                .map(|(m, p)| format!("{m}={}/{}", p.succeeded, p.total))
                .collect();
            let metrics = std::iter::once(format!("{complete}/{} complete", e.scores.len())).chain(incomplete);
            vec![
                CellValue::Text(e.experiment_key.clone()),
                CellValue::Text(status_name(e.status)),
                CellValue::Int(e.generation.succeeded as i64),
                CellValue::Int(e.generation.failed as i64),
                CellValue::Int(e.generation.total as i64),
                CellValue::Text(metrics.collect::<Vec<_>>().join(" ")),
                CellValue::Text(e.errors.join("; ")),
            ]
        })
        .collect();
    let marks = vec![vec![None; headers.len()]; rows.len()];
    Table { headers, rows, marks, text_columns: vec![] }
}

fn status_name<T: Serialize>(status: T) -> String {
    serde_json::to_value(status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Results tables of an analysis run.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub matrix: ResultsMatrix,
    pub results: Table,
    pub correlation: CorrelationMatrix,
    pub correlation_table: Table,
}

/// Mean scores of every unperturbed experiment and the sample-level
/// correlation between metrics. Writes `analysis/results.{csv,json}` and
/// `analysis/metric_correlation.{csv,json}`.
pub fn analyse(project_root: &Path, kind: CorrelationKind) -> Result<Analysis> {
    let project = Project::open(project_root)?;
    let mut matrix = ResultsMatrix::default();
    let mut per_sample: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut entries: Vec<(&String, &crate::orchestrator::ManifestEntry)> =
        project.manifest().experiments.iter().filter(|(_, e)| e.config.perturbation_level == 0).collect();
    entries.sort_by_key(|(k, e)| {
        (
            e.config.dataset.name.clone(),
            e.config.model.model_name.clone(),
            e.config.generation.name.clone(),
            (*k).clone(),
        )
    });
    if entries.is_empty() {
        return Err(Error::AnalysisInput("project has no unperturbed experiments".into()));
    }
    for (key, entry) in entries {
        let row = matrix.add_row(ResultsRow {
            experiment_key: key.clone(),
            dataset: entry.config.dataset.name.clone(),
            model: entry.config.model.model_name.clone(),
            generation: entry.config.generation.name.clone(),
            perturbation_level: 0,
        });
        for metric in metric_order(&project, key, &entry.config)? {
            let scores = project.load_scores(key, &metric)?;
            let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
            matrix.set_scores(row, &metric, &values);
            let column = per_sample.entry(metric).or_default();
            for s in scores {
                column.insert(format!("{key}/{}", s.sample_id), s.value);
            }
        }
    }
    let results = tabulate(&matrix);
    let correlation = correlate_metrics(&per_sample, kind)?;
    let correlation_table = correlation_table(&correlation);
    let dir = project.analysis_dir();
    results.write(&dir, "results")?;
    correlation_table.write(&dir, "metric_correlation")?;
    Ok(Analysis { matrix, results, correlation, correlation_table })
}

/// Configured metrics in config order, then any other scored metrics
/// (e.g. imported human ratings) by name.
fn metric_order(project: &Project, key: &str, config: &ExperimentConfig) -> Result<Vec<String>> {
    let mut out: Vec<String> = config.evaluators.iter().map(|e| e.metric_name()).collect();
    for m in project.scored_metrics(key)? {
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReport {
    pub correlation: CorrelationKind,
    pub results: Vec<MetaEvalResult>,
    pub ladder_sets: Vec<LadderSet>,
    /// Sources skipped for lack of complete ladders, with the reason.
    pub skipped_sources: Vec<(String, String)>,
}

impl MetaReport {
    pub fn table(&self) -> Table {
        meta_table(&self.results)
    }
}

/// Meta-evaluates every metric scored on all four levels of the project's
/// perturbation ladders. Writes `analysis/meta_eval.{csv,json}` and the
/// per-sample detail in `analysis/meta_eval_samples.json`.
pub fn meta(project_root: &Path, kind: CorrelationKind, metrics: Option<&[String]>) -> Result<MetaReport> {
    let project = Project::open(project_root)?;
    let mut scores = LevelScores::default();
    let mut ladders = Vec::new();
    let mut ladder_sets = Vec::new();
    let mut skipped = Vec::new();
    let sources: Vec<String> = project
        .manifest()
        .experiments
        .iter()
        .filter(|(_, e)| e.config.perturbation_level == 0)
        .map(|(k, _)| k.clone())
        .collect();
    for source in sources {
        let set = match build_ladders(&project, &source) {
            Ok(s) => s,
            Err(Error::AnalysisInput(reason)) => {
                log::info!("skipping source {source}: {reason}");
                skipped.push((source, reason));
                continue;
            }
            Err(e) => return Err(e),
        };
        for (&level, key) in &set.level_keys {
            for metric in project.scored_metrics(key)? {
                if metrics.is_some_and(|m| !m.contains(&metric)) {
                    continue;
                }
                for s in project.load_scores(key, &metric)? {
                    scores.insert(&metric, &source, &s.sample_id, level, s.value);
                }
            }
        }
        ladders.extend(set.ladders.iter().cloned());
        ladder_sets.push(set);
    }
    if ladders.is_empty() {
        return Err(Error::AnalysisInput(
            "no complete perturbation ladders; run generation and all perturbation levels first".into(),
        ));
    }
    let results = meta_evaluate(&ladders, &scores, kind)?;
    let report = MetaReport { correlation: kind, results, ladder_sets, skipped_sources: skipped };
    let dir = project.analysis_dir();
    report.table().write(&dir, "meta_eval")?;
    write_atomic(&dir.join("meta_eval_samples.json"), &serde_json::to_vec_pretty(&report.results)?)?;
    Ok(report)
}

/// Read-only project status.
pub fn status(project_root: &Path) -> Result<ProjectStatus> {
    crate::orchestrator::status(project_root)
}

/// Status as a table: one row per experiment.
pub fn status_table(status: &ProjectStatus) -> Table {
    let headers = ["experiment_key", "model", "perturbation_level", "status", "generated", "failed", "total", "scores"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<CellValue>> = status
        .experiments
        .iter()
        .map(|e| {
            let scores: Vec<String> = e
                .scores
                .iter()
                .map(|(m, p)| {
                    let mut s = format!("{m}={}/{}", p.succeeded, p.total);
                    if p.failed > 0 {
                        s.push_str(&format!(" ({} failed)", p.failed));
                    }
                    s
                })
                .collect();
            vec![
                CellValue::Text(e.experiment_key.clone()),
                CellValue::Text(e.model.clone()),
                CellValue::Int(e.perturbation_level as i64),
                CellValue::Text(status_name(e.status)),
                CellValue::Int(e.generation.succeeded as i64),
                CellValue::Int(e.generation.failed as i64),
                CellValue::Int(e.generation.total as i64),
                CellValue::Text(scores.join(", ")),
            ]
        })
        .collect();
    let marks = vec![vec![None; headers.len()]; rows.len()];
    Table { headers, rows, marks, text_columns: vec![] }
}

/// Plain-text status: the table, then any damaged record files.
pub fn status_text(status: &ProjectStatus) -> String {
    let mut out = status_table(status).to_text();
    for c in &status.corrupt {
        out.push_str(&format!("corrupt record: {}:{}: {}\n", c.path.display(), c.line, c.error));
    }
    for t in &status.torn {
        out.push_str(&format!("incomplete final line: {}\n", t.display()));
    }
    out
}

/// Runs `run_stage` with a caller-provided clock; used where timestamps
/// must be reproducible.
pub fn run_stage_with_clock(
    config: &PipelineConfig,
    project_root: &Path,
    stage: Stage,
    options: &RunOptions,
    clock: Arc<dyn Clock>,
) -> Result<RunReport> {
    let runtime = runtime_for(config, project_root).with_clock(clock);
    run_stage(config, project_root, stage, options, &runtime)
}
