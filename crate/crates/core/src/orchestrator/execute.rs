use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::project::{
    failure_log, generation_log, score_log, Clock, ExperimentStatus, ManifestEntry, Progress, Project, SystemClock,
};
use super::schedule::SchedulePlan;
use crate::datasets::{DatasetLoader, PreprocessorRegistry, RecordSet};
use crate::error::{Error, Result};
use crate::evaluators::{build_evaluator, EmbedderRegistry, Evaluator, EvaluatorContext};
use crate::generation::{perturb_experiment, run_generation};
use crate::model::{
    canonical_json, experiment_key, to_value, ExperimentConfig, GenerationRecord, Sample, ScoreFailure, ScoreRecord,
};
use crate::provider::{run_ordered, Gateway};

/// Everything an execution needs besides the project.
pub struct Runtime {
    pub gateway: Gateway,
    pub embedders: EmbedderRegistry,
    pub preprocessors: PreprocessorRegistry,
    pub loader: DatasetLoader,
    pub clock: Arc<dyn Clock>,
}

impl Runtime {
    pub fn new(gateway: Gateway, loader: DatasetLoader) -> Self {
        Self {
            gateway,
            embedders: EmbedderRegistry::default(),
            preprocessors: PreprocessorRegistry::default(),
            loader,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecuteOptions {
    pub resume: bool,
    pub generate: bool,
    pub score: bool,
    /// Restricts scoring to these metric names.
    pub metrics: Option<Vec<String>>,
}

impl Default for ExecuteOptions {
    fn default() -> Self {
        Self { resume: true, generate: true, score: true, metrics: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub experiment_key: String,
    pub status: ExperimentStatus,
    pub generation: Progress,
    pub scores: BTreeMap<String, Progress>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model_load_count: usize,
    pub experiments: Vec<ExperimentOutcome>,
}

impl RunReport {
    pub fn count(&self, status: ExperimentStatus) -> usize {
        self.experiments.iter().filter(|e| e.status == status).count()
    }

    pub fn all_succeeded(&self) -> bool {
        self.experiments.iter().all(|e| e.status == ExperimentStatus::Succeeded)
    }
}

/// Scheduled experiments with identical keys collapse into one whose
/// evaluator list is the union of theirs.
fn unique_in_plan(configs: &[ExperimentConfig], plan: &SchedulePlan) -> Vec<(String, ExperimentConfig)> {
    let mut out: Vec<(String, ExperimentConfig)> = Vec::new();
    for (&i, key) in plan.indices.iter().zip(&plan.order) {
        let config = &configs[i];
        match out.iter_mut().find(|(k, _)| k == key) {
            Some((_, merged)) => {
                for ev in &config.evaluators {
                    if !merged.evaluators.iter().any(|e| e.metric_name() == ev.metric_name()) {
                        merged.evaluators.push(ev.clone());
                    }
                }
            }
            None => out.push((key.clone(), config.clone())),
        }
    }
    out
}

struct Executor<'a> {
    project: &'a mut Project,
    runtime: &'a Runtime,
    options: &'a ExecuteOptions,
    datasets: HashMap<String, Arc<RecordSet>>,
}

/// Runs experiments in plan order: generation (or perturbation) and then
/// scoring, persisting progress in the manifest. Experiments whose source
/// is scheduled later are deferred until it has run. Failures inside one
/// experiment are recorded and do not stop the others; failures to write
/// the project abort the run.
pub fn execute(
    configs: &[ExperimentConfig],
    plan: &SchedulePlan,
    project: &mut Project,
    runtime: &Runtime,
    options: &ExecuteOptions,
) -> Result<RunReport> {
    let work = unique_in_plan(configs, plan);
    let keys: HashSet<&str> = work.iter().map(|(k, _)| k.as_str()).collect();
    let mut done: HashSet<String> = HashSet::new();
    let mut exec = Executor { project, runtime, options, datasets: HashMap::new() };
    let mut outcomes = Vec::new();
    let mut deferred = Vec::new();

    for (key, config) in &work {
        let source = (config.perturbation_level > 0).then(|| experiment_key(&config.source_config()));
        if let Some(src) = &source {
            if keys.contains(src.as_str()) && !done.contains(src) {
                deferred.push((key, config));
                continue;
            }
        }
        outcomes.push(exec.run_one(key, config)?);
        done.insert(key.clone());
    }
    for (key, config) in deferred {
        outcomes.push(exec.run_one(key, config)?);
    }
    Ok(RunReport { model_load_count: plan.model_load_count, experiments: outcomes })
}

fn count_progress(total: usize, records: &[GenerationRecord], ids: &HashSet<&str>) -> Progress {
    let mut p = Progress { total, ..Default::default() };
    for r in records.iter().filter(|r| ids.contains(r.sample_id.as_str())) {
        if r.is_succeeded() {
            p.succeeded += 1;
        } else {
            p.failed += 1;
        }
    }
    p
}

impl Executor<'_> {
    fn dataset(&mut self, config: &ExperimentConfig) -> Result<Arc<RecordSet>> {
        let id = canonical_json(&serde_json::json!({
            "dataset": to_value(&config.dataset),
            "preprocessor": config.preprocessor,
        }));
        if let Some(d) = self.datasets.get(&id) {
            return Ok(d.clone());
        }
        let raw = self.runtime.loader.load(&config.dataset)?;
        let set = Arc::new(self.runtime.preprocessors.preprocess(raw, &config.preprocessor)?);
        self.datasets.insert(id, set.clone());
        Ok(set)
    }

    fn set_entry(&mut self, key: &str, f: impl FnOnce(&mut ManifestEntry)) -> Result<()> {
        self.project.update_manifest(|m| {
            if let Some(e) = m.experiments.get_mut(key) {
                f(e);
            }
        })
    }

    fn run_one(&mut self, key: &str, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
        let clock = self.runtime.clock.clone();
        let source_key = (config.perturbation_level > 0).then(|| experiment_key(&config.source_config()));
        let mut logs = vec![generation_log(key)];
        logs.extend(config.evaluators.iter().map(|e| score_log(key, &e.metric_name())));
        let started = clock.now();
        self.project.update_manifest(|m| {
            let entry = m.experiments.entry(key.to_string()).or_insert_with(|| ManifestEntry {
                config: config.clone(),
                source_key: source_key.clone(),
                status: ExperimentStatus::Pending,
                generation: Progress::default(),
                scores: BTreeMap::new(),
                logs: vec![],
                error: None,
                started_at: None,
                finished_at: None,
            });
            for ev in &config.evaluators {
                if !entry.config.evaluators.iter().any(|e| e.metric_name() == ev.metric_name()) {
                    entry.config.evaluators.push(ev.clone());
                }
            }
            for l in &logs {
                if !entry.logs.contains(l) {
                    entry.logs.push(l.clone());
                }
            }
            entry.status = ExperimentStatus::Running;
            entry.error = None;
            entry.started_at = Some(started);
            entry.finished_at = None;
        })?;
        log::info!(
            "experiment {key}: running (level {}, model {})",
            config.perturbation_level,
            config.producing_model().model_name
        );

        let mut errors = Vec::new();
        let mut outcome = ExperimentOutcome {
            experiment_key: key.to_string(),
            status: ExperimentStatus::Running,
            generation: Progress::default(),
            scores: BTreeMap::new(),
            errors: vec![],
        };

        match self.dataset(config) {
            Ok(data) => {
                self.run_phases(key, config, &data, &mut outcome, &mut errors)?;
            }
            Err(e) => errors.push(format!("dataset: {e}")),
        }

        let gen_ok = outcome.generation.succeeded > 0;
        let gen_bad = outcome.generation.failed > 0 || outcome.generation.succeeded < outcome.generation.total;
        let score_bad = outcome.scores.values().any(|p| p.failed > p.degenerate || p.succeeded + p.failed < p.total);
        outcome.status = if !gen_ok || (!errors.is_empty() && outcome.scores.is_empty() && self.options.score) {
            ExperimentStatus::Failed
        } else if gen_bad || score_bad || !errors.is_empty() {
            ExperimentStatus::PartiallyFailed
        } else {
            ExperimentStatus::Succeeded
        };
        outcome.errors = errors;
        let finished = clock.now();
        let o = outcome.clone();
        self.set_entry(key, |e| {
            e.status = o.status;
            e.generation = o.generation;
            e.scores.extend(o.scores.clone());
            e.error = (!o.errors.is_empty()).then(|| o.errors.join("; "));
            e.finished_at = Some(finished);
        })?;
        log::info!("experiment {key}: {:?}", outcome.status);
        Ok(outcome)
    }

    fn run_phases(
        &mut self,
        key: &str,
        config: &ExperimentConfig,
        data: &RecordSet,
        outcome: &mut ExperimentOutcome,
        errors: &mut Vec<String>,
    ) -> Result<()> {
        let runtime = self.runtime;
        let clock = runtime.clock.as_ref();
        let ids: HashSet<&str> = data.samples.iter().map(|s| s.id.as_str()).collect();

        if self.options.generate {
            if !self.options.resume {
                self.project.reset_experiment(key)?;
            }
            let result = if config.perturbation_level == 0 {
                run_generation(config, data, self.project, &runtime.gateway, clock)
            } else {
                perturb_experiment(config, self.project, &runtime.gateway, clock)
            };
            match result {
                Ok(_) => {}
                Err(e @ (Error::Io { .. } | Error::Corrupt(_) | Error::Json(_))) => return Err(e),
                Err(e) => errors.push(format!("generation: {e}")),
            }
        }

        let records = self.project.load_generations(key)?;
        let total = if config.perturbation_level == 0 {
            data.samples.len()
        } else {
            let src = experiment_key(&config.source_config());
            self.project
                .load_generations(&src)?
                .iter()
                .filter(|r| r.is_succeeded() && ids.contains(r.sample_id.as_str()))
                .count()
        };
        outcome.generation = count_progress(total, &records, &ids);
        if total > 0 && records.is_empty() && errors.is_empty() && !self.options.generate {
            errors.push("no generation records; run generation first".into());
        }

        if !self.options.score {
            return Ok(());
        }
        let samples: HashMap<&str, &Sample> = data.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let outputs: Vec<(&Sample, &str)> = records
            .iter()
            .filter(|r| r.is_succeeded())
            .filter_map(|r| Some((*samples.get(r.sample_id.as_str())?, r.output_text.as_deref()?)))
            .collect();
        let ctx = EvaluatorContext { gateway: &runtime.gateway, embedders: &runtime.embedders };
        for spec in &config.evaluators {
            let metric = spec.metric_name();
            if let Some(filter) = &self.options.metrics {
                if !filter.contains(&metric) {
                    continue;
                }
            }
            if !self.options.resume && !self.options.generate {
                self.project.reset_scores(key, Some(&metric))?;
            }
            let progress = match build_evaluator(spec, &ctx) {
                Ok(evaluator) => self.score_metric(key, evaluator.as_ref(), &outputs)?,
                Err(e) => {
                    errors.push(format!("{metric}: {e}"));
                    Progress { total: outputs.len(), failed: outputs.len(), ..Default::default() }
                }
            };
            outcome.scores.insert(metric, progress);
        }
        Ok(())
    }

    fn score_metric(&self, key: &str, evaluator: &dyn Evaluator, outputs: &[(&Sample, &str)]) -> Result<Progress> {
        let metric = evaluator.metric_name();
        let existing: HashSet<String> =
            self.project.load_scores(key, &metric)?.into_iter().map(|s| s.sample_id).collect();
        let todo: Vec<&(&Sample, &str)> = outputs.iter().filter(|(s, _)| !existing.contains(&s.id)).collect();
        let workers = if evaluator.uses_provider() {
            self.runtime.gateway.max_in_flight()
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        };
        let mut progress = Progress { total: outputs.len(), succeeded: existing.len(), ..Default::default() };
        let mut write_error = None;
        run_ordered(
            &todo,
            workers,
            |(sample, output)| evaluator.score(sample, output),
            |i, result| {
                if write_error.is_some() {
                    return;
                }
                let sample = todo[i].0;
                let written = match result {
                    Ok(v) => {
                        progress.succeeded += 1;
                        self.project.append_score(&ScoreRecord {
                            experiment_key: key.to_string(),
                            sample_id: sample.id.clone(),
                            metric_name: metric.clone(),
                            value: v.value,
                            sub_values: v.sub_values,
                            artifacts: v.artifacts,
                            flags: v.flags,
                        })
                    }
                    Err(e) => {
                        progress.failed += 1;
                        if e.is_degenerate() {
                            progress.degenerate += 1;
                        }
                        log::warn!("{metric} failed for {key}/{}: {e}", sample.id);
                        self.project.append_failure(&ScoreFailure {
                            experiment_key: key.to_string(),
                            sample_id: sample.id.clone(),
                            metric_name: metric.clone(),
                            error: e.to_string(),
                            degenerate: e.is_degenerate(),
                        })
                    }
                };
                if let Err(e) = written {
                    write_error = Some(e);
                }
            },
        );
        match write_error {
            Some(e) => Err(e),
            None => Ok(progress),
        }
    }
}

/// Paths of every record file an experiment may have written.
pub fn record_files(key: &str, metrics: &[String]) -> Vec<String> {
    let mut out = vec![generation_log(key)];
    for m in metrics {
        out.push(score_log(key, m));
        out.push(failure_log(key, m));
    }
    out
}
