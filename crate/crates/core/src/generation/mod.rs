//! Prompt rendering, generation runs and perturbation ladders.

pub mod perturb;
mod template;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use template::{placeholders, render_prompt, render_with, sample_field, RenderedPrompt, TemplateError};

use crate::datasets::RecordSet;
use crate::error::{Error, Result};
use crate::model::{
    experiment_key, ExperimentConfig, GenerationRecord, ModelSpec, Postprocess, PromptTemplate, RecordStatus, Sample,
};
use crate::orchestrator::{Clock, Project};
use crate::provider::{Gateway, GenerationRequest, Sampling};

pub use crate::model::GenerationSteps;

pub fn apply_postprocess(text: &str, step: Postprocess) -> String {
    match step {
        Postprocess::None => text.to_string(),
        Postprocess::Trim => text.trim().to_string(),
        Postprocess::StripMarkdownFences => {
            let trimmed = text.trim();
            let Some(body) = trimmed.strip_prefix("```") else {
                return trimmed.to_string();
            };
            // drop the info string on the opening fence
            let body = body.split_once('\n').map_or("", |(_, rest)| rest);
            body.strip_suffix("```").unwrap_or(body).trim().to_string()
        }
    }
}

/// One unit of generation work: a sample id and its rendered prompt, or the
/// reason it could not be rendered.
struct WorkItem {
    sample_id: String,
    prompt: std::result::Result<RenderedPrompt, TemplateError>,
}

/// Generates outputs for `items` not yet succeeded under `key`, persisting
/// each record in item order. Returns the latest record per item.
#[allow(clippy::too_many_arguments)]
fn generate_into(
    key: &str,
    items: Vec<WorkItem>,
    model: &ModelSpec,
    postprocess: Postprocess,
    project: &Project,
    gateway: &Gateway,
    clock: &dyn Clock,
) -> Result<Vec<GenerationRecord>> {
    let existing: HashMap<String, GenerationRecord> =
        project.load_generations(key)?.into_iter().map(|r| (r.sample_id.clone(), r)).collect();
    let todo: Vec<&WorkItem> =
        items.iter().filter(|it| !existing.get(&it.sample_id).is_some_and(GenerationRecord::is_succeeded)).collect();

    let mut fresh: HashMap<String, GenerationRecord> = HashMap::new();
    if !todo.is_empty() {
        let client = gateway.client(model)?;
        let sampling = Sampling::from_model(model);
        let mut write_error = None;
        crate::provider::run_ordered(
            &todo,
            client.max_in_flight(),
            |item| {
                let created_at = clock.now();
                let outcome = match &item.prompt {
                    Ok(p) => client
                        .generate(&GenerationRequest::new(p.system.clone(), p.user.clone(), sampling.clone()))
                        .map_err(|e| e.to_string()),
                    Err(e) => Err(e.to_string()),
                };
                let finished_at = Some(clock.now());
                match outcome {
                    Ok(result) => GenerationRecord {
                        experiment_key: key.to_string(),
                        sample_id: item.sample_id.clone(),
                        output_text: Some(apply_postprocess(&result.text, postprocess)),
                        token_logprobs: result.token_logprobs,
                        usage: result.usage,
                        status: RecordStatus::Succeeded,
                        error: None,
                        created_at,
                        finished_at,
                    },
                    Err(error) => GenerationRecord {
                        experiment_key: key.to_string(),
                        sample_id: item.sample_id.clone(),
                        output_text: None,
                        token_logprobs: None,
                        usage: Default::default(),
                        status: RecordStatus::Failed,
                        error: Some(error),
                        created_at,
                        finished_at,
                    },
                }
            },
            |_, record| {
                if write_error.is_some() {
                    return;
                }
                match project.append_generation(&record) {
                    Ok(()) => {
                        fresh.insert(record.sample_id.clone(), record);
                    }
                    Err(e) => write_error = Some(e),
                }
            },
        );
        if let Some(e) = write_error {
            return Err(e);
        }
    }

    Ok(items
        .iter()
        .filter_map(|it| fresh.remove(&it.sample_id).or_else(|| existing.get(&it.sample_id).cloned()))
        .collect())
}

/// Plain (unperturbed) generation for one experiment over a record set.
/// Previously succeeded samples are skipped; provider failures are recorded
/// per sample and do not stop the run.
pub fn run_generation(
    config: &ExperimentConfig,
    records: &RecordSet,
    project: &Project,
    gateway: &Gateway,
    clock: &dyn Clock,
) -> Result<Vec<GenerationRecord>> {
    if config.perturbation_level != 0 {
        return Err(Error::Argument("run_generation requires perturbation_level 0; use perturb".into()));
    }
    let key = experiment_key(config);
    let items = records
        .samples
        .iter()
        .map(|s| WorkItem { sample_id: s.id.clone(), prompt: render_prompt(&config.generation.template, s) })
        .collect();
    generate_into(&key, items, &config.model, config.generation.postprocess, project, gateway, clock)
}

/// Rewrites each succeeded base output with the perturbation prompt for
/// `level`, storing results under `target_key`.
#[allow(clippy::too_many_arguments)]
pub fn perturb(
    base_records: &[GenerationRecord],
    level: u8,
    model: &ModelSpec,
    template: &PromptTemplate,
    target_key: &str,
    project: &Project,
    gateway: &Gateway,
    clock: &dyn Clock,
) -> Result<Vec<GenerationRecord>> {
    if !(1..=crate::model::MAX_PERTURBATION_LEVEL).contains(&level) {
        return Err(Error::Argument(format!("perturbation level must be 1..=3, got {level}")));
    }
    let items = base_records
        .iter()
        .filter(|r| r.is_succeeded())
        .map(|r| {
            let note = r.output_text.clone().unwrap_or_default();
            WorkItem {
                sample_id: r.sample_id.clone(),
                prompt: render_prompt(template, &Sample::new(&r.sample_id, note)),
            }
        })
        .collect();
    generate_into(target_key, items, model, Postprocess::Trim, project, gateway, clock)
}

/// Runs the perturbation step for a level > 0 experiment, reading the
/// source outputs from the project.
pub fn perturb_experiment(
    config: &ExperimentConfig,
    project: &Project,
    gateway: &Gateway,
    clock: &dyn Clock,
) -> Result<Vec<GenerationRecord>> {
    let template = config
        .perturbation_template()
        .ok_or_else(|| Error::Argument("perturb_experiment requires perturbation_level 1..=3".into()))?;
    let source_key = experiment_key(&config.source_config());
    let base = project.load_generations(&source_key)?;
    perturb(
        &base,
        config.perturbation_level,
        config.producing_model(),
        &template,
        &experiment_key(config),
        project,
        gateway,
        clock,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationLadder {
    pub sample_id: String,
    /// Level → text; level 0 is the unperturbed output.
    pub variants: BTreeMap<u8, String>,
    pub source_experiment_key: String,
}

impl PerturbationLadder {
    pub fn is_complete(&self) -> bool {
        (0..=crate::model::MAX_PERTURBATION_LEVEL).all(|l| self.variants.contains_key(&l))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderExclusion {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderSet {
    pub source_experiment_key: String,
    /// Experiment key holding each level's texts.
    pub level_keys: BTreeMap<u8, String>,
    pub ladders: Vec<PerturbationLadder>,
    pub excluded: Vec<LadderExclusion>,
}

/// Experiment keys of the perturbation runs derived from `source_key`.
pub fn derived_keys(project: &Project, source_key: &str) -> Result<BTreeMap<u8, String>> {
    let mut out: BTreeMap<u8, String> = BTreeMap::new();
    for (key, entry) in &project.manifest().experiments {
        if entry.source_key.as_deref() != Some(source_key) {
            continue;
        }
        let level = entry.config.perturbation_level;
        if let Some(previous) = out.insert(level, key.clone()) {
            return Err(Error::AnalysisInput(format!(
                "source {source_key} has several perturbation runs at level {level} ({previous}, {key})"
            )));
        }
    }
    Ok(out)
}

/// Assembles one ladder per sample that succeeded at all four levels.
pub fn build_ladders(project: &Project, source_key: &str) -> Result<LadderSet> {
    let mut level_keys = derived_keys(project, source_key)?;
    level_keys.insert(0, source_key.to_string());

    let mut texts: BTreeMap<u8, HashMap<String, Option<String>>> = BTreeMap::new();
    for (&level, key) in &level_keys {
        let recs = project.load_generations(key)?;
        texts.insert(
            level,
            recs.into_iter().map(|r| (r.sample_id.clone(), r.is_succeeded().then(|| r.output_text.unwrap()))).collect(),
        );
    }

    let base = project.load_generations(source_key)?;
    let mut ladders = Vec::new();
    let mut excluded = Vec::new();
    for record in &base {
        let mut variants = BTreeMap::new();
        let mut problems = Vec::new();
        for level in 0..=crate::model::MAX_PERTURBATION_LEVEL {
            match texts.get(&level).and_then(|m| m.get(&record.sample_id)) {
                Some(Some(text)) => {
                    variants.insert(level, text.clone());
                }
                Some(None) => problems.push(format!("level {level} failed")),
                None => problems.push(format!("level {level} missing")),
            }
        }
        if problems.is_empty() {
            ladders.push(PerturbationLadder {
                sample_id: record.sample_id.clone(),
                variants,
                source_experiment_key: source_key.to_string(),
            });
        } else {
            excluded.push(LadderExclusion { sample_id: record.sample_id.clone(), reason: problems.join(", ") });
        }
    }
    if ladders.is_empty() {
        return Err(Error::AnalysisInput(format!("no complete perturbation ladders for source {source_key}")));
    }
    Ok(LadderSet { source_experiment_key: source_key.to_string(), level_keys, ladders, excluded })
}
