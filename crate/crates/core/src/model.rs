//! Shared data model: datasets, models, experiments, records and scores.
//!
//! Every type here is a plain value object. Experiments are identified by
//! a short content hash of their canonical JSON form (see [`experiment_key`]),
//! which doubles as the on-disk file stem for their records.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Issue, Result};
use crate::generation::perturb;

/// Highest supported perturbation level (levels run 0..=3, 0 = unperturbed).
pub const MAX_PERTURBATION_LEVEL: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    pub id_field: String,
    pub input_field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default)]
    pub version: String,
    /// Local file, local directory (resolved with the split naming
    /// convention) or an http(s) URL.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    #[serde(default = "default_split")]
    pub split: String,
    pub field_map: FieldMap,
}

fn default_split() -> String {
    "test".to_string()
}

impl DatasetSpec {
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.name.trim().is_empty() {
            out.push(Issue::new("name", "must not be empty"));
        }
        if self.source.trim().is_empty() {
            out.push(Issue::new("source", "must not be empty"));
        }
        if let Some(sum) = &self.checksum {
            if sum.len() != 64 || !sum.chars().all(|c| c.is_ascii_hexdigit()) {
                out.push(Issue::new("checksum", "must be 64 hex characters (SHA-256)"));
            }
        }
        let fm = &self.field_map;
        let mut names = vec![fm.id_field.as_str(), fm.input_field.as_str()];
        names.extend(fm.reference_field.as_deref());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                out.push(Issue::new("field_map", "field names must not be empty"));
            } else if names[..i].contains(name) {
                out.push(Issue::new("field_map", format!("field '{name}' is mapped more than once")));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_text: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn new(id: impl Into<String>, input_text: impl Into<String>) -> Self {
        Self { id: id.into(), input_text: input_text.into(), reference_text: None, meta: BTreeMap::new() }
    }

    pub fn with_reference(mut self, reference: impl Into<String>) -> Self {
        self.reference_text = Some(reference.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    OpenaiCompatible,
    Mock,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub provider: ProviderKind,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Response fixture file for the scripted provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
}

fn default_top_p() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn mock(model_name: impl Into<String>) -> Self {
        Self {
            provider: ProviderKind::Mock,
            model_name: model_name.into(),
            endpoint_url: None,
            api_key_env: None,
            temperature: 0.0,
            top_p: 1.0,
            seed: None,
            max_tokens: None,
            fixture: None,
        }
    }

    pub fn with_seed(mut self, seed: i64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.model_name.trim().is_empty() {
            out.push(Issue::new("model_name", "must not be empty"));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            out.push(Issue::new("temperature", format!("must be >= 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            out.push(Issue::new("top_p", format!("must be in (0, 1], got {}", self.top_p)));
        }
        if self.max_tokens == Some(0) {
            out.push(Issue::new("max_tokens", "must be positive"));
        }
        if self.provider == ProviderKind::OpenaiCompatible && self.endpoint_url.is_none() {
            out.push(Issue::new("endpoint_url", "required for provider openai_compatible"));
        }
        if self.provider == ProviderKind::Scripted && self.fixture.is_none() {
            out.push(Issue::new("fixture", "required for provider scripted"));
        }
        out
    }

    /// Identity used when grouping experiments by model.
    pub fn identity(&self) -> String {
        canonical_json(&to_value(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub user_text: String,
}

impl PromptTemplate {
    pub fn user_only(name: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self { name: name.into(), system_text: None, user_text: user_text.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Postprocess {
    None,
    StripMarkdownFences,
    #[default]
    Trim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSteps {
    pub name: String,
    pub template: PromptTemplate,
    #[serde(default)]
    pub postprocess: Postprocess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeVariantId {
    Brief,
    Detailed,
}

impl fmt::Display for JudgeVariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeVariantId::Brief => "brief",
            JudgeVariantId::Detailed => "detailed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    /// Offline character n-gram hashing embedder with neighbour mixing.
    Hashing {
        #[serde(default = "default_embed_dim")]
        dim: usize,
        #[serde(default = "default_context_weight")]
        context_weight: f64,
    },
    /// An embedder registered at runtime under `name`.
    Registered { name: String },
}

fn default_embed_dim() -> usize {
    256
}

fn default_context_weight() -> f64 {
    0.5
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hashing { dim: default_embed_dim(), context_weight: default_context_weight() }
    }
}

fn default_max_n() -> usize {
    4
}

fn default_scale() -> (i32, i32) {
    (1, 5)
}

fn default_questions() -> usize {
    10
}

fn default_fallback_samples() -> usize {
    10
}

/// One configured evaluator. The registered metric name is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorSpec {
    BleuPrecision {
        #[serde(default = "default_max_n")]
        max_n: usize,
        #[serde(default)]
        brevity_penalty: bool,
    },
    #[serde(rename = "rouge_1")]
    Rouge1,
    #[serde(rename = "rouge_2")]
    Rouge2,
    RougeL,
    BertScore {
        #[serde(default)]
        embedder: EmbedderSpec,
    },
    GEval {
        variant: JudgeVariantId,
        judge: ModelSpec,
        judge_alias: String,
        #[serde(default = "default_scale")]
        scale: (i32, i32),
        #[serde(default = "default_fallback_samples")]
        fallback_samples: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt: Option<String>,
    },
    QagsTernary {
        model: ModelSpec,
        #[serde(default = "default_questions")]
        questions: usize,
    },
    QagsJudge {
        model: ModelSpec,
        judge: ModelSpec,
        #[serde(default = "default_questions")]
        questions: usize,
    },
}

impl EvaluatorSpec {
    pub fn metric_name(&self) -> String {
        match self {
            EvaluatorSpec::BleuPrecision { .. } => "bleu_precision".into(),
            EvaluatorSpec::Rouge1 => "rouge_1".into(),
            EvaluatorSpec::Rouge2 => "rouge_2".into(),
            EvaluatorSpec::RougeL => "rouge_l".into(),
            EvaluatorSpec::BertScore { .. } => "bert_score_f1".into(),
            EvaluatorSpec::GEval { variant, judge_alias, .. } => format!("g_eval_{variant}_{judge_alias}"),
            EvaluatorSpec::QagsTernary { .. } => "qags_ternary".into(),
            EvaluatorSpec::QagsJudge { .. } => "qags_judge".into(),
        }
    }

    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        match self {
            EvaluatorSpec::BleuPrecision { max_n, .. } if *max_n == 0 => {
                out.push(Issue::new("max_n", "must be at least 1"));
            }
            EvaluatorSpec::BertScore { embedder: EmbedderSpec::Hashing { dim, .. } } if *dim == 0 => {
                out.push(Issue::new("embedder.dim", "must be positive"));
            }
            EvaluatorSpec::GEval { judge, judge_alias, scale, fallback_samples, .. } => {
                if !is_alias(judge_alias) {
                    out.push(Issue::new("judge_alias", "must match [a-z0-9_-]+"));
                }
                if scale.0 >= scale.1 {
                    out.push(Issue::new("scale", "lower bound must be below upper bound"));
                }
                if !(0..=9).contains(&scale.0) || !(0..=9).contains(&scale.1) {
                    out.push(Issue::new("scale", "ratings must be single digits (0..=9)"));
                }
                if *fallback_samples == 0 {
                    out.push(Issue::new("fallback_samples", "must be positive"));
                }
                out.extend(judge.issues().into_iter().map(|i| i.under("judge")));
            }
            EvaluatorSpec::QagsTernary { model, questions } => {
                if *questions == 0 {
                    out.push(Issue::new("questions", "must be positive"));
                }
                out.extend(model.issues().into_iter().map(|i| i.under("model")));
            }
            EvaluatorSpec::QagsJudge { model, judge, questions } => {
                if *questions == 0 {
                    out.push(Issue::new("questions", "must be positive"));
                }
                out.extend(model.issues().into_iter().map(|i| i.under("model")));
                out.extend(judge.issues().into_iter().map(|i| i.under("judge")));
            }
            _ => {}
        }
        out
    }
}

fn is_alias(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

/// Fixed metric names, in registry order. G-Eval names are parameterised.
pub const FIXED_METRIC_NAMES: [&str; 7] =
    ["bleu_precision", "rouge_1", "rouge_2", "rouge_l", "bert_score_f1", "qags_ternary", "qags_judge"];

/// Evaluator kinds accepted in configuration files.
pub const EVALUATOR_KINDS: [&str; 8] =
    ["bleu_precision", "rouge_1", "rouge_2", "rouge_l", "bert_score", "g_eval", "qags_ternary", "qags_judge"];

/// Whether `name` is a registered metric name (`g_eval_<variant>_<alias>` included).
pub fn is_registered_metric(name: &str) -> bool {
    if FIXED_METRIC_NAMES.contains(&name) {
        return true;
    }
    ["g_eval_brief_", "g_eval_detailed_"].iter().any(|prefix| name.strip_prefix(prefix).is_some_and(is_alias))
}

/// Settings for perturbation runs (levels 1..=3).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSettings {
    /// Model used to rewrite outputs; defaults to the generation model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    /// Per-level template overrides; the built-in prompts are used otherwise.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<u8, PromptTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "default_preprocessor")]
    pub preprocessor: String,
    pub generation: GenerationSteps,
    pub model: ModelSpec,
    #[serde(default)]
    pub evaluators: Vec<EvaluatorSpec>,
    #[serde(default)]
    pub perturbation_level: u8,
    #[serde(default, skip_serializing_if = "is_default_perturbation")]
    pub perturbation: PerturbationSettings,
}

fn default_preprocessor() -> String {
    "identity".to_string()
}

fn is_default_perturbation(p: &PerturbationSettings) -> bool {
    *p == PerturbationSettings::default()
}

impl ExperimentConfig {
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        out.extend(self.dataset.issues().into_iter().map(|i| i.under("dataset")));
        out.extend(self.model.issues().into_iter().map(|i| i.under("model")));
        if self.preprocessor.trim().is_empty() {
            out.push(Issue::new("preprocessor", "must not be empty"));
        }
        if self.perturbation_level > MAX_PERTURBATION_LEVEL {
            out.push(Issue::new(
                "perturbation_level",
                format!("must be in 0..={MAX_PERTURBATION_LEVEL}, got {}", self.perturbation_level),
            ));
        }
        for (i, ev) in self.evaluators.iter().enumerate() {
            out.extend(ev.issues().into_iter().map(|x| x.under(&format!("evaluators[{i}]"))));
        }
        let mut seen = Vec::new();
        for ev in &self.evaluators {
            let name = ev.metric_name();
            if seen.contains(&name) {
                out.push(Issue::new("evaluators", format!("metric '{name}' configured more than once")));
            }
            seen.push(name);
        }
        if let Some(m) = &self.perturbation.model {
            out.extend(m.issues().into_iter().map(|i| i.under("perturbation.model")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(issues))
        }
    }

    /// Requires at least one evaluator, in addition to [`Self::validate`].
    pub fn validate_for_scoring(&self) -> Result<()> {
        self.validate()?;
        if self.evaluators.is_empty() {
            return Err(Error::Invalid(vec![Issue::new("evaluators", "must not be empty for scoring runs")]));
        }
        Ok(())
    }

    /// The model that produces this experiment's outputs: the generation
    /// model at level 0, the perturbation model otherwise.
    pub fn producing_model(&self) -> &ModelSpec {
        if self.perturbation_level == 0 {
            &self.model
        } else {
            self.perturbation.model.as_ref().unwrap_or(&self.model)
        }
    }

    /// The unperturbed counterpart of this experiment.
    pub fn source_config(&self) -> ExperimentConfig {
        ExperimentConfig { perturbation_level: 0, ..self.clone() }
    }

    /// Template used to perturb outputs at this experiment's level.
    pub fn perturbation_template(&self) -> Option<PromptTemplate> {
        if self.perturbation_level == 0 {
            return None;
        }
        Some(
            self.perturbation
                .templates
                .get(&self.perturbation_level)
                .cloned()
                .unwrap_or_else(|| perturb::default_template(self.perturbation_level)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentBatchConfig {
    pub datasets: Vec<DatasetSpec>,
    pub preprocessors: Vec<String>,
    pub generations: Vec<GenerationSteps>,
    pub models: Vec<ModelSpec>,
    /// Evaluator suites; each expanded config carries one whole suite.
    pub evaluators: Vec<Vec<EvaluatorSpec>>,
    pub perturbation_levels: Vec<u8>,
    #[serde(default)]
    pub perturbation: PerturbationSettings,
}

/// Full Cartesian product of the batch dimensions, in listed dimension
/// order with the last dimension (perturbation level) varying fastest.
pub fn expand_batch(batch: &ExperimentBatchConfig) -> Result<Vec<ExperimentConfig>> {
    let dims = [
        ("datasets", batch.datasets.len()),
        ("preprocessors", batch.preprocessors.len()),
        ("generations", batch.generations.len()),
        ("models", batch.models.len()),
        ("evaluators", batch.evaluators.len()),
        ("perturbation_levels", batch.perturbation_levels.len()),
    ];
    if let Some((name, _)) = dims.iter().find(|(_, len)| *len == 0) {
        return Err(Error::Config(format!("batch dimension '{name}' is empty")));
    }
    if let Some(level) = batch.perturbation_levels.iter().find(|l| **l > MAX_PERTURBATION_LEVEL) {
        return Err(Error::Config(format!("perturbation level {level} out of range 0..={MAX_PERTURBATION_LEVEL}")));
    }

    let total: usize = dims.iter().map(|(_, len)| len).product();
    let mut out = Vec::with_capacity(total);
    for dataset in &batch.datasets {
        for preprocessor in &batch.preprocessors {
            for generation in &batch.generations {
                for model in &batch.models {
                    for evaluators in &batch.evaluators {
                        for &level in &batch.perturbation_levels {
                            out.push(ExperimentConfig {
                                dataset: dataset.clone(),
                                preprocessor: preprocessor.clone(),
                                generation: generation.clone(),
                                model: model.clone(),
                                evaluators: evaluators.clone(),
                                perturbation_level: level,
                                perturbation: batch.perturbation.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("model types always serialize")
}

/// Compact JSON with lexicographically sorted object keys.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's default map is ordered, so re-serializing sorts keys.
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let sorted: BTreeMap<&String, Value> = map.iter().map(|(k, v)| (k, sort(v))).collect();
                Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(value)).expect("JSON values always serialize")
}

/// SHA-256 of `input`, hex encoded and truncated to 16 characters.
pub fn short_hash(input: &str) -> String {
    let digest = Sha256::digest(input.as_bytes());
    hex::encode(digest)[..16].to_string()
}

/// Line endings unified to `\n` and trailing whitespace removed per line.
pub fn normalize_prompt_whitespace(text: &str) -> String {
    text.replace("\r\n", "\n")
        .replace('\r', "\n")
        .split('\n')
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

fn normalized_template(t: &PromptTemplate) -> Value {
    let mut v = to_value(t);
    if let Value::Object(map) = &mut v {
        for field in ["system_text", "user_text"] {
            if let Some(Value::String(s)) = map.get_mut(field) {
                *s = normalize_prompt_whitespace(s);
            }
        }
    }
    v
}

/// Stable identity of an experiment's generation outputs.
///
/// Level 0 hashes (dataset, preprocessor, generation steps, model).
/// Evaluators are not part of the identity: scores live in per-metric
/// files beside the generations. Perturbed levels hash the level-0 key
/// together with the level, the perturbing model and its prompt.
pub fn experiment_key(config: &ExperimentConfig) -> String {
    let mut generation = to_value(&config.generation);
    generation["template"] = normalized_template(&config.generation.template);
    let identity = serde_json::json!({
        "dataset": to_value(&config.dataset),
        "preprocessor": config.preprocessor,
        "generation": generation,
        "model": to_value(&config.model),
    });
    let source = short_hash(&canonical_json(&identity));
    match config.perturbation_template() {
        None => source,
        Some(template) => {
            derived_experiment_key(&source, config.perturbation_level, config.producing_model(), &template)
        }
    }
}

/// Key for outputs derived from `source_key` by perturbation at `level`.
pub fn derived_experiment_key(source_key: &str, level: u8, perturber: &ModelSpec, template: &PromptTemplate) -> String {
    let identity = serde_json::json!({
        "source": source_key,
        "perturbation_level": level,
        "perturber": to_value(perturber),
        "template": normalized_template(template),
    });
    short_hash(&canonical_json(&identity))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopAlternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_alternatives: Vec<TopAlternative>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub experiment_key: String,
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub usage: Usage,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

impl GenerationRecord {
    pub fn is_succeeded(&self) -> bool {
        self.status == RecordStatus::Succeeded && self.output_text.is_some()
    }

    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.status == RecordStatus::Succeeded && self.output_text.is_none() {
            out.push(Issue::new("output_text", "required when status is succeeded"));
        }
        if self.status == RecordStatus::Failed && self.error.is_none() {
            out.push(Issue::new("error", "required when status is failed"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub experiment_key: String,
    pub sample_id: String,
    pub metric_name: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sub_values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub artifacts: BTreeMap<String, Value>,
    /// Markers such as `degenerate_input`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ScoreRecord {
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if !self.value.is_finite() {
            out.push(Issue::new("value", "must be finite"));
        }
        if !is_registered_metric(&self.metric_name) {
            out.push(Issue::new("metric_name", format!("'{}' is not a registered metric", self.metric_name)));
        }
        out
    }
}

/// A metric that could not be computed for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub experiment_key: String,
    pub sample_id: String,
    pub metric_name: String,
    pub error: String,
    #[serde(default)]
    pub degenerate: bool,
}


#[cfg(test)]
pub(crate) use tests::fixture_config;
