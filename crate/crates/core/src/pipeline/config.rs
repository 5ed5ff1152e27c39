//! Pipeline configuration files.
//!
//! One YAML or JSON document declares datasets, models (addressed by alias),
//! generation steps, evaluators and batch dimensions. Loading validates the
//! whole document and reports every problem with its path.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analysis::CorrelationKind;
use crate::datasets::PreprocessorRegistry;
use crate::error::{Error, Issue, Result};
use crate::generation::perturb::NOTE_GENERATION_PROMPT;
use crate::model::{
    expand_batch, DatasetSpec, EvaluatorSpec, ExperimentBatchConfig, ExperimentConfig, GenerationSteps, ModelSpec,
    PerturbationSettings, PromptTemplate, EVALUATOR_KINDS, MAX_PERTURBATION_LEVEL,
};
use crate::provider::RetryPolicy;

const TOP_LEVEL_KEYS: [&str; 11] = [
    "project",
    "datasets",
    "preprocessors",
    "generations",
    "models",
    "evaluators",
    "batch",
    "perturbation",
    "meta_eval",
    "runtime",
    "description",
];

/// Built-in prompt templates addressable by name from a config.
pub const BUILTIN_TEMPLATES: [&str; 1] = ["note_generation"];

fn builtin_template(name: &str) -> Option<PromptTemplate> {
    match name {
        "note_generation" => Some(PromptTemplate::user_only("note_generation", NOTE_GENERATION_PROMPT)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSettings {
    pub correlation: CorrelationKind,
}

impl Default for MetaSettings {
    fn default() -> Self {
        Self { correlation: CorrelationKind::Spearman }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSettings {
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        Self { max_in_flight: 4, timeout_secs: 300, retry: RetryPolicy::default() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BatchSection {
    models: Option<Vec<String>>,
    perturbation_levels: Option<Vec<u8>>,
}

/// A validated pipeline configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Directory of the config file; relative paths resolve against it.
    pub base_dir: PathBuf,
    pub project: Option<PathBuf>,
    /// Model alias → spec, in document order.
    pub models: Vec<(String, ModelSpec)>,
    pub experiments: Vec<ExperimentConfig>,
    pub meta: MetaSettings,
    pub runtime: RuntimeSettings,
}

impl PipelineConfig {
    pub fn model(&self, alias: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|(a, _)| a == alias).map(|(_, m)| m)
    }

    /// Alias of the model with this spec, falling back to its name.
    pub fn alias_of(&self, spec: &ModelSpec) -> String {
        self.models.iter().find(|(_, m)| m == spec).map_or_else(|| spec.model_name.clone(), |(a, _)| a.clone())
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base_dir = if base_dir.as_os_str().is_empty() { PathBuf::from(".") } else { base_dir };
    parse_config(&text, &base_dir)
}

/// Parses and validates config text. YAML is accepted, and JSON as a
/// subset of it.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<PipelineConfig> {
    let mut yaml: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| Error::Config(format!("config is not valid YAML or JSON: {e}")))?;
    yaml.apply_merge().map_err(|e| Error::Config(format!("bad YAML merge key: {e}")))?;
    let doc = yaml_to_json(yaml);
    let Value::Object(doc) = doc else {
        return Err(Error::Config("config must be a mapping at the top level".into()));
    };
    let mut parser = Parser { issues: Vec::new() };
    let config = parser.document(&doc, base_dir);
    match config {
        Some(c) if parser.issues.is_empty() => Ok(c),
        _ => Err(Error::Invalid(parser.issues)),
    }
}

/// Converts YAML to JSON, stringifying non-string mapping keys.
fn yaml_to_json(v: serde_yaml::Value) -> Value {
    use serde_yaml::Value as Y;
    match v {
        Y::Null => Value::Null,
        Y::Bool(b) => Value::Bool(b),
        Y::Number(n) => {
            if let Some(i) = n.as_i64() {
                Value::from(i)
            } else if let Some(u) = n.as_u64() {
                Value::from(u)
            } else {
                Value::from(n.as_f64().unwrap_or(f64::NAN))
            }
        }
        Y::String(s) => Value::String(s),
        Y::Sequence(items) => Value::Array(items.into_iter().map(yaml_to_json).collect()),
        Y::Mapping(m) => Value::Object(
            m.into_iter()
                .map(|(k, v)| {
                    let key = match yaml_to_json(k) {
                        Value::String(s) => s,
                        other => other.to_string(),
                    };
                    (key, yaml_to_json(v))
                })
                .collect(),
        ),
        Y::Tagged(t) => yaml_to_json(t.value),
    }
}

fn derive_alias(model_name: &str) -> String {
    model_name
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

struct Parser {
    issues: Vec<Issue>,
}

impl Parser {
    fn issue(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue::new(path, message));
    }

    fn extend(&mut self, prefix: &str, issues: Vec<Issue>) {
        self.issues.extend(issues.into_iter().map(|i| i.under(prefix)));
    }

    fn typed<T: DeserializeOwned>(&mut self, path: &str, value: &Value) -> Option<T> {
        match serde_json::from_value(value.clone()) {
            Ok(v) => Some(v),
            Err(e) => {
                self.issue(path, e.to_string());
                None
            }
        }
    }

    fn list<'a>(&mut self, doc: &'a Map<String, Value>, key: &str, required: bool) -> Vec<&'a Value> {
        match doc.get(key) {
            Some(Value::Array(items)) => {
                if required && items.is_empty() {
                    self.issue(key, "must not be empty");
                }
                items.iter().collect()
            }
            Some(Value::Null) | None => {
                if required {
                    self.issue(key, "is required");
                }
                vec![]
            }
            Some(_) => {
                self.issue(key, "must be a list");
                vec![]
            }
        }
    }

    fn document(&mut self, doc: &Map<String, Value>, base_dir: &Path) -> Option<PipelineConfig> {
        for key in doc.keys() {
            if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
                self.issue(key.clone(), format!("unknown section; expected one of {}", TOP_LEVEL_KEYS.join(", ")));
            }
        }
        let datasets = self.datasets(doc);
        let preprocessors = self.preprocessors(doc);
        let generations = self.generations(doc);
        let models = self.models(doc);
        let evaluators = self.evaluators(doc, &models);
        let batch: BatchSection = doc.get("batch").and_then(|v| self.typed("batch", v)).unwrap_or_default();
        let perturbation = self.perturbation(doc, &models);
        let meta: MetaSettings = doc.get("meta_eval").and_then(|v| self.typed("meta_eval", v)).unwrap_or_default();
        let runtime: RuntimeSettings = doc.get("runtime").and_then(|v| self.typed("runtime", v)).unwrap_or_default();
        if runtime.max_in_flight == 0 {
            self.issue("runtime.max_in_flight", "must be positive");
        }
        if runtime.retry.max_attempts == 0 {
            self.issue("runtime.retry.max_attempts", "must be positive");
        }
        let project = match doc.get("project") {
            Some(Value::String(p)) => Some(base_dir.join(p)),
            Some(Value::Null) | None => None,
            Some(_) => {
                self.issue("project", "must be a path");
                None
            }
        };

        let batch_models: Vec<ModelSpec> = match &batch.models {
            Some(aliases) => aliases
                .iter()
                .enumerate()
                .filter_map(|(i, a)| match models.iter().find(|(alias, _)| alias == a) {
                    Some((_, m)) => Some(m.clone()),
                    None => {
                        self.issue(format!("batch.models[{i}]"), self.unknown_alias(a, &models));
                        None
                    }
                })
                .collect(),
            None => models.iter().map(|(_, m)| m.clone()).collect(),
        };
        let levels = batch.perturbation_levels.clone().unwrap_or_else(|| vec![0]);
        for (i, l) in levels.iter().enumerate() {
            if *l > MAX_PERTURBATION_LEVEL {
                self.issue(
                    format!("batch.perturbation_levels[{i}]"),
                    format!("must be in 0..={MAX_PERTURBATION_LEVEL}, got {l}"),
                );
            }
        }
        if !self.issues.is_empty() {
            return None;
        }
        let experiments = match expand_batch(&ExperimentBatchConfig {
            datasets,
            preprocessors,
            generations,
            models: batch_models,
            evaluators: vec![evaluators],
            perturbation_levels: levels,
            perturbation,
        }) {
            Ok(e) => e,
            Err(e) => {
                self.issue("batch", e.to_string());
                return None;
            }
        };
        Some(PipelineConfig { base_dir: base_dir.to_path_buf(), project, models, experiments, meta, runtime })
    }

    fn unknown_alias(&self, alias: &str, models: &[(String, ModelSpec)]) -> String {
        let known: Vec<&str> = models.iter().map(|(a, _)| a.as_str()).collect();
        format!("unknown model alias '{alias}'; defined: {}", known.join(", "))
    }

    fn datasets(&mut self, doc: &Map<String, Value>) -> Vec<DatasetSpec> {
        let mut out = Vec::new();
        for (i, v) in self.list(doc, "datasets", true).into_iter().enumerate() {
            let path = format!("datasets[{i}]");
            if let Some(d) = self.typed::<DatasetSpec>(&path, v) {
                self.extend(&path, d.issues());
                out.push(d);
            }
        }
        out
    }

    fn preprocessors(&mut self, doc: &Map<String, Value>) -> Vec<String> {
        let items = self.list(doc, "preprocessors", false);
        if items.is_empty() {
            return vec!["identity".into()];
        }
        let registry = PreprocessorRegistry::default();
        let mut out = Vec::new();
        for (i, v) in items.into_iter().enumerate() {
            match v.as_str() {
                Some(name) if registry.contains(name) => out.push(name.to_string()),
                Some(name) => self.issue(
                    format!("preprocessors[{i}]"),
                    format!("unknown preprocessor '{name}'; registered: {}", registry.names().join(", ")),
                ),
                None => self.issue(format!("preprocessors[{i}]"), "must be a preprocessor name"),
            }
        }
        out
    }

    fn generations(&mut self, doc: &Map<String, Value>) -> Vec<GenerationSteps> {
        let mut out = Vec::new();
        for (i, v) in self.list(doc, "generations", true).into_iter().enumerate() {
            let path = format!("generations[{i}]");
            let mut v = v.clone();
            if let Some(obj) = v.as_object_mut() {
                let name = obj.get("name").and_then(Value::as_str).unwrap_or_default().to_string();
                match obj.get("template").cloned() {
                    Some(Value::String(builtin)) => match builtin_template(&builtin) {
                        Some(t) => {
                            obj.insert("template".into(), serde_json::to_value(t).expect("template serializes"));
                        }
                        None => self.issue(
                            format!("{path}.template"),
                            format!(
                                "unknown built-in template '{builtin}'; available: {}",
                                BUILTIN_TEMPLATES.join(", ")
                            ),
                        ),
                    },
                    Some(Value::Object(mut t)) => {
                        t.entry("name").or_insert(Value::String(name));
                        obj.insert("template".into(), Value::Object(t));
                    }
                    _ => {}
                }
            }
            if let Some(g) = self.typed::<GenerationSteps>(&path, &v) {
                if g.name.trim().is_empty() {
                    self.issue(format!("{path}.name"), "must not be empty");
                }
                for (field, text) in
                    [("user_text", Some(&g.template.user_text)), ("system_text", g.template.system_text.as_ref())]
                {
                    if let Some(Err(e)) = text.map(|t| crate::generation::placeholders(t)) {
                        self.issue(format!("{path}.template.{field}"), e.to_string());
                    }
                }
                out.push(g);
            }
        }
        out
    }

    fn models(&mut self, doc: &Map<String, Value>) -> Vec<(String, ModelSpec)> {
        let mut out: Vec<(String, ModelSpec)> = Vec::new();
        for (i, v) in self.list(doc, "models", true).into_iter().enumerate() {
            let path = format!("models[{i}]");
            let mut v = v.clone();
            let alias = v.as_object_mut().and_then(|o| o.remove("alias"));
            let Some(spec) = self.typed::<ModelSpec>(&path, &v) else { continue };
            self.extend(&path, spec.issues());
            if let Some(var) = &spec.api_key_env {
                if std::env::var_os(var).is_none() {
                    self.issue(format!("{path}.api_key_env"), format!("environment variable {var} is not set"));
                }
            }
            let alias = match alias {
                Some(Value::String(a)) => a,
                Some(_) => {
                    self.issue(format!("{path}.alias"), "must be a string");
                    continue;
                }
                None => derive_alias(&spec.model_name),
            };
            let valid = !alias.is_empty()
                && alias.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-');
            if !valid {
                self.issue(format!("{path}.alias"), "must match [a-z0-9_-]+");
            }
            if out.iter().any(|(a, _)| *a == alias) {
                self.issue(format!("{path}.alias"), format!("duplicate model alias '{alias}'"));
            }
            out.push((alias, spec));
        }
        out
    }

    /// Replaces an alias string at `obj[field]` with the model's spec.
    fn resolve_model(
        &mut self,
        path: &str,
        obj: &mut Map<String, Value>,
        field: &str,
        models: &[(String, ModelSpec)],
    ) -> Option<String> {
        match obj.get(field) {
            Some(Value::String(alias)) => {
                let alias = alias.clone();
                match models.iter().find(|(a, _)| *a == alias) {
                    Some((_, m)) => {
                        obj.insert(field.into(), serde_json::to_value(m).expect("model spec serializes"));
                        Some(alias)
                    }
                    None => {
                        let msg = self.unknown_alias(&alias, models);
                        self.issue(format!("{path}.{field}"), msg);
                        None
                    }
                }
            }
            Some(_) => {
                self.issue(format!("{path}.{field}"), "must be a model alias");
                None
            }
            None => {
                self.issue(format!("{path}.{field}"), "is required");
                None
            }
        }
    }

    fn evaluators(&mut self, doc: &Map<String, Value>, models: &[(String, ModelSpec)]) -> Vec<EvaluatorSpec> {
        let mut out: Vec<EvaluatorSpec> = Vec::new();
        for (i, v) in self.list(doc, "evaluators", false).into_iter().enumerate() {
            let path = format!("evaluators[{i}]");
            let mut obj = match v {
                Value::String(kind) => Map::from_iter([("kind".to_string(), Value::String(kind.clone()))]),
                Value::Object(o) => o.clone(),
                _ => {
                    self.issue(&path, "must be a metric name or a mapping with `kind`");
                    continue;
                }
            };
            let Some(kind) = obj.get("kind").and_then(Value::as_str).map(str::to_string) else {
                self.issue(format!("{path}.kind"), "is required");
                continue;
            };
            if !EVALUATOR_KINDS.contains(&kind.as_str()) {
                self.issue(
                    format!("{path}.kind"),
                    format!("unknown metric '{kind}'; registered: {}", EVALUATOR_KINDS.join(", ")),
                );
                continue;
            }
            let resolved = match kind.as_str() {
                "g_eval" => self.resolve_model(&path, &mut obj, "judge", models).map(|alias| {
                    obj.insert("judge_alias".into(), Value::String(alias));
                }),
                "qags_ternary" => self.resolve_model(&path, &mut obj, "model", models).map(drop),
                "qags_judge" => {
                    let a = self.resolve_model(&path, &mut obj, "model", models);
                    let b = self.resolve_model(&path, &mut obj, "judge", models);
                    a.and(b).map(drop)
                }
                _ => Some(()),
            };
            if resolved.is_none() {
                continue;
            }
            let Some(spec) = self.typed::<EvaluatorSpec>(&path, &Value::Object(obj)) else { continue };
            let mut issues = spec.issues();
            // Judge and model specs were validated under `models`.
            issues.retain(|i| !i.path.starts_with("judge.") && !i.path.starts_with("model."));
            self.extend(&path, issues);
            let name = spec.metric_name();
            if out.iter().any(|e| e.metric_name() == name) {
                self.issue(&path, format!("metric '{name}' configured more than once"));
            }
            out.push(spec);
        }
        out
    }

    fn perturbation(&mut self, doc: &Map<String, Value>, models: &[(String, ModelSpec)]) -> PerturbationSettings {
        let Some(v) = doc.get("perturbation") else { return PerturbationSettings::default() };
        let Some(obj) = v.as_object() else {
            self.issue("perturbation", "must be a mapping");
            return PerturbationSettings::default();
        };
        let mut obj = obj.clone();
        if obj.contains_key("model") {
            self.resolve_model("perturbation", &mut obj, "model", models);
        }
        if let Some(Value::Object(templates)) = obj.get_mut("templates") {
            for (level, t) in templates.iter_mut() {
                if let Value::Object(t) = t {
                    t.entry("name").or_insert_with(|| Value::String(format!("perturbation_level{level}")));
                }
            }
        }
        let settings: PerturbationSettings = self.typed("perturbation", &Value::Object(obj)).unwrap_or_default();
        for level in settings.templates.keys() {
            if !(1..=MAX_PERTURBATION_LEVEL).contains(level) {
                self.issue(format!("perturbation.templates.{level}"), "level must be in 1..=3");
            }
        }
        settings
    }
}
