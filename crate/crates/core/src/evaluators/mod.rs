//! Score calculators behind one interface.
//!
//! Statistical metrics ([`ngram`]) are pure functions. Model-based metrics
//! ([`bertscore`], [`geval`], [`qags`]) use a token embedder or a provider
//! client obtained from the gateway.

pub mod bertscore;
pub mod geval;
pub mod ngram;
pub mod qags;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

pub use bertscore::{bert_score, EmbedderRegistry, FixedEmbedder, HashingEmbedder, TokenEmbedder};
pub use geval::{GEvalJudge, RatingDistribution};
pub use ngram::{bleu_precision, rouge_l, rouge_n, BleuScore, Prf};

use crate::error::Result;
use crate::model::{EvaluatorSpec, ModelSpec, Sample};
use crate::provider::{Client, Gateway};

pub const DEGENERATE_FLAG: &str = "degenerate_input";

/// Lowercased runs of Unicode letters and digits; everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub sub_values: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, Value>,
    pub flags: Vec<String>,
}

impl MetricValue {
    fn from_prf(prf: Prf) -> Self {
        let mut v = Self {
            value: prf.f1,
            sub_values: BTreeMap::from([
                ("precision".to_string(), prf.precision),
                ("recall".to_string(), prf.recall),
                ("f1".to_string(), prf.f1),
            ]),
            ..Default::default()
        };
        if prf.degenerate {
            v.flags.push(DEGENERATE_FLAG.into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    /// The metric is undefined for this input (e.g. every QAGS question dropped).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Failed(String),
}

impl MetricError {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, MetricError::Degenerate(_))
    }
}

pub trait Evaluator: Send + Sync {
    fn metric_name(&self) -> String;

    /// Whether the metric compares against `Sample::reference_text`.
    fn needs_reference(&self) -> bool {
        false
    }

    /// Whether scoring calls a model provider.
    fn uses_provider(&self) -> bool {
        false
    }

    fn score(&self, sample: &Sample, output: &str) -> std::result::Result<MetricValue, MetricError>;
}

fn reference(sample: &Sample) -> std::result::Result<&str, MetricError> {
    sample
        .reference_text
        .as_deref()
        .ok_or_else(|| MetricError::Failed(format!("sample {} has no reference text", sample.id)))
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

struct Bleu {
    max_n: usize,
    brevity_penalty: bool,
}

impl Evaluator for Bleu {
    fn metric_name(&self) -> String {
        "bleu_precision".into()
    }

    fn needs_reference(&self) -> bool {
        true
    }

    fn score(&self, sample: &Sample, output: &str) -> std::result::Result<MetricValue, MetricError> {
        let s = ngram::bleu_tokens(&tokenize(output), &tokenize(reference(sample)?), self.max_n, self.brevity_penalty);
        let mut v = MetricValue { value: s.value, ..Default::default() };
        for (i, p) in s.precisions.iter().enumerate() {
            if let Some(p) = p {
                v.sub_values.insert(format!("p{}", i + 1), *p);
            }
        }
        v.sub_values.insert("brevity_penalty".into(), s.brevity_penalty);
        if s.degenerate {
            v.flags.push(DEGENERATE_FLAG.into());
        }
        Ok(v)
    }
}

struct RougeN(usize);

impl Evaluator for RougeN {
    fn metric_name(&self) -> String {
        format!("rouge_{}", self.0)
    }

    fn needs_reference(&self) -> bool {
        true
    }

    fn score(&self, sample: &Sample, output: &str) -> std::result::Result<MetricValue, MetricError> {
        Ok(MetricValue::from_prf(rouge_n(output, reference(sample)?, self.0)))
    }
}

struct RougeL;

impl Evaluator for RougeL {
    fn metric_name(&self) -> String {
        "rouge_l".into()
    }

    fn needs_reference(&self) -> bool {
        true
    }

    fn score(&self, sample: &Sample, output: &str) -> std::result::Result<MetricValue, MetricError> {
        Ok(MetricValue::from_prf(rouge_l(output, reference(sample)?)))
    }
}

struct BertScore(Arc<dyn TokenEmbedder>);

impl Evaluator for BertScore {
    fn metric_name(&self) -> String {
        "bert_score_f1".into()
    }

    fn needs_reference(&self) -> bool {
        true
    }

    fn score(&self, sample: &Sample, output: &str) -> std::result::Result<MetricValue, MetricError> {
        let prf = bert_score(output, reference(sample)?, self.0.as_ref())
            .map_err(|e| MetricError::Failed(format!("embedder failed: {e}")))?;
        Ok(MetricValue::from_prf(prf))
    }
}

struct GEval {
    name: String,
    client: Client,
    judge: ModelSpec,
    prompt: String,
    scale: (i32, i32),
    fallback_samples: usize,
}

impl Evaluator for GEval {
    fn metric_name(&self) -> String {
        self.name.clone()
    }

    fn uses_provider(&self) -> bool {
        true
    }

    fn score(&self, sample: &Sample, output: &str) -> std::result::Result<MetricValue, MetricError> {
        let judge = GEvalJudge {
            client: &self.client,
            judge: &self.judge,
            prompt: &self.prompt,
            scale: self.scale,
            fallback_samples: self.fallback_samples,
        };
        let o = judge.score(&sample.input_text, output).map_err(MetricError::Failed)?;
        Ok(MetricValue {
            value: o.score,
            sub_values: BTreeMap::from([("expected_rating".to_string(), o.expected_rating)]),
            artifacts: BTreeMap::from([
                ("method".to_string(), Value::String(o.method.clone())),
                ("distribution".to_string(), to_json(&o.distribution)),
                ("sampled_ratings".to_string(), to_json(&o.sampled_ratings)),
            ]),
            flags: vec![],
        })
    }
}

enum QagsVariant {
    Ternary,
    Judge { client: Box<Client>, judge: ModelSpec },
}

struct Qags {
    client: Client,
    model: ModelSpec,
    questions: usize,
    variant: QagsVariant,
}

impl Evaluator for Qags {
    fn metric_name(&self) -> String {
        match self.variant {
            QagsVariant::Ternary => "qags_ternary".into(),
            QagsVariant::Judge { .. } => "qags_judge".into(),
        }
    }

    fn uses_provider(&self) -> bool {
        true
    }

    fn score(&self, sample: &Sample, output: &str) -> std::result::Result<MetricValue, MetricError> {
        if output.trim().is_empty() {
            return Err(MetricError::Degenerate("empty candidate".into()));
        }
        let mode = match self.variant {
            QagsVariant::Ternary => qags::QuestionMode::Ternary,
            QagsVariant::Judge { .. } => qags::QuestionMode::Open,
        };
        let questions = qags::generate_questions(output, &self.client, &self.model, mode, self.questions)
            .map_err(MetricError::Failed)?;
        let outcome = match &self.variant {
            QagsVariant::Ternary => {
                qags::qags_ternary_score(&sample.input_text, output, &questions, &self.client, &self.model)
            }
            QagsVariant::Judge { client, judge } => {
                qags::qags_judge_score(&sample.input_text, output, &questions, &self.client, &self.model, client, judge)
            }
        };
        let o =
            outcome.map_err(
                |e| {
                    if e.contains("dropped") {
                        MetricError::Degenerate(e)
                    } else {
                        MetricError::Failed(e)
                    }
                },
            )?;
        Ok(MetricValue {
            value: o.score,
            sub_values: BTreeMap::from([
                ("retained".to_string(), o.retained as f64),
                ("dropped".to_string(), o.dropped as f64),
            ]),
            artifacts: BTreeMap::from([("questions".to_string(), to_json(&o.questions))]),
            flags: vec![],
        })
    }
}

/// Shared resources for building evaluators.
pub struct EvaluatorContext<'a> {
    pub gateway: &'a Gateway,
    pub embedders: &'a EmbedderRegistry,
}

pub fn build_evaluator(spec: &EvaluatorSpec, ctx: &EvaluatorContext<'_>) -> Result<Box<dyn Evaluator>> {
    Ok(match spec {
        EvaluatorSpec::BleuPrecision { max_n, brevity_penalty } => {
            Box::new(Bleu { max_n: *max_n, brevity_penalty: *brevity_penalty })
        }
        EvaluatorSpec::Rouge1 => Box::new(RougeN(1)),
        EvaluatorSpec::Rouge2 => Box::new(RougeN(2)),
        EvaluatorSpec::RougeL => Box::new(RougeL),
        EvaluatorSpec::BertScore { embedder } => Box::new(BertScore(ctx.embedders.resolve(embedder)?)),
        EvaluatorSpec::GEval { variant, judge, scale, fallback_samples, prompt, .. } => Box::new(GEval {
            name: spec.metric_name(),
            client: ctx.gateway.client(judge)?,
            judge: judge.clone(),
            prompt: prompt.clone().unwrap_or_else(|| geval::variant_prompt(*variant).to_string()),
            scale: *scale,
            fallback_samples: *fallback_samples,
        }),
        EvaluatorSpec::QagsTernary { model, questions } => Box::new(Qags {
            client: ctx.gateway.client(model)?,
            model: model.clone(),
            questions: *questions,
            variant: QagsVariant::Ternary,
        }),
        EvaluatorSpec::QagsJudge { model, judge, questions } => Box::new(Qags {
            client: ctx.gateway.client(model)?,
            model: model.clone(),
            questions: *questions,
            variant: QagsVariant::Judge { client: Box::new(ctx.gateway.client(judge)?), judge: judge.clone() },
        }),
    })
}
