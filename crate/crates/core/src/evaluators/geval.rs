//! LLM-as-a-judge ratings weighted by the judge's token probabilities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::generation::render_with;
use crate::model::{JudgeVariantId, ModelSpec, TokenLogprob};
use crate::provider::{Client, GenerationRequest, ResponseShape, Sampling};

/// Brief judge prompt. Written for this crate, not a reproduction of a
/// published prompt. Slots: `{source}`, `{candidate}`, `{lo}`, `{hi}`.
pub const BRIEF_PROMPT: &str = include_str!("../../assets/geval_brief.txt");
/// Detailed judge prompt with explicit criteria and steps. Written for
/// this crate, not a reproduction of a published prompt.
pub const DETAILED_PROMPT: &str = include_str!("../../assets/geval_detailed.txt");

pub const TOP_LOGPROBS: u8 = 20;

pub fn variant_prompt(variant: JudgeVariantId) -> &'static str {
    match variant {
        JudgeVariantId::Brief => BRIEF_PROMPT,
        JudgeVariantId::Detailed => DETAILED_PROMPT,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingDistribution {
    pub lo: i32,
    pub hi: i32,
    pub probs: BTreeMap<i32, f64>,
}

impl RatingDistribution {
    /// Normalizes non-negative weights over ratings in `[lo, hi]`.
    /// Returns `None` when no weight falls inside the scale.
    pub fn from_weights(lo: i32, hi: i32, weights: impl IntoIterator<Item = (i32, f64)>) -> Option<Self> {
        let mut probs: BTreeMap<i32, f64> = BTreeMap::new();
        for (r, w) in weights {
            if (lo..=hi).contains(&r) && w.is_finite() && w > 0.0 {
                *probs.entry(r).or_insert(0.0) += w;
            }
        }
        let total: f64 = probs.values().sum();
        if total <= 0.0 {
            return None;
        }
        probs.values_mut().for_each(|p| *p /= total);
        Some(Self { lo, hi, probs })
    }

    /// Distribution at the last position whose token or alternatives
    /// contain a valid rating.
    pub fn from_logprobs(lo: i32, hi: i32, tokens: &[TokenLogprob]) -> Option<Self> {
        tokens.iter().rev().find_map(|t| {
            let mut weights: Vec<(i32, f64)> = t
                .top_alternatives
                .iter()
                .filter_map(|a| parse_rating_token(&a.token).map(|r| (r, a.logprob.exp())))
                .collect();
            if weights.is_empty() {
                weights.extend(parse_rating_token(&t.token).map(|r| (r, t.logprob.exp())));
            }
            Self::from_weights(lo, hi, weights)
        })
    }

    pub fn expected(&self) -> f64 {
        self.probs.iter().map(|(r, p)| *r as f64 * p).sum()
    }

    /// Expected rating mapped onto [0, 1].
    pub fn normalized(&self) -> f64 {
        normalize_rating(self.expected(), self.lo, self.hi)
    }
}

pub fn normalize_rating(rating: f64, lo: i32, hi: i32) -> f64 {
    ((rating - lo as f64) / (hi - lo) as f64).clamp(0.0, 1.0)
}

fn parse_rating_token(token: &str) -> Option<i32> {
    let t = token.trim();
    if t.is_empty() || !t.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    t.parse().ok()
}

/// Last integer in `text` that lies inside the scale.
pub fn parse_rating(text: &str, lo: i32, hi: i32) -> Option<i32> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse::<i32>().ok())
        .rfind(|r| (lo..=hi).contains(r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GEvalOutcome {
    pub score: f64,
    pub expected_rating: f64,
    pub distribution: Option<RatingDistribution>,
    /// Ratings parsed from sampled answers when logprobs were unavailable.
    pub sampled_ratings: Vec<i32>,
    pub method: String,
}

pub struct GEvalJudge<'a> {
    pub client: &'a Client,
    pub judge: &'a ModelSpec,
    pub prompt: &'a str,
    pub scale: (i32, i32),
    pub fallback_samples: usize,
}

impl GEvalJudge<'_> {
    pub fn render(&self, source: &str, candidate: &str) -> Result<String, String> {
        let (lo, hi) = (self.scale.0.to_string(), self.scale.1.to_string());
        render_with(self.prompt, |name| match name {
            "source" => Some(source),
            "candidate" => Some(candidate),
            "lo" => Some(lo.as_str()),
            "hi" => Some(hi.as_str()),
            _ => None,
        })
        .map_err(|e| e.to_string())
    }

    /// Scores `candidate` against `source`. Uses the rating-token
    /// distribution when the judge returns logprobs, otherwise averages
    /// ratings parsed from `fallback_samples` answers at temperature 1.
    pub fn score(&self, source: &str, candidate: &str) -> Result<GEvalOutcome, String> {
        let (lo, hi) = self.scale;
        let prompt = self.render(source, candidate)?;
        let sampling = Sampling::from_model(self.judge);
        let shape = ResponseShape::Rating { lo, hi };
        let request = GenerationRequest::new(None, prompt.clone(), sampling.clone())
            .with_logprobs(TOP_LOGPROBS)
            .with_shape(shape.clone());
        let result = self.client.generate(&request).map_err(|e| e.to_string())?;

        if let Some(tokens) = &result.token_logprobs {
            if let Some(dist) = RatingDistribution::from_logprobs(lo, hi, tokens) {
                return Ok(GEvalOutcome {
                    score: dist.normalized(),
                    expected_rating: dist.expected(),
                    distribution: Some(dist),
                    sampled_ratings: vec![],
                    method: "logprobs".into(),
                });
            }
            let r = parse_rating(&result.text, lo, hi)
                .ok_or_else(|| format!("no rating in {lo}..={hi} found in judge output {:?}", result.text))?;
            let dist = RatingDistribution::from_weights(lo, hi, [(r, 1.0)]).expect("rating inside scale");
            return Ok(GEvalOutcome {
                score: dist.normalized(),
                expected_rating: r as f64,
                distribution: Some(dist),
                sampled_ratings: vec![r],
                method: "text".into(),
            });
        }

        let mut ratings = Vec::with_capacity(self.fallback_samples);
        for i in 0..self.fallback_samples {
            let s = Sampling {
                temperature: 1.0,
                seed: Some(sampling.seed.unwrap_or(0).wrapping_add(i as i64)),
                ..sampling.clone()
            };
            let req = GenerationRequest::new(None, prompt.clone(), s).with_shape(shape.clone());
            match self.client.generate(&req) {
                Ok(r) => ratings.extend(parse_rating(&r.text, lo, hi)),
                Err(e) => log::warn!("judge sample {i} failed: {e}"),
            }
        }
        if ratings.is_empty() {
            return Err(format!("none of {} judge samples contained a rating in {lo}..={hi}", self.fallback_samples));
        }
        let mean = ratings.iter().map(|r| *r as f64).sum::<f64>() / ratings.len() as f64;
        Ok(GEvalOutcome {
            score: normalize_rating(mean, lo, hi),
            expected_rating: mean,
            distribution: None,
            sampled_ratings: ratings,
            method: "sampling".into(),
        })
    }
}
