use sha2::{Digest, Sha256};

use super::{GenerationRequest, GenerationResult, ProviderError, ResponseShape, TextGenerator};
use crate::model::{canonical_json, to_value, ModelSpec, TokenLogprob, TopAlternative, Usage};

const VOCABULARY: [&str; 64] = [
    "patient",
    "reports",
    "mild",
    "pain",
    "since",
    "last",
    "week",
    "denies",
    "fever",
    "history",
    "of",
    "hypertension",
    "blood",
    "pressure",
    "stable",
    "exam",
    "shows",
    "no",
    "acute",
    "distress",
    "plan",
    "continue",
    "current",
    "medication",
    "follow",
    "up",
    "in",
    "two",
    "weeks",
    "chest",
    "clear",
    "heart",
    "regular",
    "rhythm",
    "abdomen",
    "soft",
    "knee",
    "swelling",
    "improved",
    "with",
    "rest",
    "labs",
    "within",
    "normal",
    "limits",
    "recommend",
    "physical",
    "therapy",
    "diabetes",
    "well",
    "controlled",
    "on",
    "metformin",
    "cough",
    "resolved",
    "headache",
    "intermittent",
    "sleep",
    "poor",
    "diet",
    "exercise",
    "counseled",
    "the",
    "and",
];

/// Deterministic offline provider: every answer is a pure function of
/// (model spec, request), derived from a SHA-256 digest.
#[derive(Debug, Clone)]
pub struct MockProvider {
    model: ModelSpec,
}

struct DigestStream {
    seed: [u8; 32],
    block: [u8; 32],
    counter: u64,
    pos: usize,
}

impl DigestStream {
    fn new(seed: [u8; 32]) -> Self {
        Self { seed, block: seed, counter: 0, pos: 0 }
    }

    fn next_byte(&mut self) -> u8 {
        if self.pos == 32 {
            self.counter += 1;
            let mut h = Sha256::new();
            h.update(self.seed);
            h.update(self.counter.to_le_bytes());
            self.block = h.finalize().into();
            self.pos = 0;
        }
        let b = self.block[self.pos];
        self.pos += 1;
        b
    }

    fn below(&mut self, n: usize) -> usize {
        self.next_byte() as usize % n.max(1)
    }
}

impl MockProvider {
    pub fn new(model: ModelSpec) -> Self {
        Self { model }
    }

    fn digest(&self, request: &GenerationRequest) -> [u8; 32] {
        let payload = serde_json::json!({ "model": to_value(&self.model), "request": to_value(request) });
        Sha256::digest(canonical_json(&payload).as_bytes()).into()
    }

    fn sentence(stream: &mut DigestStream) -> String {
        let len = 5 + stream.below(8);
        let words: Vec<&str> = (0..len).map(|_| VOCABULARY[stream.below(VOCABULARY.len())]).collect();
        let mut s = words.join(" ");
        if let Some(first) = s.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        s.push('.');
        s
    }

    fn rating_distribution(stream: &mut DigestStream, lo: i32, hi: i32, chosen: i32) -> Vec<(i32, f64)> {
        let weights: Vec<(i32, f64)> = (lo..=hi)
            .map(|r| {
                let w = 1.0 + stream.next_byte() as f64 / 32.0;
                (r, if r == chosen { w + 40.0 } else { w })
            })
            .collect();
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        weights.into_iter().map(|(r, w)| (r, w / total)).collect()
    }
}

impl TextGenerator for MockProvider {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError> {
        request.check()?;
        let seed = self.digest(request);
        let mut stream = DigestStream::new(seed);
        let top = request.top_logprobs as usize;

        let (text, token_logprobs) = match &request.shape {
            ResponseShape::Rating { lo, hi } => {
                let (lo, hi) = (*lo.min(hi), *hi.max(lo));
                let chosen = lo + stream.below((hi - lo + 1) as usize) as i32;
                let dist = Self::rating_distribution(&mut stream, lo, hi, chosen);
                let logprobs = request.want_logprobs.then(|| {
                    let mut alts: Vec<TopAlternative> =
                        dist.iter().map(|(r, p)| TopAlternative { token: r.to_string(), logprob: p.ln() }).collect();
                    alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
                    alts.truncate(top);
                    let own = dist.iter().find(|(r, _)| *r == chosen).map_or(0.0, |(_, p)| p.ln());
                    vec![TokenLogprob { token: chosen.to_string(), logprob: own, top_alternatives: alts }]
                });
                (chosen.to_string(), logprobs)
            }
            ResponseShape::Choice { options } if !options.is_empty() => {
                (options[stream.below(options.len())].clone(), None)
            }
            ResponseShape::Lines { max } => {
                let lines: Vec<String> = (0..*max)
                    .map(|i| {
                        let a = VOCABULARY[stream.below(VOCABULARY.len())];
                        let b = VOCABULARY[stream.below(VOCABULARY.len())];
                        format!("{}. Does the note mention {a} {b} (item {})?", i + 1, i + 1)
                    })
                    .collect();
                (lines.join("\n"), None)
            }
            _ => {
                let n = 3 + stream.below(4);
                let sentences: Vec<String> = (0..n).map(|_| Self::sentence(&mut stream)).collect();
                (sentences.join(" "), None)
            }
        };

        let token_logprobs = match token_logprobs {
            Some(lp) => Some(lp),
            None if request.want_logprobs => Some(
                text.split_whitespace()
                    .map(|tok| {
                        let logprob = -(stream.next_byte() as f64) / 64.0;
                        let top_alternatives = (0..top)
                            .map(|k| TopAlternative {
                                token: VOCABULARY[stream.below(VOCABULARY.len())].to_string(),
                                logprob: logprob - 0.5 - k as f64,
                            })
                            .collect();
                        TokenLogprob { token: tok.to_string(), logprob, top_alternatives }
                    })
                    .collect(),
            ),
            None => None,
        };

        let prompt_tokens = request.system.as_deref().map_or(0, |s| s.split_whitespace().count())
            + request.user.split_whitespace().count();
        Ok(GenerationResult {
            usage: Usage {
                prompt_tokens: prompt_tokens as u64,
                completion_tokens: text.split_whitespace().count() as u64,
            },
            text,
            token_logprobs,
            model_fingerprint: Some(format!(
                "mock-{}",
                &hex::encode(Sha256::digest(self.model.model_name.as_bytes()))[..8]
            )),
        })
    }
}
