//! Client for OpenAI-compatible `POST /v1/chat/completions` endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GenerationRequest, GenerationResult, ProviderError, TextGenerator};
use crate::model::{ModelSpec, TokenLogprob, TopAlternative, Usage};

#[derive(Debug, Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
    top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u8>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
    #[serde(default)]
    system_fingerprint: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Debug, Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireAlternative>,
}

#[derive(Debug, Deserialize)]
struct WireAlternative {
    token: String,
    logprob: f64,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Full URL of the chat-completions route for a configured endpoint.
/// Endpoints may be given with or without the trailing `/v1`.
pub fn chat_completions_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/v1") {
        format!("{base}/chat/completions")
    } else {
        format!("{base}/v1/chat/completions")
    }
}

pub struct OpenAiCompatibleClient {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl OpenAiCompatibleClient {
    pub fn from_spec(spec: &ModelSpec, timeout: Duration) -> Result<Self, ProviderError> {
        let endpoint = spec
            .endpoint_url
            .as_deref()
            .ok_or_else(|| ProviderError::Config("openai_compatible requires endpoint_url".into()))?;
        let api_key = match &spec.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ProviderError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        Ok(Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            url: chat_completions_url(endpoint),
            model: spec.model_name.clone(),
            api_key,
        })
    }

    fn classify(status: u16, body: String) -> ProviderError {
        match status {
            401 | 403 => ProviderError::Auth(body),
            413 => ProviderError::RequestTooLarge(body),
            400 if body.contains("context_length") || body.contains("maximum context") => {
                ProviderError::RequestTooLarge(body)
            }
            408 | 409 | 429 | 500..=599 => ProviderError::Transient(format!("HTTP {status}: {body}")),
            _ => ProviderError::Http { status, body },
        }
    }

    fn parse(body: &str) -> Result<GenerationResult, ProviderError> {
        let resp: ChatResponse =
            serde_json::from_str(body).map_err(|e| ProviderError::Protocol(format!("{e}: {body}")))?;
        let choice = resp.choices.into_iter().next().ok_or_else(|| ProviderError::Protocol("no choices".into()))?;
        let text = choice.message.content.ok_or_else(|| ProviderError::Protocol("message has no content".into()))?;
        let token_logprobs = choice.logprobs.and_then(|l| l.content).map(|tokens| {
            tokens
                .into_iter()
                .map(|t| TokenLogprob {
                    token: t.token,
                    logprob: t.logprob,
                    top_alternatives: t
                        .top_logprobs
                        .into_iter()
                        .map(|a| TopAlternative { token: a.token, logprob: a.logprob })
                        .collect(),
                })
                .collect()
        });
        let usage = resp
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(GenerationResult { text, token_logprobs, usage, model_fingerprint: resp.system_fingerprint })
    }
}

impl TextGenerator for OpenAiCompatibleClient {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &request.system {
            messages.push(Message { role: "system", content: system });
        }
        messages.push(Message { role: "user", content: &request.user });
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: request.sampling.temperature,
            top_p: request.sampling.top_p,
            seed: request.sampling.seed,
            max_tokens: request.sampling.max_tokens,
            logprobs: request.want_logprobs,
            top_logprobs: (request.want_logprobs && request.top_logprobs > 0).then_some(request.top_logprobs),
        };
        let mut call = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_string(&body).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        match call.send_string(&payload) {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| ProviderError::Transient(e.to_string()))?;
                Self::parse(&text)
            }
            Err(ureq::Error::Status(status, resp)) => {
                Err(Self::classify(status, resp.into_string().unwrap_or_default()))
            }
            Err(ureq::Error::Transport(t)) => Err(ProviderError::Transient(t.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_joining() {
        assert_eq!(chat_completions_url("http://h:8000"), "http://h:8000/v1/chat/completions");
        assert_eq!(chat_completions_url("http://h:8000/v1/"), "http://h:8000/v1/chat/completions");
    }

    #[test]
    fn error_classes() {
        assert!(matches!(OpenAiCompatibleClient::classify(401, String::new()), ProviderError::Auth(_)));
        assert!(matches!(OpenAiCompatibleClient::classify(413, String::new()), ProviderError::RequestTooLarge(_)));
        assert!(OpenAiCompatibleClient::classify(429, String::new()).is_retryable());
        assert!(OpenAiCompatibleClient::classify(503, String::new()).is_retryable());
        assert!(!OpenAiCompatibleClient::classify(404, String::new()).is_retryable());
        assert!(matches!(
            OpenAiCompatibleClient::classify(400, "maximum context length exceeded".into()),
            ProviderError::RequestTooLarge(_)
        ));
    }

    #[test]
    fn parses_logprobs() {
        let body = r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"Rating: 4"},
            "logprobs":{"content":[{"token":"Rating","logprob":-0.01,"top_logprobs":[]},
            {"token":" 4","logprob":-0.69,"top_logprobs":[{"token":" 4","logprob":-0.69},{"token":" 5","logprob":-0.7}]}]}}],
            "usage":{"prompt_tokens":10,"completion_tokens":2,"total_tokens":12},"system_fingerprint":"fp"}"#;
        let r = OpenAiCompatibleClient::parse(body).unwrap();
        assert_eq!(r.text, "Rating: 4");
        let lp = r.token_logprobs.unwrap();
        assert_eq!(lp[1].top_alternatives.len(), 2);
        assert_eq!(r.usage.completion_tokens, 2);
        assert_eq!(r.model_fingerprint.as_deref(), Some("fp"));
        assert!(matches!(OpenAiCompatibleClient::parse("{}"), Err(ProviderError::Protocol(_))));
        assert!(matches!(OpenAiCompatibleClient::parse(r#"{"choices":[]}"#), Err(ProviderError::Protocol(_))));
    }

    #[test]
    fn request_fields_are_wire_exact() {
        let body = ChatRequest {
            model: "m",
            messages: vec![Message { role: "user", content: "hi" }],
            temperature: 0.7,
            top_p: 0.95,
            seed: Some(42),
            max_tokens: None,
            logprobs: true,
            top_logprobs: Some(20),
        };
        let v = serde_json::to_value(&body).unwrap();
        let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, ["logprobs", "messages", "model", "seed", "temperature", "top_logprobs", "top_p"]);
    }
}
