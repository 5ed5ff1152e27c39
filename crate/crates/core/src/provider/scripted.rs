use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenerationRequest, GenerationResult, ProviderError, TextGenerator};
use crate::model::{canonical_json, TokenLogprob};

/// Hash identifying a prompt in scripted fixtures: SHA-256 hex of the
/// canonical JSON object `{"system": ..., "user": ...}`.
pub fn prompt_hash(system: Option<&str>, user: &str) -> String {
    let v = serde_json::json!({ "system": system, "user": user });
    hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), token_logprobs: None }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
enum FixtureEntry {
    One(ScriptedResponse),
    Many(Vec<ScriptedResponse>),
}

#[derive(Debug, Default, Deserialize, Serialize)]
struct FixtureFile {
    responses: HashMap<String, FixtureEntry>,
}

/// Replays fixture responses keyed by [`prompt_hash`]. When a prompt maps to
/// several responses they are returned in turn, cycling.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    entries: Mutex<HashMap<String, (Vec<ScriptedResponse>, usize)>>,
}

impl ScriptedProvider {
    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("cannot read fixture {}: {e}", path.display())))?;
        let file: FixtureFile = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Config(format!("invalid fixture {}: {e}", path.display())))?;
        let provider = Self::default();
        for (hash, entry) in file.responses {
            let list = match entry {
                FixtureEntry::One(r) => vec![r],
                FixtureEntry::Many(rs) => rs,
            };
            provider.lock().insert(hash, (list, 0));
        }
        Ok(provider)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, (Vec<ScriptedResponse>, usize)>> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn insert(&self, system: Option<&str>, user: &str, response: ScriptedResponse) {
        self.insert_many(system, user, vec![response]);
    }

    pub fn insert_many(&self, system: Option<&str>, user: &str, responses: Vec<ScriptedResponse>) {
        self.lock().insert(prompt_hash(system, user), (responses, 0));
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Serializes the fixture table in the on-disk format.
    pub fn to_fixture_json(&self) -> serde_json::Value {
        let responses: HashMap<String, FixtureEntry> =
            self.lock().iter().map(|(k, (v, _))| (k.clone(), FixtureEntry::Many(v.clone()))).collect();
        serde_json::to_value(FixtureFile { responses }).expect("fixtures serialize")
    }
}

impl TextGenerator for ScriptedProvider {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError> {
        let hash = prompt_hash(request.system.as_deref(), &request.user);
        let mut entries = self.lock();
        let (responses, next) = entries.get_mut(&hash).ok_or_else(|| ProviderError::UnknownPrompt(hash.clone()))?;
        if responses.is_empty() {
            return Err(ProviderError::UnknownPrompt(hash));
        }
        let r = responses[*next % responses.len()].clone();
        *next += 1;
        let token_logprobs = if request.want_logprobs { r.token_logprobs } else { None };
        Ok(GenerationResult { text: r.text, token_logprobs, usage: Default::default(), model_fingerprint: None })
    }
}
