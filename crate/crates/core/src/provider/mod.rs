//! Text-generation providers behind one interface.
//!
//! [`Gateway`] resolves a [`ModelSpec`] into a client, wraps it with the
//! retry policy and a per-endpoint concurrency bound, and runs batches with
//! positional alignment and per-item failure isolation.

mod mock;
mod openai;
mod scripted;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::MockProvider;
pub use openai::{chat_completions_url, OpenAiCompatibleClient};
pub use scripted::{prompt_hash, ScriptedProvider, ScriptedResponse};

use crate::model::{ModelSpec, ProviderKind, TokenLogprob, Usage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Sampling {
    pub fn from_model(model: &ModelSpec) -> Self {
        Self { temperature: model.temperature, top_p: model.top_p, seed: model.seed, max_tokens: model.max_tokens }
    }
}

/// What shape of answer the caller expects. Never sent over the wire; the
/// mock provider uses it to produce parseable synthetic answers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ResponseShape {
    #[default]
    FreeText,
    Rating {
        lo: i32,
        hi: i32,
    },
    Lines {
        max: usize,
    },
    Choice {
        options: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
    pub sampling: Sampling,
    #[serde(default)]
    pub want_logprobs: bool,
    #[serde(default)]
    pub top_logprobs: u8,
    #[serde(default)]
    pub shape: ResponseShape,
}

impl GenerationRequest {
    pub fn new(system: Option<String>, user: impl Into<String>, sampling: Sampling) -> Self {
        Self {
            system,
            user: user.into(),
            sampling,
            want_logprobs: false,
            top_logprobs: 0,
            shape: ResponseShape::FreeText,
        }
    }

    pub fn with_logprobs(mut self, top: u8) -> Self {
        self.want_logprobs = true;
        self.top_logprobs = top;
        self
    }

    pub fn with_shape(mut self, shape: ResponseShape) -> Self {
        self.shape = shape;
        self
    }

    pub fn check(&self) -> Result<(), ProviderError> {
        if self.user.is_empty() {
            return Err(ProviderError::InvalidRequest("user prompt must not be empty".into()));
        }
        if self.top_logprobs > 20 {
            return Err(ProviderError::InvalidRequest("top_logprobs must be in 0..=20".into()));
        }
        if self.top_logprobs > 0 && !self.want_logprobs {
            return Err(ProviderError::InvalidRequest("top_logprobs requires want_logprobs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_fingerprint: Option<String>,
}

impl GenerationResult {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), token_logprobs: None, usage: Usage::default(), model_fingerprint: None }
    }
}

#[derive(Debug, Clone, Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request too large: {0}")]
    RequestTooLarge(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ProviderError> },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no scripted response for prompt {0}")]
    UnknownPrompt(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transient(_))
    }
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError>;
}

impl<F> TextGenerator for F
where
    F: Fn(&GenerationRequest) -> Result<GenerationResult, ProviderError> + Send + Sync,
{
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError> {
        self(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub base_delay_ms: u64,
    pub factor: f64,
    pub jitter: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base_delay_ms: 500, factor: 2.0, jitter: 0.2, max_attempts: 5 }
    }
}

impl RetryPolicy {
    /// Nominal delay before attempt `attempt + 1` (attempts count from 1).
    pub fn nominal_delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.factor.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64(ms / 1000.0)
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.nominal_delay(attempt).as_secs_f64();
        let j = if self.jitter > 0.0 { rand::thread_rng().gen_range(-self.jitter..=self.jitter) } else { 0.0 };
        Duration::from_secs_f64((nominal * (1.0 + j)).max(0.0))
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    if attempt >= max {
                        return Err(ProviderError::RetriesExhausted { attempts: attempt, last: Box::new(e) });
                    }
                    log::debug!("attempt {attempt} failed ({e}); retrying");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut p = self.sem.permits.lock().unwrap_or_else(|e| e.into_inner());
        *p += 1;
        self.sem.cv.notify_one();
    }
}

/// A resolved client: raw provider + retry policy + endpoint bound.
#[derive(Clone)]
pub struct Client {
    inner: Arc<dyn TextGenerator>,
    retry: RetryPolicy,
    limiter: Arc<Semaphore>,
    max_in_flight: usize,
}

impl Client {
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError> {
        request.check()?;
        self.retry.run(|| {
            let _permit = self.limiter.acquire();
            self.inner.generate(request)
        })
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Runs all requests, delivering results to `sink` in request order as
    /// soon as each ordered prefix is complete.
    pub fn for_each_ordered(
        &self,
        requests: &[GenerationRequest],
        sink: impl FnMut(usize, Result<GenerationResult, ProviderError>),
    ) {
        run_ordered(requests, self.max_in_flight, |r| self.generate(r), sink);
    }

    pub fn generate_batch(&self, requests: &[GenerationRequest]) -> Vec<Result<GenerationResult, ProviderError>> {
        let mut out = Vec::with_capacity(requests.len());
        self.for_each_ordered(requests, |_, r| out.push(r));
        out
    }
}

/// Applies `f` to every item using up to `workers` threads and feeds the
/// results to `sink` in input order. If a worker panics the remaining
/// workers stop picking up items and the panic is propagated.
pub fn run_ordered<T, R, F, S>(items: &[T], workers: usize, f: F, mut sink: S)
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
    S: FnMut(usize, R),
{
    if items.is_empty() {
        return;
    }
    let workers = workers.clamp(1, items.len());
    if workers == 1 {
        for (i, item) in items.iter().enumerate() {
            sink(i, f(item));
        }
        return;
    }
    let next = AtomicUsize::new(0);
    let aborted = AtomicBool::new(false);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, R)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, aborted, f) = (&next, &aborted, &f);
            scope.spawn(move || {
                struct AbortOnPanic<'a>(&'a AtomicBool);
                impl Drop for AbortOnPanic<'_> {
                    fn drop(&mut self) {
                        if std::thread::panicking() {
                            self.0.store(true, Ordering::SeqCst);
                        }
                    }
                }
                let _guard = AbortOnPanic(aborted);
                loop {
                    if aborted.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(&items[i]);
                    if tx.send((i, r)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut want = 0;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&want) {
                sink(want, r);
                want += 1;
            }
            if aborted.load(Ordering::SeqCst) {
                break;
            }
        }
    });
}

/// Resolves model specs into bounded, retrying clients.
pub struct Gateway {
    retry: RetryPolicy,
    max_in_flight: usize,
    timeout: Duration,
    overrides: HashMap<String, Arc<dyn TextGenerator>>,
    limiters: Mutex<HashMap<String, Arc<Semaphore>>>,
    scripted: Mutex<HashMap<PathBuf, Arc<ScriptedProvider>>>,
    base_dir: Option<PathBuf>,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new(RetryPolicy::default(), 4)
    }
}

impl Gateway {
    pub fn new(retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            retry,
            max_in_flight: max_in_flight.max(1),
            timeout: Duration::from_secs(300),
            overrides: HashMap::new(),
            limiters: Mutex::new(HashMap::new()),
            scripted: Mutex::new(HashMap::new()),
            base_dir: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Resolves relative scripted fixture paths against `dir`.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    /// Routes every model named `model_name` to `generator`, regardless of
    /// its provider kind.
    pub fn register(&mut self, model_name: impl Into<String>, generator: Arc<dyn TextGenerator>) {
        self.overrides.insert(model_name.into(), generator);
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn endpoint_key(model: &ModelSpec) -> String {
        match (&model.provider, &model.endpoint_url) {
            (ProviderKind::OpenaiCompatible, Some(url)) => url.trim_end_matches('/').to_string(),
            (kind, _) => format!("{kind:?}:{}", model.model_name),
        }
    }

    fn limiter(&self, key: &str) -> Arc<Semaphore> {
        let mut map = self.limiters.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(key.to_string()).or_insert_with(|| Arc::new(Semaphore::new(self.max_in_flight))).clone()
    }

    fn scripted(&self, path: &Path) -> Result<Arc<ScriptedProvider>, ProviderError> {
        let mut map = self.scripted.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(p) = map.get(path) {
            return Ok(p.clone());
        }
        let provider = Arc::new(ScriptedProvider::from_file(path)?);
        map.insert(path.to_path_buf(), provider.clone());
        Ok(provider)
    }

    pub fn client(&self, model: &ModelSpec) -> Result<Client, ProviderError> {
        let inner: Arc<dyn TextGenerator> = if let Some(g) = self.overrides.get(&model.model_name) {
            g.clone()
        } else {
            match model.provider {
                ProviderKind::Mock => Arc::new(MockProvider::new(model.clone())),
                ProviderKind::Scripted => {
                    let path = model
                        .fixture
                        .as_ref()
                        .ok_or_else(|| ProviderError::Config("scripted provider requires a fixture".into()))?;
                    match &self.base_dir {
                        Some(base) => self.scripted(&base.join(path))?,
                        None => self.scripted(Path::new(path))?,
                    }
                }
                ProviderKind::OpenaiCompatible => Arc::new(OpenAiCompatibleClient::from_spec(model, self.timeout)?),
            }
        };
        Ok(Client {
            inner,
            retry: self.retry.clone(),
            limiter: self.limiter(&Self::endpoint_key(model)),
            max_in_flight: self.max_in_flight,
        })
    }

    pub fn generate(&self, model: &ModelSpec, request: &GenerationRequest) -> Result<GenerationResult, ProviderError> {
        self.client(model)?.generate(request)
    }

    pub fn generate_batch(
        &self,
        model: &ModelSpec,
        requests: &[GenerationRequest],
    ) -> Vec<Result<GenerationResult, ProviderError>> {
        match self.client(model) {
            Ok(client) => client.generate_batch(requests),
            Err(e) => requests.iter().map(|_| Err(e.clone())).collect(),
        }
    }
}
