//! Completion backends: a live HTTP client for OpenAI-compatible chat
//! endpoints, a transcript layer that records and replays calls through the
//! content store, and cost accounting.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runstore::{now_rfc3339, CacheKey, ContentStore, StoreError};
use crate::task_model::TaskKind;

pub const ENV_API_KEY: &str = "E2G_API_KEY";
pub const ENV_API_BASE: &str = "E2G_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication rejected (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("rate limited; gave up after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no recorded transcript for key {key}")]
    ReplayMiss { key: CacheKey },
    #[error("backend returned an unusable response: {0}")]
    Protocol(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::RateLimited { .. } | BackendError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    /// Instance id and step; not part of the transcript key.
    pub request_tag: String,
}

pub const SHORT_ANSWER_MAX_TOKENS: u32 = 256;
pub const LONG_FORM_MAX_TOKENS: u32 = 1024;

pub fn default_max_output_tokens(task: &TaskKind) -> u32 {
    if task.is_long_form() {
        LONG_FORM_MAX_TOKENS
    } else {
        SHORT_ANSWER_MAX_TOKENS
    }
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            max_output_tokens: SHORT_ANSWER_MAX_TOKENS,
            temperature: 0.0,
            request_tag: String::new(),
        }
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.request_tag = tag.into();
        self
    }

    fn key_fields(&self) -> KeyFields<'_> {
        KeyFields {
            max_output_tokens: self.max_output_tokens,
            model_id: &self.model_id,
            prompt: &self.prompt,
            // -0.0 and 0.0 must share a key
            temperature: if self.temperature == 0.0 { 0.0 } else { self.temperature },
        }
    }

    /// Digest of (model, prompt, max tokens, temperature).
    pub fn transcript_key(&self) -> CacheKey {
        let canonical = serde_json::to_vec(&self.key_fields()).expect("key fields serialize");
        CacheKey::of_bytes(&canonical)
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct KeyFields<'a> {
    max_output_tokens: u32,
    model_id: &'a str,
    prompt: &'a str,
    temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub latency_ms: u64,
    pub source: ResponseSource,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Currency per 1K tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub input_rate: f64,
    pub output_rate: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            input_rate: 0.0,
            output_rate: 0.0,
        }
    }
}

pub fn estimate_cost(resp: &CompletionResponse, model: &CostModel) -> f64 {
    resp.prompt_tokens as f64 / 1000.0 * model.input_rate + resp.output_tokens as f64 / 1000.0 * model.output_rate
}

/// Blocks callers once `max` permits are held.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    held: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            held: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut held = self.held.lock().expect("limiter lock");
        while *held >= self.max {
            held = self.freed.wait(held).expect("limiter lock");
        }
        *held += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.held.lock().expect("limiter lock")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut held = self.limiter.held.lock().expect("limiter lock");
        *held -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL; requests go to `<endpoint>/chat/completions`.
    pub endpoint: String,
    pub api_key: String,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            max_retries: 5,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
            timeout: Duration::from_secs(120),
            max_in_flight: 4,
        }
    }

    /// Reads the endpoint and credential from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| BackendError::Config(format!("{ENV_API_KEY} is not set")))?;
        let base = std::env::var(ENV_API_BASE).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        Ok(Self::new(base, key))
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    prompt_tokens: u32,
    completion_tokens: u32,
}

/// Live client for OpenAI-compatible `/chat/completions` endpoints.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    limiter: InFlightLimiter,
    attempts: AtomicU64,
}

enum Attempt {
    Done(CompletionResponse),
    Retry { rate_limited: bool, message: String, wait: Option<Duration> },
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            limiter: InFlightLimiter::new(config.max_in_flight),
            config,
            client,
            attempts: AtomicU64::new(0),
        })
    }

    /// HTTP requests sent so far, including retries.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.config.initial_backoff.saturating_mul(factor).min(self.config.max_backoff)
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<Attempt, BackendError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        });
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let resp = match self.client.post(&url).bearer_auth(&self.config.api_key).json(&body).send() {
            Ok(r) => r,
            Err(e) => {
                return Ok(Attempt::Retry {
                    rate_limited: false,
                    message: e.to_string(),
                    wait: None,
                })
            }
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = resp.text().unwrap_or_default();
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth { status, message: text }),
            429 => {
                return Ok(Attempt::Retry {
                    rate_limited: true,
                    message: text,
                    wait: retry_after,
                })
            }
            500..=599 | 408 => {
                return Ok(Attempt::Retry {
                    rate_limited: false,
                    message: format!("HTTP {status}: {text}"),
                    wait: retry_after,
                })
            }
            _ => return Err(BackendError::Http { status, body: text }),
        }
        let latency_ms = started.elapsed().as_millis() as u64;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("invalid response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .filter(|c| !c.trim().is_empty())
            .ok_or_else(|| BackendError::Protocol("empty completion".into()))?;
        let usage = parsed.usage.unwrap_or(ChatUsage {
            prompt_tokens: crate::prompting::estimate_tokens(&request.prompt) as u32,
            completion_tokens: crate::prompting::estimate_tokens(&content) as u32,
        });
        Ok(Attempt::Done(CompletionResponse {
            text: content,
            prompt_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
            latency_ms,
            source: ResponseSource::Live,
        }))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let _permit = self.limiter.acquire();
        let mut retry = 0u32;
        loop {
            match self.attempt(request)? {
                Attempt::Done(resp) => return Ok(resp),
                Attempt::Retry {
                    rate_limited,
                    message,
                    wait,
                } => {
                    if retry >= self.config.max_retries {
                        let attempts = retry + 1;
                        return Err(if rate_limited {
                            BackendError::RateLimited { attempts }
                        } else {
                            BackendError::Transport { attempts, message }
                        });
                    }
                    let delay = wait.unwrap_or_else(|| self.backoff(retry)).min(self.config.max_backoff);
                    warn!(
                        "request {} failed ({}), retry {} in {:?}",
                        request.request_tag,
                        if rate_limited { "rate limited" } else { message.as_str() },
                        retry + 1,
                        delay
                    );
                    std::thread::sleep(delay);
                    retry += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRequest {
    pub model_id: String,
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptResponse {
    pub text: String,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub latency_ms: u64,
}

/// Payload of one stored transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub schema_version: u32,
    pub request: TranscriptRequest,
    pub response: TranscriptResponse,
    pub recorded_at: String,
}

impl Transcript {
    pub fn new(request: &CompletionRequest, response: &CompletionResponse) -> Self {
        Self {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            request: TranscriptRequest {
                model_id: request.model_id.clone(),
                prompt: request.prompt.clone(),
                max_output_tokens: request.max_output_tokens,
                temperature: request.temperature,
            },
            response: TranscriptResponse {
                text: response.text.clone(),
                prompt_tokens: response.prompt_tokens,
                output_tokens: response.output_tokens,
                latency_ms: response.latency_ms,
            },
            recorded_at: now_rfc3339(),
        }
    }

    pub fn to_response(&self) -> CompletionResponse {
        CompletionResponse {
            text: self.response.text.clone(),
            prompt_tokens: self.response.prompt_tokens,
            output_tokens: self.response.output_tokens,
            latency_ms: self.response.latency_ms,
            source: ResponseSource::Replay,
        }
    }
}

pub const TRANSCRIPT_NAMESPACE: &str = "transcripts";

/// Record/replay layer over the content store.
///
/// In replay mode every call must hit a stored transcript; in record mode a
/// miss is forwarded to the live backend and the result is stored.
pub struct TranscriptBackend {
    store: ContentStore,
    live: Option<Arc<dyn Backend>>,
}

impl TranscriptBackend {
    pub fn replay(store: ContentStore) -> Self {
        Self { store, live: None }
    }

    pub fn record(store: ContentStore, live: Arc<dyn Backend>) -> Self {
        Self { store, live: Some(live) }
    }

    pub fn is_replay(&self) -> bool {
        self.live.is_none()
    }

    pub fn lookup(&self, key: &CacheKey) -> Result<Option<Transcript>, BackendError> {
        match self.store.get(key)? {
            None => Ok(None),
            Some(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| BackendError::Protocol(format!("transcript {key} unreadable: {e}"))),
        }
    }
}

impl Backend for TranscriptBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let key = request.transcript_key();
        if let Some(t) = self.lookup(&key)? {
            debug!("transcript hit {key} for {}", request.request_tag);
            return Ok(t.to_response());
        }
        let live = self.live.as_ref().ok_or_else(|| BackendError::ReplayMiss { key: key.clone() })?;
        let response = live.complete(request)?;
        let payload = serde_json::to_vec(&Transcript::new(request, &response)).expect("transcript serializes");
        match self.store.put(&key, &payload) {
            Ok(_) => Ok(response),
            // a concurrent writer recorded the same request first; its copy wins
            Err(StoreError::Integrity(_)) => self
                .lookup(&key)?
                .map(|t| t.to_response())
                .ok_or(BackendError::ReplayMiss { key }),
            Err(e) => Err(e.into()),
        }
    }
}

/// Wraps a backend and counts calls reaching it.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicU64,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// Backend driven by a closure; used for scripted runs and tests.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResponse, BackendError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (self.0)(request)
    }
}
