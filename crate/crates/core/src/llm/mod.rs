//! Chat-completion boundary. Every model call in the crate goes through
//! [`LlmClient::complete`], which applies retries and the in-flight limit on
//! top of a [`ChatBackend`] (HTTP endpoint or scripted mock).

mod http;
mod mock;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{FlakyBackend, MockBackend, MockKey, ScriptMode};

/// Env var that overrides the configured auth token.
pub const AUTH_TOKEN_ENV: &str = "DUALREC_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// Hex SHA-256 over the role/content sequence. Any change to a prompt
/// template changes the digest.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(m.role.as_str().as_bytes());
        h.update([0u8]);
        h.update(m.content.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_name: String,
    pub seed: Option<u64>,
    /// Harness-side label used to match mock scripts; never sent on the wire.
    #[serde(skip)]
    pub scenario: Option<String>,
}

pub const DEFAULT_MAX_INPUT_TOKENS: u32 = 4096;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 16384;

impl CompletionRequest {
    pub fn new(model_name: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        CompletionRequest {
            messages,
            temperature: 0.2,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            model_name: model_name.into(),
            seed: None,
            scenario: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn scenario(mut self, label: impl Into<String>) -> Self {
        self.scenario = Some(label.into());
        self
    }

    pub fn digest(&self) -> String {
        prompt_digest(&self.messages)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if let Some(m) = self.messages.iter().find(|m| m.role != Role::Assistant && m.content.trim().is_empty()) {
            return Err(LlmError::InvalidRequest(format!("empty {} message", m.role.as_str())));
        }
        Ok(())
    }
}

/// Coarse error class for callers that branch on failure type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorKind {
    Timeout,
    RateLimited,
    MalformedResponse,
    AuthFailed,
    Transport,
    Server,
    InvalidRequest,
    Config,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by backend")]
    RateLimited,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unscripted prompt (digest {digest})")]
    UnscriptedPrompt { digest: String },
    #[error("authentication failed")]
    AuthFailed,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server error (status {0})")]
    Server(u16),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script already bound for {0}")]
    DuplicateScript(String),
}

impl LlmError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            LlmError::Timeout => ErrorKind::Timeout,
            LlmError::RateLimited => ErrorKind::RateLimited,
            LlmError::MalformedResponse(_) | LlmError::UnscriptedPrompt { .. } => ErrorKind::MalformedResponse,
            LlmError::AuthFailed => ErrorKind::AuthFailed,
            LlmError::Transport(_) => ErrorKind::Transport,
            LlmError::Server(_) => ErrorKind::Server,
            LlmError::InvalidRequest(_) => ErrorKind::InvalidRequest,
            LlmError::DuplicateScript(_) => ErrorKind::Config,
        }
    }

    /// Whether a retry may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, LlmError::Timeout | LlmError::RateLimited | LlmError::Transport(_) | LlmError::Server(_))
    }
}

/// A single-attempt chat endpoint.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError>;

    fn name(&self) -> &str {
        "backend"
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).send(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Auth token wrapper that never prints its value.
#[derive(Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Secret(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0.is_empty() { "Secret(<empty>)" } else { "Secret(***)" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub auth_token: Secret,
    pub max_retries: u32,
    pub backoff_initial_ms: u64,
    pub backoff_multiplier: f64,
    pub backoff_max_ms: u64,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            auth_token: Secret::default(),
            max_retries: 3,
            backoff_initial_ms: 500,
            backoff_multiplier: 2.0,
            backoff_max_ms: 30_000,
            timeout_ms: 120_000,
            max_in_flight: 8,
        }
    }
}

impl BackendConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_backoff: Duration::from_millis(self.backoff_initial_ms),
            multiplier: self.backoff_multiplier,
            max_backoff: Duration::from_millis(self.backoff_max_ms),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.timeout_ms == 0 {
            return Err(LlmError::InvalidRequest("timeout must be positive".into()));
        }
        if self.backoff_multiplier < 1.0 {
            return Err(LlmError::InvalidRequest("backoff multiplier must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(LlmError::InvalidRequest("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }

    /// Token from the environment if set, otherwise the configured one.
    pub fn resolved_token(&self) -> Secret {
        match std::env::var(AUTH_TOKEN_ENV) {
            Ok(t) if !t.is_empty() => Secret::new(t),
            _ => self.auth_token.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_retries: 0, initial_backoff: Duration::ZERO, multiplier: 1.0, max_backoff: Duration::ZERO }
    }

    /// Retries with no sleep between attempts.
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy { max_retries, ..RetryPolicy::none() }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        let scaled = self.initial_backoff.as_secs_f64() * self.multiplier.powi(retry as i32);
        Duration::from_secs_f64(scaled.min(self.max_backoff.as_secs_f64()))
    }
}

struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Retrying, concurrency-limited front end over a backend.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient").field("backend", &self.backend.name()).field("retry", &self.retry).finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        LlmClient { backend, retry, limiter: Arc::new(Limiter::new(max_in_flight)) }
    }

    /// Client with no retries and unbounded-enough parallelism, for mocks.
    pub fn direct(backend: Arc<dyn ChatBackend>) -> Self {
        Self::new(backend, RetryPolicy::none(), 64)
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Sends `request`, retrying transient failures up to `max_retries`
    /// times. Returns the assistant text verbatim, or the last error.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        let _slot = self.limiter.acquire();
        let mut retry = 0;
        loop {
            match self.backend.send(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && retry < self.retry.max_retries => {
                    let wait = self.retry.backoff(retry);
                    log::debug!("{} failed ({e}); retry {} in {:?}", self.backend.name(), retry + 1, wait);
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
