//! Uniform chat-completion and embedding interfaces over model backends.
//!
//! A gateway wraps a backend (remote OpenAI-compatible endpoint or a
//! deterministic scripted mock), enforces the in-flight request cap, retries
//! transient failures with exponential backoff, and records every logical
//! call in the [`TraceLog`].

mod embed;
mod mock;
mod remote;

pub use embed::{EmbedBackend, EmbedGateway, HashEmbedder, RemoteEmbedder};
pub use mock::{prompt_hash, MatchMode, MockChat, MockEmbedder, MockRule, MockScript};
pub use remote::RemoteChat;

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{CallTag, EventKind, Outcome, TraceLog};

/// A single chat completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: usize,
    pub tag: CallTag,
    /// Tree node this request reasons about, when applicable; carried into
    /// the trace.
    pub node_id: Option<String>,
}

impl ChatRequest {
    /// Temperature defaults to 0 for every tag so pipelines reproduce.
    pub fn new(
        tag: CallTag,
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
    ) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            tag,
            node_id: None,
        }
    }

    pub fn with_node(mut self, node_id: impl Into<String>) -> Self {
        self.node_id = Some(node_id.into());
        self
    }
}

/// A completed chat response.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub backend_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
}

/// Backend selection and transport parameters for one gateway.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: String,
    /// Name of the environment variable holding the bearer credential.
    /// Empty means the endpoint needs no auth.
    #[serde(default)]
    pub api_key_env_var: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::request_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "defaults::max_concurrent_requests")]
    pub max_concurrent_requests: usize,
    #[serde(default = "defaults::backoff_base_ms")]
    pub backoff_base_ms: u64,
    /// Script file for mock backends (line-delimited rule records).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    /// Dimension of the local hashing embedder when this config backs an
    /// embedding gateway with `kind = mock`.
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
}

mod defaults {
    pub fn max_retries() -> u32 {
        3
    }
    pub fn request_timeout_ms() -> u64 {
        30_000
    }
    pub fn max_concurrent_requests() -> usize {
        4
    }
    pub fn backoff_base_ms() -> u64 {
        500
    }
    pub fn embed_dim() -> usize {
        256
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: String::new(),
            api_key_env_var: String::new(),
            model_name: "mock".to_string(),
            max_retries: defaults::max_retries(),
            request_timeout_ms: defaults::request_timeout_ms(),
            max_concurrent_requests: defaults::max_concurrent_requests(),
            backoff_base_ms: defaults::backoff_base_ms(),
            mock_script: None,
            embed_dim: defaults::embed_dim(),
        }
    }

    pub fn remote(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Remote,
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            ..Self::mock()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrent_requests == 0 {
            return Err(Error::InvalidConfig(
                "max_concurrent_requests must be at least 1".into(),
            ));
        }
        if self.kind == BackendKind::Remote && self.endpoint_url.is_empty() {
            return Err(Error::InvalidConfig(
                "remote backend needs endpoint_url".into(),
            ));
        }
        Ok(())
    }
}

/// Counting semaphore bounding in-flight backend requests.
pub(crate) struct Limiter {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    pub(crate) fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> LimiterGuard<'_> {
        let mut permits = self.permits.lock().expect("limiter lock");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("limiter wait");
        }
        *permits -= 1;
        LimiterGuard { limiter: self }
    }
}

pub(crate) struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limiter.permits.lock().expect("limiter lock");
        *permits += 1;
        self.limiter.cv.notify_one();
    }
}

/// Raw chat backend; the gateway layers retries, the cap, and tracing on top.
pub trait ChatBackend: Send + Sync {
    fn complete_raw(&self, req: &ChatRequest) -> Result<ChatResponse>;
    fn id(&self) -> &str;
}

/// Shareable chat gateway enforcing the in-flight cap and retry policy.
pub struct ChatGateway {
    backend: Box<dyn ChatBackend>,
    trace: TraceLog,
    limiter: Limiter,
    max_retries: u32,
    backoff_base_ms: u64,
}

impl ChatGateway {
    pub fn new(
        backend: Box<dyn ChatBackend>,
        trace: TraceLog,
        cfg: &BackendConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            backend,
            trace,
            limiter: Limiter::new(cfg.max_concurrent_requests),
            max_retries: cfg.max_retries,
            backoff_base_ms: cfg.backoff_base_ms,
        })
    }

    pub fn from_config(cfg: &BackendConfig, trace: TraceLog) -> Result<Self> {
        let backend: Box<dyn ChatBackend> = match cfg.kind {
            BackendKind::Mock => {
                let script = match &cfg.mock_script {
                    Some(path) => MockScript::load(path)?,
                    None => MockScript::new(),
                };
                Box::new(MockChat::new(script))
            }
            BackendKind::Remote => Box::new(RemoteChat::from_config(cfg)?),
        };
        Self::new(backend, trace, cfg)
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    /// Run one logical completion. Transient failures are retried with
    /// exponential backoff (base doubled per attempt, ±20% jitter); exactly
    /// one trace event is recorded whatever the number of attempts.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let _permit = self.limiter.acquire();
        let started = self.trace.now_ms();
        let mut attempt: u32 = 0;
        loop {
            match self.backend.complete_raw(req) {
                Ok(resp) => {
                    self.trace.record(
                        started,
                        EventKind::ChatCall,
                        Some(req.tag),
                        req.node_id.clone(),
                        Outcome::Ok,
                        Some(req.user_prompt.clone()),
                    );
                    return Ok(resp);
                }
                Err(err) if err.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    std::thread::sleep(backoff_delay(self.backoff_base_ms, attempt));
                }
                Err(err) => {
                    self.trace.record(
                        started,
                        EventKind::ChatCall,
                        Some(req.tag),
                        req.node_id.clone(),
                        Outcome::Error(err.to_string()),
                        Some(req.user_prompt.clone()),
                    );
                    return Err(err);
                }
            }
        }
    }
}

/// Exponential backoff with ±20% jitter: base, 2·base, 4·base, ...
fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    let exp = base_ms.saturating_mul(1u64 << (attempt - 1).min(16));
    let jitter = rand::rng().random_range(0.8..=1.2);
    Duration::from_millis((exp as f64 * jitter) as u64)
}

/// Whitespace token estimate used by backends that do not report usage.
pub(crate) fn approx_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}
