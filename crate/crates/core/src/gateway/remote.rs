//! Remote backend speaking the OpenAI-compatible chat wire protocol.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{approx_tokens, BackendConfig, ChatBackend, ChatRequest, ChatResponse};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

/// Chat client for `POST {endpoint_url}/chat/completions`.
pub struct RemoteChat {
    agent: ureq::Agent,
    endpoint_url: String,
    model_name: String,
    api_key: Option<String>,
    timeout_ms: u64,
    backend_id: String,
}

impl RemoteChat {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        let api_key = resolve_api_key(&cfg.api_key_env_var)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.request_timeout_ms)))
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint_url: cfg.endpoint_url.trim_end_matches('/').to_string(),
            model_name: cfg.model_name.clone(),
            api_key,
            timeout_ms: cfg.request_timeout_ms,
            backend_id: format!("remote:{}", cfg.model_name),
        })
    }

    fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
        agent: &ureq::Agent,
        url: &str,
        api_key: Option<&str>,
        timeout_ms: u64,
        body: &B,
    ) -> Result<R> {
        let mut request = agent.post(url);
        if let Some(key) = api_key {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| map_transport_error(e, timeout_ms))?;
        response
            .body_mut()
            .read_json::<R>()
            .map_err(|e| Error::MalformedBackendReply(e.to_string()))
    }
}

/// Read the bearer credential from the configured environment variable.
/// An empty variable name means the endpoint requires no credential.
pub(crate) fn resolve_api_key(env_var: &str) -> Result<Option<String>> {
    if env_var.is_empty() {
        return Ok(None);
    }
    match std::env::var(env_var) {
        Ok(value) if !value.is_empty() => Ok(Some(value)),
        _ => Err(Error::AuthMissing(env_var.to_string())),
    }
}

pub(crate) fn map_transport_error(err: ureq::Error, timeout_ms: u64) -> Error {
    match err {
        ureq::Error::StatusCode(429) => Error::RateLimited("http 429".into()),
        ureq::Error::StatusCode(code) if code == 401 || code == 403 => {
            Error::BackendUnavailable(format!("http {code} (check credentials)"))
        }
        ureq::Error::StatusCode(code) if code >= 500 => {
            Error::BackendUnavailable(format!("http {code}"))
        }
        ureq::Error::StatusCode(code) => Error::MalformedBackendReply(format!("http {code}")),
        ureq::Error::Timeout(_) => Error::Timeout(timeout_ms),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => {
            Error::Timeout(timeout_ms)
        }
        other => Error::BackendUnavailable(other.to_string()),
    }
}

impl ChatBackend for RemoteChat {
    fn complete_raw(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let url = format!("{}/chat/completions", self.endpoint_url);
        let body = ChatBody {
            model: &self.model_name,
            messages: vec![
                WireMessage {
                    role: "system",
                    content: &req.system_prompt,
                },
                WireMessage {
                    role: "user",
                    content: &req.user_prompt,
                },
            ],
            temperature: req.temperature,
            max_tokens: req.max_output_tokens,
        };
        let started = Instant::now();
        let reply: ChatReply = Self::post_json(
            &self.agent,
            &url,
            self.api_key.as_deref(),
            self.timeout_ms,
            &body,
        )?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let text = reply
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| Error::MalformedBackendReply("no choices in reply".into()))?;
        let (prompt_tokens, completion_tokens) = match reply.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (
                approx_tokens(&req.system_prompt) + approx_tokens(&req.user_prompt),
                approx_tokens(&text),
            ),
        };
        Ok(ChatResponse {
            text,
            prompt_tokens,
            completion_tokens,
            backend_id: self.backend_id.clone(),
            latency_ms,
        })
    }

    fn id(&self) -> &str {
        &self.backend_id
    }
}

/// Embedding-endpoint wire structures, shared with the embed gateway.
#[derive(Serialize)]
pub(crate) struct EmbedBody<'a> {
    pub model: &'a str,
    pub input: &'a [String],
}

#[derive(Deserialize)]
pub(crate) struct EmbedReply {
    pub data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
pub(crate) struct EmbedItem {
    #[serde(default)]
    pub index: usize,
    pub embedding: Vec<f64>,
}

impl RemoteChat {
    pub(crate) fn post_embeddings(
        agent: &ureq::Agent,
        endpoint_url: &str,
        api_key: Option<&str>,
        timeout_ms: u64,
        model: &str,
        input: &[String],
    ) -> Result<EmbedReply> {
        let url = format!("{}/embeddings", endpoint_url.trim_end_matches('/'));
        Self::post_json(
            agent,
            &url,
            api_key,
            timeout_ms,
            &EmbedBody { model, input },
        )
    }
}
