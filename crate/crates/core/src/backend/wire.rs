//! OpenAI-compatible HTTP client.
//!
//! Requests carry only the documented fields: `model`, `messages`,
//! `temperature` and `max_tokens` for chat; `model` and `input` for
//! embeddings. The HTTP layer sits behind [`Transport`] so recorded
//! fixtures can replace the network in tests.

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{
    ChatBackend, ChatMessage, ChatRequest, ConcurrencyLimit, EmbeddingBackend, EmbeddingVector,
    RetryPolicy,
};
use crate::error::{Error, Result};

pub const ENV_BASE_URL: &str = "LAWLUO_BASE_URL";
pub const ENV_CHAT_MODEL: &str = "LAWLUO_CHAT_MODEL";
pub const ENV_EMBED_MODEL: &str = "LAWLUO_EMBED_MODEL";
pub const ENV_API_KEY: &str = "LAWLUO_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    /// POSTs a JSON body. Errors are connection-level failures only; HTTP
    /// error statuses come back as an [`HttpReply`].
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply>;
}

/// Blocking transport over `ureq`.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply> {
        let mut request = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(key) = bearer {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send(body.to_string())
            .map_err(|e| Error::BackendUnavailable(format!("POST {url}: {e}")))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::BackendUnavailable(format!("reading reply from {url}: {e}")))?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embed_model: String,
    pub api_key: Option<String>,
    pub max_in_flight: usize,
    pub max_embed_chars: usize,
}

impl WireConfig {
    pub fn from_env() -> Result<Self> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.trim().is_empty());
        let base_url = var(ENV_BASE_URL)
            .ok_or_else(|| Error::Config(format!("{ENV_BASE_URL} is not set")))?;
        Ok(WireConfig {
            base_url,
            chat_model: var(ENV_CHAT_MODEL)
                .ok_or_else(|| Error::Config(format!("{ENV_CHAT_MODEL} is not set")))?,
            embed_model: var(ENV_EMBED_MODEL)
                .ok_or_else(|| Error::Config(format!("{ENV_EMBED_MODEL} is not set")))?,
            api_key: var(ENV_API_KEY),
            max_in_flight: 4,
            max_embed_chars: 8000,
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireChatBody<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireEmbedBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbedReply {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

fn role_name(m: &ChatMessage) -> &'static str {
    match m.role {
        crate::backend::Role::System => "system",
        crate::backend::Role::User => "user",
        crate::backend::Role::Assistant => "assistant",
    }
}

pub fn chat_body(model: &str, request: &ChatRequest) -> Value {
    let body = WireChatBody {
        model,
        messages: request
            .messages
            .iter()
            .map(|m| WireMessage {
                role: role_name(m),
                content: &m.content,
            })
            .collect(),
        temperature: request.temperature,
        max_tokens: request.max_tokens,
    };
    serde_json::to_value(body).expect("chat body serializes")
}

pub fn embed_body(model: &str, texts: &[String]) -> Value {
    serde_json::to_value(WireEmbedBody { model, input: texts }).expect("embed body serializes")
}

/// Extracts `choices[0].message.content` verbatim.
pub fn parse_chat_reply(body: &str) -> Result<String> {
    let reply: ChatReply = serde_json::from_str(body)
        .map_err(|e| Error::Protocol(format!("malformed chat reply: {e}")))?;
    reply
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| Error::Protocol("chat reply has no choices[0].message.content".into()))
}

/// Extracts `data[i].embedding`, honouring explicit indices when present.
pub fn parse_embed_reply(body: &str, expected: usize) -> Result<Vec<EmbeddingVector>> {
    let reply: EmbedReply = serde_json::from_str(body)
        .map_err(|e| Error::Protocol(format!("malformed embedding reply: {e}")))?;
    if reply.data.len() != expected {
        return Err(Error::Protocol(format!(
            "expected {expected} embeddings, got {}",
            reply.data.len()
        )));
    }
    let mut slots: Vec<Option<EmbeddingVector>> = vec![None; expected];
    for (pos, datum) in reply.data.into_iter().enumerate() {
        let i = datum.index.unwrap_or(pos);
        let slot = slots
            .get_mut(i)
            .ok_or_else(|| Error::Protocol(format!("embedding index {i} out of range")))?;
        if slot.replace(EmbeddingVector(datum.embedding)).is_some() {
            return Err(Error::Protocol(format!("duplicate embedding index {i}")));
        }
    }
    slots
        .into_iter()
        .map(|s| s.ok_or_else(|| Error::Protocol("missing embedding index".into())))
        .collect()
}

/// Client for one OpenAI-compatible provider; implements both backend traits.
pub struct WireClient {
    config: WireConfig,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    limit: ConcurrencyLimit,
    embed_dim: OnceLock<usize>,
}

impl WireClient {
    pub fn new(config: WireConfig, transport: Arc<dyn Transport>) -> Self {
        let limit = ConcurrencyLimit::new(config.max_in_flight);
        WireClient {
            config: WireConfig {
                base_url: config.base_url.trim_end_matches('/').to_string(),
                ..config
            },
            transport,
            retry: RetryPolicy::default(),
            limit,
            embed_dim: OnceLock::new(),
        }
    }

    pub fn from_env() -> Result<Self> {
        Ok(Self::new(
            WireConfig::from_env()?,
            Arc::new(UreqTransport::default()),
        ))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn post(&self, path: &str, body: &Value) -> Result<String> {
        let url = format!("{}/{path}", self.config.base_url);
        self.retry.run(|| {
            let _permit = self.limit.acquire();
            let reply = self
                .transport
                .post_json(&url, self.config.api_key.as_deref(), body)?;
            match reply.status {
                200..=299 => Ok(reply.body),
                408 | 429 | 500..=599 => Err(Error::BackendUnavailable(format!(
                    "{url} answered {}",
                    reply.status
                ))),
                status => Err(Error::Protocol(format!(
                    "{url} answered {status}: {}",
                    reply.body.chars().take(200).collect::<String>()
                ))),
            }
        })
    }
}

impl ChatBackend for WireClient {
    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let body = chat_body(&self.config.chat_model, request);
        parse_chat_reply(&self.post("chat/completions", &body)?)
    }
}

impl EmbeddingBackend for WireClient {
    fn tag(&self) -> String {
        format!("openai-compatible:{}", self.config.embed_model)
    }

    fn max_chars(&self) -> usize {
        self.config.max_embed_chars
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = embed_body(&self.config.embed_model, texts);
        let vectors = parse_embed_reply(&self.post("embeddings", &body)?, texts.len())?;
        if let Some(first) = vectors.first() {
            let dim = *self.embed_dim.get_or_init(|| first.dimension());
            if let Some(bad) = vectors.iter().find(|v| v.dimension() != dim) {
                return Err(Error::Protocol(format!(
                    "embedding dimension changed from {dim} to {}",
                    bad.dimension()
                )));
            }
        }
        Ok(vectors)
    }
}
