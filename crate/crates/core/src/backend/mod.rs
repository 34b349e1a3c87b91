//! Chat-completion and text-embedding providers behind one interface.
//!
//! Two implementations ship: a deterministic [`mock`] used for tests and
//! offline runs, and an OpenAI-compatible [`wire`] client. Agents hold their
//! providers through [`AgentBackends`], so each role can use a different model.

pub mod mock;
pub mod wire;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, temperature: f64, max_tokens: u32, seed: u64) -> Self {
        Self {
            messages,
            temperature,
            max_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Usage("chat request has no messages".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Usage(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Usage("max_tokens must be positive".into()));
        }
        if self.messages[1..].iter().any(|m| m.role == Role::System) {
            return Err(Error::Usage(
                "a system message may only appear once, as the first message".into(),
            ));
        }
        Ok(())
    }

    /// Concatenated content of every message, for tests and audits.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A dense text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn dimension(&self) -> usize {
        self.0.len()
    }
    pub fn norm(&self) -> f64 {
        vector::l2_norm(&self.0)
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String>;
}

pub trait EmbeddingBackend: Send + Sync {
    /// Identifies the model that produced a vector, stored alongside persisted indexes.
    fn tag(&self) -> String;
    /// Longest input accepted, in characters.
    fn max_chars(&self) -> usize;
    /// One vector per input, in order. Inputs are already within `max_chars`.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Validates and sends one chat request; empty replies are protocol errors.
pub fn chat(backend: &dyn ChatBackend, request: &ChatRequest) -> Result<String> {
    request.validate()?;
    let text = backend.chat(request)?;
    if text.trim().is_empty() {
        return Err(Error::Protocol("provider returned an empty message".into()));
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub vectors: Vec<EmbeddingVector>,
    pub warnings: Vec<Warning>,
}

/// Embeds `texts`, truncating over-length inputs and recording a warning for each.
pub fn embed(backend: &dyn EmbeddingBackend, texts: &[String]) -> Result<Embedded> {
    if texts.is_empty() {
        return Err(Error::Usage("nothing to embed".into()));
    }
    let limit = backend.max_chars();
    let mut warnings = Vec::new();
    let prepared: Vec<String> = texts
        .iter()
        .enumerate()
        .map(|(index, t)| {
            let chars = t.chars().count();
            if chars > limit {
                warnings.push(Warning::Truncation {
                    index,
                    chars,
                    limit,
                });
                t.chars().take(limit).collect()
            } else {
                t.clone()
            }
        })
        .collect();
    for w in &warnings {
        tracing::warn!(?w, "embedding input truncated");
    }
    let vectors = backend.embed_batch(&prepared)?;
    if vectors.len() != texts.len() {
        return Err(Error::Protocol(format!(
            "asked for {} embeddings, received {}",
            texts.len(),
            vectors.len()
        )));
    }
    if let Some(first) = vectors.first() {
        let dim = first.dimension();
        if dim == 0 || vectors.iter().any(|v| v.dimension() != dim) {
            return Err(Error::Protocol("embeddings have inconsistent dimensions".into()));
        }
    }
    Ok(Embedded { vectors, warnings })
}

pub fn embed_one(backend: &dyn EmbeddingBackend, text: &str) -> Result<EmbeddingVector> {
    let mut out = embed(backend, &[text.to_string()])?;
    Ok(out.vectors.remove(0))
}

/// Retries [`Error::BackendUnavailable`] with exponential backoff.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    let delay = self.base_delay * 2u32.pow(attempt);
                    tracing::warn!(attempt, ?delay, error = %e, "retrying backend call");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding in-flight provider requests.
#[derive(Debug)]
pub struct ConcurrencyLimit {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a ConcurrencyLimit);

impl ConcurrencyLimit {
    pub fn new(max: usize) -> Self {
        ConcurrencyLimit {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Provider assignment per agent role.
#[derive(Clone)]
pub struct AgentBackends {
    pub receptionist: Arc<dyn EmbeddingBackend>,
    pub case_embedder: Arc<dyn EmbeddingBackend>,
    pub clarifier: Arc<dyn ChatBackend>,
    pub lawyer: Arc<dyn ChatBackend>,
    pub secretary: Arc<dyn ChatBackend>,
    pub boss: Arc<dyn EmbeddingBackend>,
}

impl AgentBackends {
    pub fn uniform(chat: Arc<dyn ChatBackend>, embedder: Arc<dyn EmbeddingBackend>) -> Self {
        AgentBackends {
            receptionist: embedder.clone(),
            case_embedder: embedder.clone(),
            clarifier: chat.clone(),
            lawyer: chat.clone(),
            secretary: chat,
            boss: embedder,
        }
    }

    pub fn mock() -> Self {
        Self::uniform(
            Arc::new(mock::MockChat::default()),
            Arc::new(mock::MockEmbedder::default()),
        )
    }
}
