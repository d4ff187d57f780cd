//! Client side of every model call: prompt layout, completion requests, and
//! token-level timing traces.
//!
//! Timestamps come from tokio's monotonic [`Instant`], stamped on the client
//! as each streamed chunk is received. Each backend measures from its own
//! clock origin, fixed when the backend is constructed.

mod http;
pub mod mock;

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tokio::time::Instant;

pub use http::{Dialect, HttpCompletionBackend};

const INSTRUCTION_MARKER: &str = "### Instruction:";
const INPUT_MARKER: &str = "### Input:";
const RESPONSE_MARKER: &str = "### Response:";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {elapsed:.3}s: {message}")]
    Transport { message: String, elapsed: f64 },
    #[error("protocol error: {message} (received so far: {received:?})")]
    Protocol { message: String, received: String },
}

/// Lays out instruction and input exactly as training rows are formatted.
///
/// ```text
/// ### Instruction:
/// <instruction>
///
/// ### Input:
/// <input>
///
/// ### Response:
/// ```
pub fn assemble_prompt(instruction: &str, input: &str) -> Result<String, BackendError> {
    if input.trim().is_empty() {
        return Err(BackendError::InvalidRequest("input code is empty".into()));
    }
    Ok(format!(
        "{INSTRUCTION_MARKER}\n{instruction}\n\n{INPUT_MARKER}\n{input}\n\n{RESPONSE_MARKER}\n"
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    /// Backend-specific parameters, forwarded untouched.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Default for Sampling {
    /// Greedy decoding.
    fn default() -> Self {
        Self {
            temperature: 0.0,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub sampling: Sampling,
    pub stream: bool,
}

impl CompletionRequest {
    /// Streaming, greedy request.
    pub fn new(prompt: impl Into<String>, max_new_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            sampling: Sampling::default(),
            stream: true,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("token arrival {index} precedes its predecessor or the request")]
    NotMonotonic { index: usize },
}

/// Seconds on one backend's monotonic clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTrace {
    pub request_sent_at: f64,
    pub token_arrivals: Vec<f64>,
    pub token_count: usize,
}

impl TimingTrace {
    pub fn new(request_sent_at: f64, token_arrivals: Vec<f64>) -> Result<Self, TraceError> {
        let mut prev = request_sent_at;
        for (index, &t) in token_arrivals.iter().enumerate() {
            if t < prev {
                return Err(TraceError::NotMonotonic { index });
            }
            prev = t;
        }
        Ok(Self {
            request_sent_at,
            token_count: token_arrivals.len(),
            token_arrivals,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub trace: TimingTrace,
    pub backend_id: String,
}

#[async_trait]
pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> String;
    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

/// Monotonic clock measuring seconds from a fixed origin.
#[derive(Debug, Clone, Copy)]
pub struct TraceClock {
    origin: Instant,
}

impl TraceClock {
    pub fn start() -> Self {
        Self {
            origin: Instant::now(),
        }
    }

    pub fn now(&self) -> f64 {
        self.seconds_at(Instant::now())
    }

    pub fn seconds_at(&self, at: Instant) -> f64 {
        at.saturating_duration_since(self.origin).as_secs_f64()
    }

    pub fn elapsed_since(&self, seconds: f64) -> Duration {
        Duration::from_secs_f64((self.now() - seconds).max(0.0))
    }
}
