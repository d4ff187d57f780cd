//! Scripted completion backend for tests, benchmarks and demos.
//!
//! A script maps prompts to canned responses and says how long to wait
//! before each token. The same script drives an in-process backend
//! ([`ScriptedBackend`]) and a small HTTP server ([`serve`]) that speaks both
//! wire dialects.
//!
//! ```json
//! {
//!   "first_token_delay_ms": 253,
//!   "inter_token_delay_ms": 166.4,
//!   "rules": [{"prompt_contains": "os.system", "response": {"text": "Vulnerable - CWE-78"}}],
//!   "default": {"text": "Secure"},
//!   "fail_requests": [3]
//! }
//! ```

use std::convert::Infallible;
use std::future::Future;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;
use tokio::time::{sleep_until, Instant};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult, TimingTrace, TraceClock};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockResponse {
    /// Whole response, split into tokens by [`split_tokens`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Explicit token list; takes precedence over `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_delay_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_token_delay_ms: Option<f64>,
    /// Per-gap delays; gap `i` precedes token `i + 1`. Overrides the uniform gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_delays_ms: Option<Vec<f64>>,
    /// Stream the tokens but never send the completion marker.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub omit_done: bool,
}

impl MockResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn token_list(&self) -> Vec<String> {
        match (&self.tokens, &self.text) {
            (Some(tokens), _) => tokens.clone(),
            (None, Some(text)) => split_tokens(text),
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_equals: Option<String>,
    pub response: MockResponse,
}

impl MockRule {
    fn matches(&self, prompt: &str) -> bool {
        self.prompt_contains.as_deref().is_none_or(|s| prompt.contains(s))
            && self.prompt_equals.as_deref().is_none_or(|s| prompt == s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub first_token_delay_ms: f64,
    #[serde(default)]
    pub inter_token_delay_ms: f64,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: MockResponse,
    /// 0-based request indices that fail with a transport-level error.
    #[serde(default)]
    pub fail_requests: Vec<usize>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn response_for(&self, prompt: &str) -> &MockResponse {
        self.rules
            .iter()
            .find(|r| r.matches(prompt))
            .map(|r| &r.response)
            .unwrap_or(&self.default)
    }

    /// Tokens to emit and each token's offset from the request.
    pub fn plan(&self, prompt: &str, max_new_tokens: u32) -> Plan {
        let response = self.response_for(prompt);
        let mut tokens = response.token_list();
        tokens.truncate(max_new_tokens as usize);
        let first = ms(response.first_token_delay_ms.unwrap_or(self.first_token_delay_ms));
        let gap = ms(response.inter_token_delay_ms.unwrap_or(self.inter_token_delay_ms));
        let mut offsets = Vec::with_capacity(tokens.len());
        let mut at = first;
        for i in 0..tokens.len() {
            if i > 0 {
                at += match &response.token_delays_ms {
                    Some(gaps) => gaps.get(i - 1).copied().map(ms).unwrap_or(gap),
                    None => gap,
                };
            }
            offsets.push(at);
        }
        Plan {
            tokens,
            offsets,
            omit_done: response.omit_done,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub tokens: Vec<String>,
    pub offsets: Vec<Duration>,
    pub omit_done: bool,
}

fn ms(value: f64) -> Duration {
    Duration::from_micros((value.max(0.0) * 1000.0).round() as u64)
}

/// Splits text into streamable units; whitespace stays attached to the
/// token that follows it, so concatenating the tokens gives back the text.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() {
            if in_word {
                tokens.push(std::mem::take(&mut current));
                in_word = false;
            }
        } else {
            in_word = true;
        }
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// In-process backend that follows a [`MockScript`] on tokio's clock.
pub struct ScriptedBackend {
    script: MockScript,
    calls: AtomicUsize,
    clock: TraceClock,
}

impl ScriptedBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
            clock: TraceClock::start(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl CompletionBackend for ScriptedBackend {
    fn id(&self) -> String {
        "mock:scripted".into()
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let index = self.calls.fetch_add(1, Ordering::SeqCst);
        let start = Instant::now();
        let sent = self.clock.seconds_at(start);
        if self.script.fail_requests.contains(&index) {
            return Err(BackendError::Transport {
                message: format!("scripted failure of request {index}"),
                elapsed: 0.0,
            });
        }
        let plan = self.script.plan(&request.prompt, request.max_new_tokens);
        let mut text = String::new();
        let mut arrivals = Vec::new();
        if request.stream {
            for (token, offset) in plan.tokens.iter().zip(&plan.offsets) {
                sleep_until(start + *offset).await;
                arrivals.push(self.clock.now());
                text.push_str(token);
            }
        } else {
            if let Some(last) = plan.offsets.last() {
                sleep_until(start + *last).await;
            }
            arrivals.push(self.clock.now());
            text = plan.tokens.concat();
        }
        if plan.omit_done {
            return Err(BackendError::Protocol {
                message: "stream ended without a completion marker".into(),
                received: text,
            });
        }
        let trace = TimingTrace::new(sent, arrivals).map_err(|e| BackendError::Protocol {
            message: e.to_string(),
            received: text.clone(),
        })?;
        Ok(CompletionResult {
            text,
            trace,
            backend_id: self.id(),
        })
    }
}

#[derive(Clone)]
struct ServerState {
    script: Arc<MockScript>,
    calls: Arc<AtomicUsize>,
}

/// Router serving `/v1/complete` (native) and `/v1/completions` (OpenAI).
pub fn router(script: MockScript) -> Router {
    let state = ServerState {
        script: Arc::new(script),
        calls: Arc::new(AtomicUsize::new(0)),
    };
    Router::new()
        .route("/v1/complete", post(native))
        .route("/v1/completions", post(openai))
        .with_state(state)
}

pub async fn serve(
    script: MockScript,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(script))
        .with_graceful_shutdown(shutdown)
        .await
}

#[derive(Clone, Copy)]
enum Wire {
    Native,
    OpenAi,
}

impl Wire {
    fn token_line(self, token: &str) -> String {
        match self {
            Wire::Native => format!("{}\n", json!({ "token": token })),
            Wire::OpenAi => format!("data: {}\n\n", json!({ "choices": [{ "text": token, "index": 0 }] })),
        }
    }

    fn done_line(self) -> &'static str {
        match self {
            Wire::Native => "{\"done\":true}\n",
            Wire::OpenAi => "data: [DONE]\n\n",
        }
    }

    fn whole(self, text: String) -> Value {
        match self {
            Wire::Native => json!({ "text": text }),
            Wire::OpenAi => json!({ "choices": [{ "text": text, "index": 0 }] }),
        }
    }

    fn content_type(self) -> &'static str {
        match self {
            Wire::Native => "application/x-ndjson",
            Wire::OpenAi => "text/event-stream",
        }
    }
}

#[derive(Deserialize)]
struct OpenAiRequest {
    prompt: String,
    max_tokens: u32,
    #[serde(default)]
    stream: bool,
}

async fn native(State(state): State<ServerState>, Json(req): Json<CompletionRequest>) -> Response {
    respond(state, Wire::Native, req.prompt, req.max_new_tokens, req.stream).await
}

async fn openai(State(state): State<ServerState>, Json(req): Json<OpenAiRequest>) -> Response {
    respond(state, Wire::OpenAi, req.prompt, req.max_tokens, req.stream).await
}

async fn respond(state: ServerState, wire: Wire, prompt: String, max_new_tokens: u32, stream: bool) -> Response {
    let start = Instant::now();
    let index = state.calls.fetch_add(1, Ordering::SeqCst);
    if state.script.fail_requests.contains(&index) {
        return (StatusCode::INTERNAL_SERVER_ERROR, format!("scripted failure of request {index}"))
            .into_response();
    }
    if max_new_tokens == 0 {
        return (StatusCode::BAD_REQUEST, "max_new_tokens must be at least 1").into_response();
    }
    let plan = state.script.plan(&prompt, max_new_tokens);
    if !stream {
        if let Some(last) = plan.offsets.last() {
            sleep_until(start + *last).await;
        }
        return Json(wire.whole(plan.tokens.concat())).into_response();
    }

    let (tx, rx) = mpsc::channel::<Bytes>(16);
    tokio::spawn(async move {
        for (token, offset) in plan.tokens.iter().zip(&plan.offsets) {
            sleep_until(start + *offset).await;
            if tx.send(Bytes::from(wire.token_line(token))).await.is_err() {
                return;
            }
        }
        if !plan.omit_done {
            let _ = tx.send(Bytes::from_static(wire.done_line().as_bytes())).await;
        }
    });
    let body = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|chunk| (Ok::<_, Infallible>(chunk), rx))
    });
    Response::builder()
        .header("content-type", wire.content_type())
        .body(Body::from_stream(body))
        .expect("static response parts")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_round_trips() {
        let text = "Vulnerable - CWE-79\n  x";
        let tokens = split_tokens(text);
        assert_eq!(tokens, ["Vulnerable", " -", " CWE-79", "\n  x"]);
        assert_eq!(tokens.concat(), text);
        assert!(split_tokens("").is_empty());
        assert_eq!(split_tokens("  a").concat(), "  a");
    }

    #[test]
    fn plan_offsets_and_truncation() {
        let script = MockScript {
            first_token_delay_ms: 253.0,
            inter_token_delay_ms: 166.4,
            default: MockResponse::text("a b c d"),
            ..MockScript::default()
        };
        let plan = script.plan("p", 3);
        assert_eq!(plan.tokens.len(), 3);
        assert_eq!(
            plan.offsets,
            [
                Duration::from_micros(253_000),
                Duration::from_micros(419_400),
                Duration::from_micros(585_800)
            ]
        );
    }

    #[test]
    fn first_matching_rule_wins() {
        let script = MockScript {
            rules: vec![
                MockRule {
                    prompt_contains: Some("x".into()),
                    prompt_equals: None,
                    response: MockResponse::text("one"),
                },
                MockRule {
                    prompt_contains: Some("x".into()),
                    prompt_equals: None,
                    response: MockResponse::text("two"),
                },
            ],
            default: MockResponse::text("dflt"),
            ..MockScript::default()
        };
        assert_eq!(script.response_for("axe").text.as_deref(), Some("one"));
        assert_eq!(script.response_for("abc").text.as_deref(), Some("dflt"));
    }

    #[tokio::test(start_paused = true)]
    async fn scripted_backend_follows_the_clock() {
        let backend = ScriptedBackend::new(MockScript {
            first_token_delay_ms: 253.0,
            inter_token_delay_ms: 166.5,
            default: MockResponse::text("0 1 2 3 4 5 6 7 8 9"),
            ..MockScript::default()
        });
        let result = backend.complete(&CompletionRequest::new("p", 64)).await.unwrap();
        let t = &result.trace;
        assert_eq!(t.token_count, 10);
        // deadlines are cumulative from the request; the timer rounds each
        // one up to the next millisecond
        assert!((t.token_arrivals[0] - t.request_sent_at - 0.253).abs() < 1e-9);
        assert!((t.token_arrivals[1] - t.token_arrivals[0] - 0.1665).abs() <= 1e-3 + 1e-9);
        assert!((t.token_arrivals[9] - t.request_sent_at - (0.253 + 9.0 * 0.1665)).abs() <= 1e-3 + 1e-9);
        assert_eq!(result.text, "0 1 2 3 4 5 6 7 8 9");

        let mut req = CompletionRequest::new("p", 64);
        req.stream = false;
        let whole = backend.complete(&req).await.unwrap();
        assert_eq!(whole.trace.token_count, 1);
        assert_eq!(whole.text, result.text);
        assert_eq!(backend.calls(), 2);
    }

    #[tokio::test]
    async fn scripted_failures_are_transport_errors() {
        let backend = ScriptedBackend::new(MockScript {
            default: MockResponse::text("Secure"),
            fail_requests: vec![1],
            ..MockScript::default()
        });
        let req = CompletionRequest::new("p", 4);
        assert!(backend.complete(&req).await.is_ok());
        assert!(matches!(
            backend.complete(&req).await,
            Err(BackendError::Transport { .. })
        ));
        assert!(backend.complete(&req).await.is_ok());
    }
}
