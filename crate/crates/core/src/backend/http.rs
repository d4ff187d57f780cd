use std::str::FromStr;
use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult, TimingTrace, TraceClock};

/// Wire dialect spoken by the completion endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dialect {
    /// `POST <base>/v1/complete`; streams NDJSON lines `{"token": ...}`
    /// terminated by `{"done": true}`, or returns `{"text": ...}`.
    Native,
    /// `POST <base>/v1/completions` in the OpenAI completions shape;
    /// streams server-sent events ending with `data: [DONE]`.
    OpenAi,
}

impl Dialect {
    fn path(self) -> &'static str {
        match self {
            Dialect::Native => "/v1/complete",
            Dialect::OpenAi => "/v1/completions",
        }
    }

    fn body(self, request: &CompletionRequest) -> Value {
        match self {
            Dialect::Native => json!(request),
            Dialect::OpenAi => {
                let mut body = json!({
                    "prompt": request.prompt,
                    "max_tokens": request.max_new_tokens,
                    "temperature": request.sampling.temperature,
                    "stream": request.stream,
                });
                let obj = body.as_object_mut().expect("object literal");
                for (k, v) in &request.sampling.extra {
                    obj.insert(k.clone(), v.clone());
                }
                body
            }
        }
    }

    fn parse_line(self, line: &str) -> Result<LineEvent, String> {
        let line = line.trim_end_matches('\r');
        match self {
            Dialect::Native => {
                if line.trim().is_empty() {
                    return Ok(LineEvent::Skip);
                }
                let chunk: NativeChunk =
                    serde_json::from_str(line).map_err(|e| format!("bad stream line: {e}"))?;
                match chunk {
                    NativeChunk { error: Some(e), .. } => Err(format!("backend error: {e}")),
                    NativeChunk { token: Some(t), .. } => Ok(LineEvent::Token(t)),
                    NativeChunk { done: Some(true), .. } => Ok(LineEvent::Done),
                    _ => Err(format!("unrecognized stream line: {line}")),
                }
            }
            Dialect::OpenAi => {
                let Some(data) = line.strip_prefix("data:") else {
                    // comments, event names, blank separators
                    return Ok(LineEvent::Skip);
                };
                let data = data.trim();
                if data == "[DONE]" {
                    return Ok(LineEvent::Done);
                }
                let value: Value =
                    serde_json::from_str(data).map_err(|e| format!("bad event payload: {e}"))?;
                openai_text(&value)
                    .map(LineEvent::Token)
                    .ok_or_else(|| format!("event without choices[0].text: {data}"))
            }
        }
    }

    fn parse_whole(self, body: &str) -> Result<String, String> {
        let value: Value = serde_json::from_str(body).map_err(|e| format!("bad response body: {e}"))?;
        match self {
            Dialect::Native => value
                .get("text")
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| "response lacks \"text\"".into()),
            Dialect::OpenAi => openai_text(&value).ok_or_else(|| "response lacks choices[0].text".into()),
        }
    }
}

impl FromStr for Dialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(Dialect::Native),
            "openai" => Ok(Dialect::OpenAi),
            other => Err(format!("unknown backend dialect {other:?} (expected native or openai)")),
        }
    }
}

fn openai_text(value: &Value) -> Option<String> {
    value
        .get("choices")?
        .get(0)?
        .get("text")?
        .as_str()
        .map(str::to_owned)
}

#[derive(Deserialize)]
struct NativeChunk {
    token: Option<String>,
    done: Option<bool>,
    error: Option<String>,
}

enum LineEvent {
    Token(String),
    Done,
    Skip,
}

pub struct HttpCompletionBackend {
    base_url: String,
    dialect: Dialect,
    api_key: Option<String>,
    client: reqwest::Client,
    clock: TraceClock,
}

impl HttpCompletionBackend {
    pub fn new(
        base_url: impl Into<String>,
        dialect: Dialect,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Self {
        let client = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(10).min(timeout))
            .timeout(timeout)
            .build()
            .expect("reqwest client builds");
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            dialect,
            api_key,
            client,
            clock: TraceClock::start(),
        }
    }
}

#[async_trait]
impl CompletionBackend for HttpCompletionBackend {
    fn id(&self) -> String {
        format!("{}{}", self.base_url, self.dialect.path())
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let url = format!("{}{}", self.base_url, self.dialect.path());
        let mut builder = self.client.post(&url).json(&self.dialect.body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }

        let sent = self.clock.now();
        let transport = |message: String| BackendError::Transport {
            message,
            elapsed: self.clock.elapsed_since(sent).as_secs_f64(),
        };
        let response = builder.send().await.map_err(|e| transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(transport(format!("HTTP {status}: {body}")));
        }

        if !request.stream {
            let body = response.text().await.map_err(|e| transport(e.to_string()))?;
            let arrived = self.clock.now();
            let text = self
                .dialect
                .parse_whole(&body)
                .map_err(|message| BackendError::Protocol {
                    message,
                    received: body.clone(),
                })?;
            return Ok(CompletionResult {
                text,
                trace: trace(sent, vec![arrived])?,
                backend_id: self.id(),
            });
        }

        let mut body = response.bytes_stream();
        let mut pending: Vec<u8> = Vec::new();
        let mut received: Vec<u8> = Vec::new();
        let mut text = String::new();
        let mut arrivals = Vec::new();
        let mut done = false;
        let protocol = |message: String, received: &[u8]| BackendError::Protocol {
            message,
            received: String::from_utf8_lossy(received).into_owned(),
        };

        while let Some(chunk) = body.next().await {
            let chunk = chunk.map_err(|e| transport(e.to_string()))?;
            let at = self.clock.now();
            received.extend_from_slice(&chunk);
            pending.extend_from_slice(&chunk);
            while let Some(pos) = pending.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = pending.drain(..=pos).collect();
                if done {
                    continue;
                }
                let line = std::str::from_utf8(&line[..line.len() - 1])
                    .map_err(|e| protocol(e.to_string(), &received))?;
                match self.dialect.parse_line(line) {
                    Ok(LineEvent::Token(token)) => {
                        text.push_str(&token);
                        arrivals.push(at);
                    }
                    Ok(LineEvent::Done) => done = true,
                    Ok(LineEvent::Skip) => {}
                    Err(message) => return Err(protocol(message, &received)),
                }
            }
        }
        if !done {
            return Err(protocol("stream ended without a completion marker".into(), &received));
        }
        Ok(CompletionResult {
            text,
            trace: trace(sent, arrivals)?,
            backend_id: self.id(),
        })
    }
}

fn trace(sent: f64, arrivals: Vec<f64>) -> Result<TimingTrace, BackendError> {
    TimingTrace::new(sent, arrivals).map_err(|e| BackendError::Protocol {
        message: e.to_string(),
        received: String::new(),
    })
}
