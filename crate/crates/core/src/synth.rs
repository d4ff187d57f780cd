//! Synthetic vulnerable/fixed pair generation.
//!
//! A generation backend is asked for a JSON list of pairs per CWE. Each
//! returned record is pre-checked (non-empty, parses as Python, the two
//! snippets differ, not a duplicate within the CWE batch) and survivors are
//! handed to the review queue as pending candidates. Shortfalls are
//! re-requested with the rejection reasons echoed back to the generator.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use async_trait::async_trait;
use chrono::Utc;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::catalog::{CweEntry, CweId};
use crate::dataset::{snippets_identical, PairedExample, Provenance, Snippet};
use crate::sha256_hex;
use crate::syntax::check_source;

const PLACEHOLDERS: [&str; 6] = [
    "{cwe_id}",
    "{cwe_name}",
    "{cwe_summary}",
    "{pair_count}",
    "{realism}",
    "{schema}",
];

const REALISM_CONSTRAINTS: &str = "\
- Write code the way it appears in real applications: web handlers, file and \
network utilities, data processing jobs, CLI tools.
- Each snippet must be self-contained, syntactically valid Python 3 of roughly \
5 to 40 lines, using the standard library or widely used packages.
- Do not name the weakness in identifiers or comments, and do not write toy \
examples whose only purpose is to be vulnerable.
- Every pair must use a different scenario from the other pairs.";

const OUTPUT_SCHEMA: &str = r#"Respond with a single JSON object and nothing else:
{"pairs": [{"vulnerable": "<python source>", "fixed": "<python source>", "note": "<one sentence on the flaw and the fix>"}]}
Source code goes in JSON strings with newlines escaped as \n."#;

const DEFAULT_TEMPLATE_BODY: &str = "\
You are generating training data for a Python vulnerability detector.

Target weakness: {cwe_id} ({cwe_name})
Definition: {cwe_summary}

Produce {pair_count} distinct pairs. For each pair:
1. \"vulnerable\": a Python snippet that realistically contains {cwe_id}.
2. \"fixed\": the same snippet with the cause of {cwe_id} addressed, without \
introducing any other weakness.

Realism requirements:
{realism}

{schema}
";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("prompt template {version} is missing placeholder {placeholder}")]
    Template { version: String, placeholder: String },
    #[error("pair count must be at least 1")]
    ZeroPairs,
    #[error("generator response is not parseable as a pair list")]
    Unparseable { raw: String },
    #[error("generation backend: {0}")]
    Backend(#[from] GenerationBackendError),
    #[error("generation for {cwe} failed after {attempts} attempts: {last}")]
    Exhausted {
        cwe: CweId,
        attempts: u32,
        last: Box<SynthError>,
    },
    #[error("persisting batch for {cwe}: {message}")]
    Sink { cwe: CweId, message: String },
}

/// A versioned prompt body. The version carries a digest of the body, so any
/// edit yields a new version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(name: &str, body: impl Into<String>) -> Self {
        let body = body.into();
        let version = format!("{name}-{}", &sha256_hex(&body)[..12]);
        Self { version, body }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(Self::new(&name, body))
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new("default", DEFAULT_TEMPLATE_BODY)
    }
}

pub fn render_prompt(
    template: &PromptTemplate,
    cwe: &CweEntry,
    pairs: usize,
) -> Result<String, SynthError> {
    if pairs == 0 {
        return Err(SynthError::ZeroPairs);
    }
    if let Some(missing) = PLACEHOLDERS.iter().find(|p| !template.body.contains(**p)) {
        return Err(SynthError::Template {
            version: template.version.clone(),
            placeholder: (*missing).to_owned(),
        });
    }
    Ok(template
        .body
        .replace("{realism}", REALISM_CONSTRAINTS)
        .replace("{schema}", OUTPUT_SCHEMA)
        .replace("{cwe_summary}", &cwe.summary)
        .replace("{cwe_name}", &cwe.name)
        .replace("{cwe_id}", &cwe.id.to_string())
        .replace("{pair_count}", &pairs.to_string()))
}

/// Prompt for a top-up request, listing what went wrong last time.
pub fn render_retry_prompt(
    template: &PromptTemplate,
    cwe: &CweEntry,
    shortfall: usize,
    feedback: &[String],
) -> Result<String, SynthError> {
    let mut prompt = render_prompt(template, cwe, shortfall)?;
    if !feedback.is_empty() {
        prompt.push_str("\nThe previous response had these problems; avoid them:\n");
        for reason in feedback {
            prompt.push_str("- ");
            prompt.push_str(reason);
            prompt.push('\n');
        }
    }
    Ok(prompt)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    /// Position of the record within its response.
    pub index: usize,
    pub vulnerable: Option<String>,
    pub fixed: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedGeneration {
    pub candidates: Vec<PairedExample>,
    pub rejections: Vec<RejectedCandidate>,
}

/// Extracts pair records from a raw generator response.
///
/// Every record lands either in `candidates` (pending) or in `rejections`.
pub fn parse_generation(
    raw: &str,
    cwe: CweId,
    provenance: &Provenance,
) -> Result<ParsedGeneration, SynthError> {
    let records = extract_records(raw).ok_or_else(|| SynthError::Unparseable {
        raw: raw.to_owned(),
    })?;
    let mut out = ParsedGeneration {
        candidates: Vec::new(),
        rejections: Vec::new(),
    };
    for (index, record) in records.iter().enumerate() {
        let vulnerable = record.get("vulnerable").and_then(Value::as_str);
        let fixed = record.get("fixed").and_then(Value::as_str);
        let reject = |reason: String| RejectedCandidate {
            index,
            vulnerable: vulnerable.map(str::to_owned),
            fixed: fixed.map(str::to_owned),
            reason,
        };
        let (Some(vulnerable), Some(fixed)) = (vulnerable, fixed) else {
            out.rejections
                .push(reject("record lacks string fields \"vulnerable\" and \"fixed\"".into()));
            continue;
        };
        match precheck(vulnerable, fixed) {
            Err(reason) => out.rejections.push(reject(reason)),
            Ok((v, f)) => {
                let pair = PairedExample::new(cwe, v, f, provenance.clone())
                    .expect("distinctness checked above");
                out.candidates.push(pair);
            }
        }
    }
    Ok(out)
}

fn precheck(vulnerable: &str, fixed: &str) -> Result<(Snippet, Snippet), String> {
    let v = Snippet::new(vulnerable).map_err(|_| "empty vulnerable snippet".to_owned())?;
    let f = Snippet::new(fixed).map_err(|_| "empty fixed snippet".to_owned())?;
    check_source(vulnerable).map_err(|e| format!("vulnerable snippet: {e}"))?;
    check_source(fixed).map_err(|e| format!("fixed snippet: {e}"))?;
    if snippets_identical(vulnerable, fixed) {
        return Err("pair not distinct".into());
    }
    Ok((v, f))
}

fn extract_records(raw: &str) -> Option<Vec<Value>> {
    let trimmed = raw.trim();
    let mut candidates: Vec<&str> = vec![trimmed];
    if let Some(fenced) = fenced_block(trimmed) {
        candidates.push(fenced);
    }
    for (open, close) in [('{', '}'), ('[', ']')] {
        if let (Some(start), Some(end)) = (trimmed.find(open), trimmed.rfind(close)) {
            if start < end {
                candidates.push(&trimmed[start..=end]);
            }
        }
    }
    candidates.into_iter().find_map(|text| {
        match serde_json::from_str::<Value>(text).ok()? {
            Value::Array(items) => Some(items),
            Value::Object(mut obj) => match obj.remove("pairs")? {
                Value::Array(items) => Some(items),
                _ => None,
            },
            _ => None,
        }
    })
}

fn fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].trim())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenerationBackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub cwe: CweId,
    /// 1-based attempt number within one CWE's generation.
    pub attempt: u32,
    pub max_output_length: u32,
    pub sampling: Map<String, Value>,
}

/// Prompt in, text out.
#[async_trait]
pub trait GenerationBackend: Send + Sync {
    fn id(&self) -> String;
    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationBackendError>;
}

/// Per-backend request parameters, passed through opaquely.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationProfile {
    pub max_output_length: u32,
    pub sampling: Map<String, Value>,
}

impl Default for GenerationProfile {
    fn default() -> Self {
        let mut sampling = Map::new();
        sampling.insert("temperature".into(), Value::from(0.9));
        sampling.insert("top_p".into(), Value::from(0.95));
        Self {
            max_output_length: 8192,
            sampling,
        }
    }
}

/// Posts `{prompt, max_output_length, sampling}` and reads `{text}`.
pub struct HttpGenerationBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl HttpGenerationBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client builds");
        Self {
            url: url.into(),
            api_key,
            client,
        }
    }
}

#[derive(Serialize)]
struct GenerationWireRequest<'a> {
    prompt: &'a str,
    max_output_length: u32,
    sampling: &'a Map<String, Value>,
}

#[derive(Deserialize)]
struct GenerationWireResponse {
    text: String,
}

#[async_trait]
impl GenerationBackend for HttpGenerationBackend {
    fn id(&self) -> String {
        format!("http:{}", self.url)
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationBackendError> {
        let mut builder = self.client.post(&self.url).json(&GenerationWireRequest {
            prompt: &request.prompt,
            max_output_length: request.max_output_length,
            sampling: &request.sampling,
        });
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| GenerationBackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(GenerationBackendError::Transport(format!("HTTP {status}: {body}")));
        }
        let body: GenerationWireResponse = response
            .json()
            .await
            .map_err(|e| GenerationBackendError::Transport(format!("bad response body: {e}")))?;
        Ok(body.text)
    }
}

/// Replays canned responses from `<dir>/<CWE-n>/attempt-<k>.txt`.
///
/// When the exact attempt file is absent the latest earlier attempt is
/// replayed, so a single file serves every retry.
pub struct FixtureGenerationBackend {
    dir: PathBuf,
}

impl FixtureGenerationBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn response_path(dir: &Path, cwe: CweId, attempt: u32) -> PathBuf {
        dir.join(cwe.to_string()).join(format!("attempt-{attempt}.txt"))
    }
}

#[async_trait]
impl GenerationBackend for FixtureGenerationBackend {
    fn id(&self) -> String {
        format!("fixture:{}", self.dir.display())
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationBackendError> {
        for attempt in (1..=request.attempt).rev() {
            let path = Self::response_path(&self.dir, request.cwe, attempt);
            match tokio::fs::read_to_string(&path).await {
                Ok(text) => return Ok(text),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => {
                    return Err(GenerationBackendError::Fixture(format!(
                        "{}: {e}",
                        path.display()
                    )))
                }
            }
        }
        Err(GenerationBackendError::Fixture(format!(
            "no canned response for {} attempt {} under {}",
            request.cwe,
            request.attempt,
            self.dir.display()
        )))
    }
}

/// Candidates produced for one CWE across all attempts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub cwe: CweId,
    pub requested: usize,
    pub attempts: u32,
    pub raw_responses: Vec<String>,
    pub parsed: Vec<PairedExample>,
    pub rejected_candidates: Vec<RejectedCandidate>,
    /// False when retries ran out before `requested` candidates survived.
    pub complete: bool,
}

/// Destination for finished batches (the review queue).
pub trait BatchSink: Send + Sync {
    fn persist(&self, batch: &GenerationBatch) -> Result<usize, String>;
}

#[derive(Debug, Clone)]
pub struct GenerationSettings {
    pub template: PromptTemplate,
    pub profile: GenerationProfile,
    pub pairs: usize,
    pub max_retries: u32,
}

pub async fn generate_for_cwe(
    backend: &dyn GenerationBackend,
    settings: &GenerationSettings,
    cwe: &CweEntry,
    sink: &dyn BatchSink,
) -> Result<GenerationBatch, SynthError> {
    if settings.pairs == 0 {
        return Err(SynthError::ZeroPairs);
    }
    let provenance = Provenance {
        backend: backend.id(),
        template_version: settings.template.version.clone(),
        generated_at: Utc::now(),
    };
    let mut batch = GenerationBatch {
        cwe: cwe.id,
        requested: settings.pairs,
        attempts: 0,
        raw_responses: Vec::new(),
        parsed: Vec::new(),
        rejected_candidates: Vec::new(),
        complete: false,
    };
    let mut seen: HashSet<String> = HashSet::new();
    let mut feedback: Vec<String> = Vec::new();
    let mut any_parsed = false;
    let mut last_error: Option<SynthError> = None;

    for attempt in 1..=settings.max_retries + 1 {
        let shortfall = settings.pairs - batch.parsed.len();
        if shortfall == 0 {
            break;
        }
        batch.attempts = attempt;
        let prompt = if attempt == 1 {
            render_prompt(&settings.template, cwe, shortfall)?
        } else {
            render_retry_prompt(&settings.template, cwe, shortfall, &feedback)?
        };
        let request = GenerationRequest {
            prompt,
            cwe: cwe.id,
            attempt,
            max_output_length: settings.profile.max_output_length,
            sampling: settings.profile.sampling.clone(),
        };
        let raw = match backend.generate(&request).await {
            Ok(raw) => raw,
            Err(e) => {
                tracing::warn!(cwe = %cwe.id, attempt, error = %e, "generation request failed");
                last_error = Some(e.into());
                continue;
            }
        };
        batch.raw_responses.push(raw.clone());
        let parsed = match parse_generation(&raw, cwe.id, &provenance) {
            Ok(parsed) => parsed,
            Err(e) => {
                feedback = vec!["the response was not a JSON object with a \"pairs\" list".into()];
                last_error = Some(e);
                continue;
            }
        };
        any_parsed = true;
        feedback = parsed.rejections.iter().map(|r| r.reason.clone()).collect();
        batch.rejected_candidates.extend(parsed.rejections);
        for (index, candidate) in parsed.candidates.into_iter().enumerate() {
            let v = candidate.vulnerable.code().trim().to_owned();
            let f = candidate.fixed.code().trim().to_owned();
            let reason = if seen.contains(&v) || seen.contains(&f) {
                Some("duplicate of an earlier candidate")
            } else if batch.parsed.len() == settings.pairs {
                Some("surplus beyond the requested count")
            } else {
                None
            };
            match reason {
                Some(reason) => {
                    feedback.push(reason.to_owned());
                    batch.rejected_candidates.push(RejectedCandidate {
                        index,
                        vulnerable: Some(v),
                        fixed: Some(f),
                        reason: reason.to_owned(),
                    });
                }
                None => {
                    seen.insert(v);
                    seen.insert(f);
                    batch.parsed.push(candidate);
                }
            }
        }
    }

    if !any_parsed {
        return Err(SynthError::Exhausted {
            cwe: cwe.id,
            attempts: batch.attempts,
            last: Box::new(last_error.unwrap_or(SynthError::Unparseable { raw: String::new() })),
        });
    }
    batch.complete = batch.parsed.len() == settings.pairs;
    sink.persist(&batch).map_err(|message| SynthError::Sink {
        cwe: cwe.id,
        message,
    })?;
    Ok(batch)
}

/// Runs [`generate_for_cwe`] over `entries` with at most `parallelism`
/// CWEs in flight. Results come back in input order.
pub async fn generate_all(
    backend: &dyn GenerationBackend,
    settings: &GenerationSettings,
    entries: &[CweEntry],
    parallelism: usize,
    sink: &dyn BatchSink,
) -> Vec<(CweId, Result<GenerationBatch, SynthError>)> {
    stream::iter(entries)
        .map(|entry| async move { (entry.id, generate_for_cwe(backend, settings, entry, sink).await) })
        .buffered(parallelism.max(1))
        .collect()
        .await
}
