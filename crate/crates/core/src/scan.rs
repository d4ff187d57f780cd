//! Whole-file scanning of Python sources through a completion backend.
//!
//! Files are sent as text and never executed. Each input yields exactly one
//! finding, and findings come back in input order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::backend::{assemble_prompt, CompletionBackend, CompletionRequest};
use crate::eval::{parse_model_output, Prediction};
use crate::SCHEMA_VERSION;

pub const STDIN_NAME: &str = "<stdin>";

/// One unit of scan input.
#[derive(Debug, Clone, PartialEq)]
pub enum ScanTarget {
    File(PathBuf),
    /// Content already read, e.g. from standard input.
    Inline { name: String, content: Vec<u8> },
    /// A path that could not be enumerated.
    Unreadable { path: PathBuf, message: String },
}

impl ScanTarget {
    fn name(&self) -> String {
        match self {
            ScanTarget::File(path) | ScanTarget::Unreadable { path, .. } => path.display().to_string(),
            ScanTarget::Inline { name, .. } => name.clone(),
        }
    }
}

/// Expands directories into their `.py` files (sorted, recursive); files are
/// kept as given whatever their extension.
pub fn expand_paths(paths: &[PathBuf]) -> Vec<ScanTarget> {
    let mut targets = Vec::new();
    for path in paths {
        if !path.is_dir() {
            targets.push(ScanTarget::File(path.clone()));
            continue;
        }
        for entry in WalkDir::new(path).sort_by_file_name() {
            match entry {
                Ok(e) if e.file_type().is_file() && is_python(e.path()) => {
                    targets.push(ScanTarget::File(e.into_path()))
                }
                Ok(_) => {}
                Err(err) => targets.push(ScanTarget::Unreadable {
                    path: err.path().map(Path::to_owned).unwrap_or_else(|| path.clone()),
                    message: err.to_string(),
                }),
            }
        }
    }
    targets
}

fn is_python(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "py")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStatus {
    Scanned,
    Skipped,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanFinding {
    pub path: String,
    pub status: ScanStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub elapsed: f64,
}

impl ScanFinding {
    pub fn is_vulnerable(&self) -> bool {
        self.prediction.is_some_and(|p| p.is_positive())
    }

    fn without_prediction(path: String, status: ScanStatus, message: String, elapsed: f64) -> Self {
        Self {
            path,
            status,
            prediction: None,
            raw: None,
            message: Some(message),
            elapsed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOptions {
    pub instruction: String,
    pub max_bytes: u64,
    pub workers: usize,
    pub max_new_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub schema_version: u32,
    pub backend_id: String,
    pub findings: Vec<ScanFinding>,
    pub exit_code: i32,
}

/// 1 if anything was flagged vulnerable; otherwise 2 if any input failed or
/// every input was skipped; otherwise 0.
pub fn exit_code(findings: &[ScanFinding]) -> i32 {
    if findings.iter().any(ScanFinding::is_vulnerable) {
        1
    } else if findings.iter().any(|f| f.status == ScanStatus::Error)
        || (!findings.is_empty() && findings.iter().all(|f| f.status == ScanStatus::Skipped))
    {
        2
    } else {
        0
    }
}

async fn load(target: &ScanTarget, max_bytes: u64) -> Result<String, (ScanStatus, String)> {
    let bytes = match target {
        ScanTarget::Unreadable { message, .. } => return Err((ScanStatus::Error, message.clone())),
        ScanTarget::Inline { content, .. } => content.clone(),
        ScanTarget::File(path) => {
            let meta = tokio::fs::metadata(path)
                .await
                .map_err(|e| (ScanStatus::Error, e.to_string()))?;
            if !meta.is_file() {
                return Err((ScanStatus::Error, "not a regular file".into()));
            }
            if meta.len() > max_bytes {
                return Err((
                    ScanStatus::Skipped,
                    format!("{} bytes exceeds the {max_bytes}-byte limit", meta.len()),
                ));
            }
            tokio::fs::read(path)
                .await
                .map_err(|e| (ScanStatus::Error, e.to_string()))?
        }
    };
    if bytes.len() as u64 > max_bytes {
        return Err((
            ScanStatus::Skipped,
            format!("{} bytes exceeds the {max_bytes}-byte limit", bytes.len()),
        ));
    }
    let text = String::from_utf8(bytes).map_err(|_| (ScanStatus::Error, "not valid UTF-8".to_owned()))?;
    if text.trim().is_empty() {
        return Err((ScanStatus::Skipped, "file is empty".into()));
    }
    Ok(text)
}

async fn scan_one(backend: &dyn CompletionBackend, target: &ScanTarget, options: &ScanOptions) -> ScanFinding {
    let started = Instant::now();
    let path = target.name();
    let code = match load(target, options.max_bytes).await {
        Ok(code) => code,
        Err((status, message)) => {
            if status == ScanStatus::Skipped {
                tracing::warn!(%path, %message, "skipped");
            }
            return ScanFinding::without_prediction(path, status, message, started.elapsed().as_secs_f64());
        }
    };
    let result = match assemble_prompt(&options.instruction, &code) {
        Ok(prompt) => backend
            .complete(&CompletionRequest::new(prompt, options.max_new_tokens))
            .await
            .map_err(|e| e.to_string()),
        Err(e) => Err(e.to_string()),
    };
    let elapsed = started.elapsed().as_secs_f64();
    match result {
        Ok(completion) => {
            let parsed = parse_model_output(&completion.text);
            ScanFinding {
                path,
                status: ScanStatus::Scanned,
                prediction: Some(parsed.prediction),
                raw: Some(parsed.raw),
                message: None,
                elapsed,
            }
        }
        Err(message) => ScanFinding::without_prediction(path, ScanStatus::Error, message, elapsed),
    }
}

/// Scans with at most `options.workers` requests in flight.
pub async fn run_scan(backend: &dyn CompletionBackend, targets: &[ScanTarget], options: &ScanOptions) -> ScanReport {
    let findings: Vec<ScanFinding> = futures::stream::iter(targets.iter().map(|t| scan_one(backend, t, options)))
        .buffered(options.workers.max(1))
        .collect()
        .await;
    ScanReport {
        schema_version: SCHEMA_VERSION,
        backend_id: backend.id(),
        exit_code: exit_code(&findings),
        findings,
    }
}
