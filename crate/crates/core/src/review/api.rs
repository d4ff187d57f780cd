//! JSON-over-HTTP API for the review workbench.
//!
//! | method | path                         | body / query                       |
//! |--------|------------------------------|------------------------------------|
//! | GET    | `/api/pending`               | `cwe`, `page`, `page_size`         |
//! | GET    | `/api/items/{id}`            | item, catalog entry, line diff     |
//! | POST   | `/api/items/{id}/decision`   | `{checks, decision, reviewer?}`    |
//! | GET    | `/api/progress`              | per-CWE counts                     |
//!
//! Errors are `{"code": ..., "message": ..., "line": ...}`. Everything else
//! is served from the static assets directory, `index.html` at `/`.

use std::future::Future;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use similar::{ChangeTag, TextDiff};

use super::{CweProgress, DecisionKind, ItemId, PendingPage, ReviewChecks, ReviewError, ReviewItem, ReviewStore};
use crate::catalog::{parse_cwe_id, Catalog, CweEntry};

const DEFAULT_PAGE_SIZE: usize = 20;
const MAX_PAGE_SIZE: usize = 500;

const PLACEHOLDER_INDEX: &str = "<!doctype html><html><head><title>CWE review</title></head>\
<body><p>The review UI assets are not installed. The review API is available under <code>/api/</code>.</p></body></html>";

#[derive(Clone)]
pub struct ApiState {
    pub store: Arc<Mutex<ReviewStore>>,
    pub catalog: Arc<Catalog>,
    /// Reviewer recorded when a request names none.
    pub default_reviewer: String,
    pub assets: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

pub struct ApiError {
    status: StatusCode,
    body: ApiErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ApiErrorBody {
                code: code.into(),
                message: message.into(),
                line: None,
            },
        }
    }
}

impl From<ReviewError> for ApiError {
    fn from(err: ReviewError) -> Self {
        let message = err.to_string();
        match err {
            ReviewError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", message),
            ReviewError::Conflict { .. } => ApiError::new(StatusCode::CONFLICT, "conflict", message),
            ReviewError::Validation { line, .. } => {
                let mut e = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message);
                e.body.line = line;
                e
            }
            ReviewError::Store(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct PendingQuery {
    pub cwe: Option<String>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionRequest {
    #[serde(default)]
    pub checks: ReviewChecks,
    pub decision: DecisionKind,
    #[serde(default)]
    pub reviewer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffTag {
    Equal,
    Delete,
    Insert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffLine {
    pub tag: DiffTag,
    /// 1-based line in the vulnerable snippet.
    pub old_line: Option<usize>,
    /// 1-based line in the fixed snippet.
    pub new_line: Option<usize>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffHunk {
    pub lines: Vec<DiffLine>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemDetail {
    pub item: ReviewItem,
    pub cwe_entry: Option<CweEntry>,
    pub diff: Vec<DiffHunk>,
}

/// Line-level diff from `old` to `new`, grouped into hunks with three lines
/// of context.
pub fn line_diff(old: &str, new: &str) -> Vec<DiffHunk> {
    let diff = TextDiff::from_lines(old, new);
    diff.grouped_ops(3)
        .iter()
        .map(|group| DiffHunk {
            lines: group
                .iter()
                .flat_map(|op| diff.iter_changes(op))
                .map(|change| DiffLine {
                    tag: match change.tag() {
                        ChangeTag::Equal => DiffTag::Equal,
                        ChangeTag::Delete => DiffTag::Delete,
                        ChangeTag::Insert => DiffTag::Insert,
                    },
                    old_line: change.old_index().map(|i| i + 1),
                    new_line: change.new_index().map(|i| i + 1),
                    text: change.value().trim_end_matches(['\n', '\r']).to_owned(),
                })
                .collect(),
        })
        .collect()
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/api/pending", get(pending))
        .route("/api/items/{id}", get(item))
        .route("/api/items/{id}/decision", post(decision))
        .route("/api/progress", get(progress))
        .fallback(get(asset))
        .with_state(state)
}

/// Serves until `shutdown` resolves; in-flight requests finish first.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: ApiState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

fn lock(state: &ApiState) -> Result<std::sync::MutexGuard<'_, ReviewStore>, ApiError> {
    state
        .store
        .lock()
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", "store lock poisoned"))
}

async fn pending(
    State(state): State<ApiState>,
    Query(query): Query<PendingQuery>,
) -> Result<Json<PendingPage>, ApiError> {
    let cwe = query
        .cwe
        .as_deref()
        .filter(|s| !s.is_empty())
        .map(parse_cwe_id)
        .transpose()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    let page_size = query.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            format!("page_size must be within 1..={MAX_PAGE_SIZE}"),
        ));
    }
    let page = query.page.unwrap_or(1);
    if page == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "page is 1-based"));
    }
    Ok(Json(lock(&state)?.list_pending(cwe, page, page_size)))
}

async fn item(
    State(state): State<ApiState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ItemDetail>, ApiError> {
    let id = ItemId(id);
    let item = lock(&state)?
        .get(&id)
        .cloned()
        .ok_or(ReviewError::NotFound(id))?;
    let diff = line_diff(item.pair.vulnerable.code(), item.pair.fixed.code());
    Ok(Json(ItemDetail {
        cwe_entry: state.catalog.get(item.pair.cwe).cloned(),
        item,
        diff,
    }))
}

async fn decision(
    State(state): State<ApiState>,
    UrlPath(id): UrlPath<String>,
    Json(request): Json<DecisionRequest>,
) -> Result<Json<ReviewItem>, ApiError> {
    let reviewer = request
        .reviewer
        .filter(|r| !r.trim().is_empty())
        .unwrap_or_else(|| state.default_reviewer.clone());
    let updated = lock(&state)?.submit_decision(&ItemId(id), request.checks, request.decision, &reviewer)?;
    Ok(Json(updated))
}

async fn progress(State(state): State<ApiState>) -> Result<Json<Vec<CweProgress>>, ApiError> {
    Ok(Json(lock(&state)?.progress()))
}

async fn asset(State(state): State<ApiState>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let Some(dir) = &state.assets else {
        return if rel == "index.html" {
            ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], PLACEHOLDER_INDEX).into_response()
        } else {
            ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no asset {rel}")).into_response()
        };
    };
    let rel_path = Path::new(rel);
    if rel_path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "invalid asset path").into_response();
    }
    match tokio::fs::read(dir.join(rel_path)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(rel))], bytes).into_response(),
        Err(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no asset {rel}")).into_response(),
    }
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next() {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_marks_changed_lines() {
        let hunks = line_diff("a\nb\nc\n", "a\nB\nc\n");
        assert_eq!(hunks.len(), 1);
        let tags: Vec<_> = hunks[0].lines.iter().map(|l| l.tag.clone()).collect();
        assert_eq!(tags, [DiffTag::Equal, DiffTag::Delete, DiffTag::Insert, DiffTag::Equal]);
        assert_eq!(hunks[0].lines[1].old_line, Some(2));
        assert_eq!(hunks[0].lines[2].new_line, Some(2));
        assert_eq!(hunks[0].lines[2].text, "B");
        assert!(line_diff("same\n", "same\n").is_empty());
    }
}
