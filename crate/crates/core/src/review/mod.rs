//! Human review gate for generated pairs.
//!
//! The store is a directory:
//!
//! ```text
//! <store>/segments/segment-000001.jsonl   enqueued items, one file per enqueue call
//! <store>/audit.jsonl                     append-only decision log
//! ```
//!
//! Segments are written whole (temp file + rename) and never modified. An
//! item's review state is never stored directly; it is the result of
//! replaying the audit log over the enqueued items. A crash mid-append
//! leaves an unterminated last audit line, which is dropped on open.

pub mod api;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CweId};
use crate::dataset::{
    expand_pair, snippets_identical, write_atomic, LabeledInstance, PairedExample, ReviewState,
    Snippet,
};
use crate::synth::{BatchSink, GenerationBatch};
use crate::syntax::check_source;

const SEGMENT_DIR: &str = "segments";
const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    fn for_pair(pair: &PairedExample) -> Self {
        Self(pair.content_digest()[..16].to_owned())
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    pub fn pass() -> Self {
        Self {
            passed: true,
            note: None,
        }
    }

    pub fn fail(note: impl Into<String>) -> Self {
        Self {
            passed: false,
            note: Some(note.into()),
        }
    }
}

/// The three review criteria. `None` means not recorded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewChecks {
    #[serde(default)]
    pub classification_correct: Option<Check>,
    #[serde(default)]
    pub fix_valid: Option<Check>,
    #[serde(default)]
    pub realistic: Option<Check>,
}

impl ReviewChecks {
    pub fn all_passed() -> Self {
        Self {
            classification_correct: Some(Check::pass()),
            fix_valid: Some(Check::pass()),
            realistic: Some(Check::pass()),
        }
    }

    fn named(&self) -> [(&'static str, Option<&Check>); 3] {
        [
            ("classification_correct", self.classification_correct.as_ref()),
            ("fix_valid", self.fix_valid.as_ref()),
            ("realistic", self.realistic.as_ref()),
        ]
    }

    pub fn missing(&self) -> Vec<&'static str> {
        self.named()
            .into_iter()
            .filter(|(_, c)| c.is_none())
            .map(|(name, _)| name)
            .collect()
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.named()
            .into_iter()
            .filter(|(_, c)| matches!(c, Some(Check { passed: false, .. })))
            .map(|(name, _)| name)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionKind {
    Accept,
    Reject { reason: String },
    /// Replace both snippets, then accept.
    Edit { vulnerable: String, fixed: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    #[serde(flatten)]
    pub kind: DecisionKind,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: ItemId,
    /// Enqueue order, starting at 1.
    pub seq: u64,
    pub pair: PairedExample,
    pub checks: ReviewChecks,
    pub decision: Option<ReviewDecision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    /// Position in the log, starting at 1.
    pub seq: u64,
    pub item_id: ItemId,
    pub checks: ReviewChecks,
    pub decision: ReviewDecision,
    pub prior_state: ReviewState,
    pub new_state: ReviewState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    seq: u64,
    id: ItemId,
    pair: PairedExample,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store file {file}, line {line}: {message}")]
    Corrupt {
        file: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no review item {0}")]
    NotFound(ItemId),
    #[error("item {id} is already {state}")]
    Conflict { id: ItemId, state: String },
    #[error("{message}")]
    Validation {
        message: String,
        line: Option<usize>,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ReviewError {
    fn validation(message: impl Into<String>) -> Self {
        ReviewError::Validation {
            message: message.into(),
            line: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub id: ItemId,
    pub seq: u64,
    pub cwe: CweId,
    pub vulnerable_lines: usize,
    pub fixed_lines: usize,
    pub template_version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CweProgress {
    pub cwe: Option<CweId>,
    pub pending: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingPage {
    pub items: Vec<ItemSummary>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub total_pages: usize,
    pub progress: Vec<CweProgress>,
}

pub struct ReviewStore {
    dir: PathBuf,
    items: Vec<ReviewItem>,
    index: HashMap<ItemId, usize>,
    digests: HashSet<String>,
    next_segment: u32,
    audit: File,
    audit_bytes: u64,
    audit_len: u64,
}

impl fmt::Debug for ReviewStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReviewStore")
            .field("dir", &self.dir)
            .field("items", &self.items.len())
            .field("audit_len", &self.audit_len)
            .finish()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

impl ReviewStore {
    /// Opens (creating if needed) the store at `dir` and replays its audit log.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let segment_dir = dir.join(SEGMENT_DIR);
        fs::create_dir_all(&segment_dir).map_err(io_err(&segment_dir))?;

        let mut segments: Vec<(u32, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&segment_dir).map_err(io_err(&segment_dir))? {
            let path = entry.map_err(io_err(&segment_dir))?.path();
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            if let Some(n) = name
                .strip_prefix("segment-")
                .and_then(|s| s.strip_suffix(".jsonl"))
                .and_then(|s| s.parse().ok())
            {
                segments.push((n, path));
            }
        }
        segments.sort();

        let mut items = Vec::new();
        for (_, path) in &segments {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            for (idx, line) in text.lines().enumerate() {
                let corrupt = |message: String| StoreError::Corrupt {
                    file: path.clone(),
                    line: idx + 1,
                    message,
                };
                let record: SegmentRecord =
                    serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
                if !record.pair.review_state.is_pending() || record.id != ItemId::for_pair(&record.pair)
                {
                    return Err(corrupt("segment record is not a pending pair matching its id".into()));
                }
                items.push(ReviewItem {
                    id: record.id,
                    seq: record.seq,
                    pair: record.pair,
                    checks: ReviewChecks::default(),
                    decision: None,
                });
            }
        }
        items.sort_by_key(|i| i.seq);

        let audit_path = dir.join(AUDIT_FILE);
        let (records, audit_bytes) = load_audit(&audit_path)?;
        let audit_len = records.len() as u64;
        let digests = items.iter().map(|i| i.pair.content_digest()).collect();
        let items = replay(items, &records).map_err(|(line, message)| StoreError::Corrupt {
            file: audit_path.clone(),
            line,
            message,
        })?;
        let index = items
            .iter()
            .enumerate()
            .map(|(pos, item)| (item.id.clone(), pos))
            .collect();
        let audit = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&audit_path)
            .map_err(io_err(&audit_path))?;

        Ok(Self {
            next_segment: segments.last().map_or(1, |(n, _)| n + 1),
            dir,
            items,
            index,
            digests,
            audit,
            audit_bytes,
            audit_len,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn get(&self, id: &ItemId) -> Option<&ReviewItem> {
        self.index.get(id).map(|&pos| &self.items[pos])
    }

    pub fn audit_len(&self) -> u64 {
        self.audit_len
    }

    pub fn audit_records(&self) -> Result<Vec<AuditRecord>, StoreError> {
        load_audit(&self.dir.join(AUDIT_FILE)).map(|(records, _)| records)
    }

    /// Appends pending pairs not already present (by content digest).
    /// Returns the number actually enqueued.
    pub fn enqueue(&mut self, pairs: &[PairedExample]) -> Result<usize, StoreError> {
        let mut fresh: Vec<SegmentRecord> = Vec::new();
        let mut batch_digests = HashSet::new();
        let next_seq = self.items.last().map_or(0, |i| i.seq) + 1;
        for pair in pairs {
            let digest = pair.content_digest();
            if self.digests.contains(&digest) || !batch_digests.insert(digest) {
                continue;
            }
            let mut pair = pair.clone();
            pair.review_state = ReviewState::Pending;
            fresh.push(SegmentRecord {
                seq: next_seq + fresh.len() as u64,
                id: ItemId::for_pair(&pair),
                pair,
            });
        }
        if fresh.is_empty() {
            return Ok(0);
        }
        let path = self
            .dir
            .join(SEGMENT_DIR)
            .join(format!("segment-{:06}.jsonl", self.next_segment));
        write_atomic(&path, &crate::dataset::to_jsonl_bytes(&fresh)).map_err(io_err(&path))?;
        self.next_segment += 1;

        let count = fresh.len();
        for record in fresh {
            self.digests.insert(record.pair.content_digest());
            self.index.insert(record.id.clone(), self.items.len());
            self.items.push(ReviewItem {
                id: record.id,
                seq: record.seq,
                pair: record.pair,
                checks: ReviewChecks::default(),
                decision: None,
            });
        }
        Ok(count)
    }

    pub fn enqueue_batch(&mut self, batch: &GenerationBatch) -> Result<usize, StoreError> {
        self.enqueue(&batch.parsed)
    }

    /// Pending items in enqueue order. `page` is 1-based.
    pub fn list_pending(&self, cwe: Option<CweId>, page: usize, page_size: usize) -> PendingPage {
        let page = page.max(1);
        let page_size = page_size.max(1);
        let pending: Vec<&ReviewItem> = self
            .items
            .iter()
            .filter(|i| i.pair.review_state.is_pending())
            .filter(|i| cwe.is_none_or(|c| i.pair.cwe == c))
            .collect();
        let total = pending.len();
        let items = pending
            .into_iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .map(|i| ItemSummary {
                id: i.id.clone(),
                seq: i.seq,
                cwe: i.pair.cwe,
                vulnerable_lines: i.pair.vulnerable.line_count(),
                fixed_lines: i.pair.fixed.line_count(),
                template_version: i.pair.provenance.template_version.clone(),
            })
            .collect();
        let mut progress = self.progress();
        if let Some(c) = cwe {
            progress.retain(|p| p.cwe == Some(c));
        }
        PendingPage {
            items,
            page,
            page_size,
            total,
            total_pages: total.div_ceil(page_size),
            progress,
        }
    }

    /// Per-CWE counts, ordered by CWE number, with an overall row last
    /// (`cwe: None`).
    pub fn progress(&self) -> Vec<CweProgress> {
        let mut per: BTreeMap<CweId, CweProgress> = BTreeMap::new();
        let mut overall = CweProgress::default();
        for item in &self.items {
            let row = per.entry(item.pair.cwe).or_insert_with(|| CweProgress {
                cwe: Some(item.pair.cwe),
                ..Default::default()
            });
            for counts in [row, &mut overall] {
                match item.pair.review_state {
                    ReviewState::Pending => counts.pending += 1,
                    ReviewState::Rejected { .. } => counts.rejected += 1,
                    ReviewState::Accepted | ReviewState::EditedThenAccepted => counts.accepted += 1,
                }
            }
        }
        let mut rows: Vec<CweProgress> = per.into_values().collect();
        rows.push(overall);
        rows
    }

    /// Records a decision on a pending item.
    ///
    /// Nothing changes (in memory or on disk) unless the decision validates
    /// and its audit record is durably appended.
    pub fn submit_decision(
        &mut self,
        id: &ItemId,
        checks: ReviewChecks,
        kind: DecisionKind,
        reviewer: &str,
    ) -> Result<ReviewItem, ReviewError> {
        let pos = *self
            .index
            .get(id)
            .ok_or_else(|| ReviewError::NotFound(id.clone()))?;
        let item = &self.items[pos];
        if !item.pair.review_state.is_pending() {
            return Err(ReviewError::Conflict {
                id: id.clone(),
                state: item.pair.review_state.to_string(),
            });
        }
        if reviewer.trim().is_empty() {
            return Err(ReviewError::validation("reviewer identity is empty"));
        }
        let new_state = validate_decision(&checks, &kind)?;
        let record = AuditRecord {
            seq: self.audit_len + 1,
            item_id: id.clone(),
            checks,
            decision: ReviewDecision {
                kind,
                reviewer: reviewer.to_owned(),
                timestamp: Utc::now(),
            },
            prior_state: item.pair.review_state.clone(),
            new_state,
        };
        let mut updated = item.clone();
        apply_record(&mut updated, &record).map_err(ReviewError::validation)?;

        self.append_audit(&record)?;
        self.items[pos] = updated.clone();
        Ok(updated)
    }

    fn append_audit(&mut self, record: &AuditRecord) -> Result<(), StoreError> {
        let path = self.dir.join(AUDIT_FILE);
        let mut line = serde_json::to_vec(record).expect("audit record serializes");
        line.push(b'\n');
        let result = self
            .audit
            .write_all(&line)
            .and_then(|()| self.audit.sync_data());
        if let Err(source) = result {
            // drop whatever part of the line made it to disk
            let _ = self.audit.set_len(self.audit_bytes);
            return Err(StoreError::Io { path, source });
        }
        self.audit_bytes += line.len() as u64;
        self.audit_len += 1;
        Ok(())
    }

    /// Instances from every accepted pair, ordered by CWE rank then item id.
    /// CWEs absent from `catalog` sort after all ranked ones.
    pub fn export_accepted(&self, instruction: &str, catalog: &Catalog) -> Vec<LabeledInstance> {
        let mut accepted: Vec<&ReviewItem> = self
            .items
            .iter()
            .filter(|i| i.pair.review_state.is_accepted())
            .collect();
        accepted.sort_by_key(|i| {
            (
                catalog.rank_of(i.pair.cwe).unwrap_or(u32::MAX),
                i.pair.cwe,
                i.id.clone(),
            )
        });
        accepted
            .into_iter()
            .flat_map(|i| expand_pair(&i.pair, instruction).expect("filtered to accepted pairs"))
            .collect()
    }
}

impl BatchSink for Mutex<ReviewStore> {
    fn persist(&self, batch: &GenerationBatch) -> Result<usize, String> {
        self.lock()
            .map_err(|_| "review store lock poisoned".to_owned())?
            .enqueue_batch(batch)
            .map_err(|e| e.to_string())
    }
}

fn validate_decision(checks: &ReviewChecks, kind: &DecisionKind) -> Result<ReviewState, ReviewError> {
    let require_checks = || {
        let missing = checks.missing();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ReviewError::validation(format!(
                "all three checks must be recorded; missing {}",
                missing.join(", ")
            )))
        }
    };
    match kind {
        DecisionKind::Accept => {
            require_checks()?;
            let failed = checks.failed();
            if !failed.is_empty() {
                return Err(ReviewError::validation(format!(
                    "cannot accept with failed checks: {}",
                    failed.join(", ")
                )));
            }
            Ok(ReviewState::Accepted)
        }
        DecisionKind::Reject { reason } => {
            if reason.trim().is_empty() {
                return Err(ReviewError::validation("reject requires a reason"));
            }
            Ok(ReviewState::Rejected {
                reason: reason.clone(),
            })
        }
        DecisionKind::Edit { vulnerable, fixed } => {
            require_checks()?;
            for (side, code) in [("vulnerable", vulnerable), ("fixed", fixed)] {
                if code.trim().is_empty() {
                    return Err(ReviewError::validation(format!("edited {side} snippet is empty")));
                }
                check_source(code).map_err(|e| ReviewError::Validation {
                    message: format!("edited {side} snippet: {e}"),
                    line: Some(e.line),
                })?;
            }
            if snippets_identical(vulnerable, fixed) {
                return Err(ReviewError::validation("pair not distinct"));
            }
            Ok(ReviewState::EditedThenAccepted)
        }
    }
}

fn apply_record(item: &mut ReviewItem, record: &AuditRecord) -> Result<(), String> {
    if item.pair.review_state != record.prior_state {
        return Err(format!(
            "item {} is {}, audit record expects {}",
            item.id, item.pair.review_state, record.prior_state
        ));
    }
    if let DecisionKind::Edit { vulnerable, fixed } = &record.decision.kind {
        item.pair.vulnerable = Snippet::new(vulnerable.clone()).map_err(|e| e.to_string())?;
        item.pair.fixed = Snippet::new(fixed.clone()).map_err(|e| e.to_string())?;
    }
    item.pair
        .transition(record.new_state.clone())
        .map_err(|e| e.to_string())?;
    item.checks = record.checks.clone();
    item.decision = Some(record.decision.clone());
    Ok(())
}

/// Applies `audit` in order to freshly enqueued `items`.
///
/// Errors carry the 1-based audit line that could not be applied.
pub fn replay(
    mut items: Vec<ReviewItem>,
    audit: &[AuditRecord],
) -> Result<Vec<ReviewItem>, (usize, String)> {
    let index: HashMap<ItemId, usize> = items
        .iter()
        .enumerate()
        .map(|(pos, i)| (i.id.clone(), pos))
        .collect();
    for (line, record) in audit.iter().enumerate() {
        let pos = *index
            .get(&record.item_id)
            .ok_or_else(|| (line + 1, format!("unknown item {}", record.item_id)))?;
        apply_record(&mut items[pos], record).map_err(|m| (line + 1, m))?;
    }
    Ok(items)
}

// Returns the parsed records and the byte length of the intact prefix. An
// unterminated final line is a torn append and is truncated away.
fn load_audit(path: &Path) -> Result<(Vec<AuditRecord>, u64), StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let intact = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if intact < bytes.len() {
        tracing::warn!(
            path = %path.display(),
            dropped = bytes.len() - intact,
            "rolling back incomplete audit record"
        );
        let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        file.set_len(intact as u64).map_err(io_err(path))?;
        file.sync_all().map_err(io_err(path))?;
    }
    let text = std::str::from_utf8(&bytes[..intact]).map_err(|e| StoreError::Corrupt {
        file: path.to_owned(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let record: AuditRecord = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
            file: path.to_owned(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if record.seq != idx as u64 + 1 {
            return Err(StoreError::Corrupt {
                file: path.to_owned(),
                line: idx + 1,
                message: format!("audit sequence {} out of order", record.seq),
            });
        }
        records.push(record);
    }
    Ok((records, intact as u64))
}
