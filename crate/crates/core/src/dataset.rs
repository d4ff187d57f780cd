//! Label grammar, the paired-example and instruction-instance data model,
//! stratified splitting, and JSONL persistence.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{parse_cwe_id, CweId};
use crate::{sha256_hex, SCHEMA_VERSION};

/// Instruction shipped as the default for assembly and inference.
pub const DEFAULT_INSTRUCTION: &str = "Analyze the following Python code snippet and determine whether it contains one of the MITRE Top 25 CWE weaknesses. Respond with 'Vulnerable - CWE-<id>' or 'Secure'.";

const SECURE_LABEL: &str = "Secure";
const VULNERABLE_PREFIX: &str = "Vulnerable - ";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("snippet is empty")]
    EmptySnippet,
    #[error("vulnerable and fixed snippets are identical")]
    PairNotDistinct,
    #[error("invalid review transition {from} -> {to}")]
    InvalidTransition { from: String, to: String },
    #[error("pair for {cwe} is {state}, only accepted pairs can be expanded")]
    NotAccepted { cwe: CweId, state: String },
    #[error("instances carry {0} distinct instructions, expected one")]
    MixedInstructions(usize),
    #[error("test size {test_size} must satisfy 0 < test size < {total}")]
    TestSizeOutOfRange { test_size: usize, total: usize },
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a valid label: {0:?}")]
pub struct LabelError(pub String);

/// Classification outcome shared by gold labels and model predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Secure,
    Vulnerable(CweId),
}

impl Verdict {
    pub fn is_vulnerable(&self) -> bool {
        matches!(self, Verdict::Vulnerable(_))
    }

    pub fn cwe(&self) -> Option<CweId> {
        match self {
            Verdict::Secure => None,
            Verdict::Vulnerable(id) => Some(*id),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Secure => f.write_str(SECURE_LABEL),
            Verdict::Vulnerable(id) => write!(f, "{VULNERABLE_PREFIX}{id}"),
        }
    }
}

pub fn render_label(verdict: &Verdict) -> String {
    verdict.to_string()
}

/// Inverse of [`render_label`]. Only a single trailing newline is tolerated.
pub fn parse_label_strict(text: &str) -> Result<Verdict, LabelError> {
    let body = text
        .strip_suffix("\r\n")
        .or_else(|| text.strip_suffix('\n'))
        .unwrap_or(text);
    if body == SECURE_LABEL {
        return Ok(Verdict::Secure);
    }
    let verdict = body
        .strip_prefix(VULNERABLE_PREFIX)
        .and_then(|id| parse_cwe_id(id).ok())
        .map(Verdict::Vulnerable)
        .ok_or_else(|| LabelError(text.to_owned()))?;
    if verdict.to_string() != body {
        return Err(LabelError(text.to_owned()));
    }
    Ok(verdict)
}

/// A non-empty Python source snippet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Snippet {
    code: String,
}

impl Snippet {
    pub fn new(code: impl Into<String>) -> Result<Self, DatasetError> {
        let code = code.into();
        if code.trim().is_empty() {
            return Err(DatasetError::EmptySnippet);
        }
        Ok(Self { code })
    }

    pub fn code(&self) -> &str {
        &self.code
    }

    pub fn line_count(&self) -> usize {
        self.code.lines().count()
    }
}

impl TryFrom<String> for Snippet {
    type Error = DatasetError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Snippet::new(value)
    }
}

impl From<Snippet> for String {
    fn from(value: Snippet) -> Self {
        value.code
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub backend: String,
    pub template_version: String,
    pub generated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReviewState {
    Pending,
    Accepted,
    Rejected { reason: String },
    EditedThenAccepted,
}

impl ReviewState {
    pub fn is_pending(&self) -> bool {
        matches!(self, ReviewState::Pending)
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, ReviewState::Accepted | ReviewState::EditedThenAccepted)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReviewState::Pending => "pending",
            ReviewState::Accepted => "accepted",
            ReviewState::Rejected { .. } => "rejected",
            ReviewState::EditedThenAccepted => "edited_then_accepted",
        }
    }
}

impl fmt::Display for ReviewState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A vulnerable snippet and its fixed counterpart for one CWE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedExample {
    pub cwe: CweId,
    pub vulnerable: Snippet,
    pub fixed: Snippet,
    pub provenance: Provenance,
    pub review_state: ReviewState,
}

impl PairedExample {
    /// Builds a pending pair; the two snippets must differ.
    pub fn new(
        cwe: CweId,
        vulnerable: Snippet,
        fixed: Snippet,
        provenance: Provenance,
    ) -> Result<Self, DatasetError> {
        let pair = Self {
            cwe,
            vulnerable,
            fixed,
            provenance,
            review_state: ReviewState::Pending,
        };
        pair.check_distinct()?;
        Ok(pair)
    }

    pub fn check_distinct(&self) -> Result<(), DatasetError> {
        if snippets_identical(self.vulnerable.code(), self.fixed.code()) {
            return Err(DatasetError::PairNotDistinct);
        }
        Ok(())
    }

    /// Digest over (cwe, vulnerable code, fixed code); the review queue's dedup key.
    pub fn content_digest(&self) -> String {
        content_digest(self.cwe, self.vulnerable.code(), self.fixed.code())
    }

    /// Moves out of `pending`. Any other transition is refused.
    pub fn transition(&mut self, next: ReviewState) -> Result<(), DatasetError> {
        if !self.review_state.is_pending() || next.is_pending() {
            return Err(DatasetError::InvalidTransition {
                from: self.review_state.to_string(),
                to: next.to_string(),
            });
        }
        self.review_state = next;
        Ok(())
    }
}

pub fn snippets_identical(a: &str, b: &str) -> bool {
    a.trim() == b.trim()
}

pub fn content_digest(cwe: CweId, vulnerable: &str, fixed: &str) -> String {
    sha256_hex(format!("{cwe}\0{vulnerable}\0{fixed}"))
}

/// One instruction-tuning row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledInstance {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl LabeledInstance {
    pub fn new(instruction: impl Into<String>, input: impl Into<String>, verdict: Verdict) -> Self {
        Self {
            instruction: instruction.into(),
            input: input.into(),
            output: render_label(&verdict),
        }
    }

    pub fn verdict(&self) -> Result<Verdict, LabelError> {
        parse_label_strict(&self.output)
    }
}

/// Expands an accepted pair into its vulnerable and secure instances.
pub fn expand_pair(
    pair: &PairedExample,
    instruction: &str,
) -> Result<[LabeledInstance; 2], DatasetError> {
    if !pair.review_state.is_accepted() {
        return Err(DatasetError::NotAccepted {
            cwe: pair.cwe,
            state: pair.review_state.to_string(),
        });
    }
    Ok([
        LabeledInstance::new(instruction, pair.vulnerable.code(), Verdict::Vulnerable(pair.cwe)),
        LabeledInstance::new(instruction, pair.fixed.code(), Verdict::Secure),
    ])
}

/// Fails unless every instance carries the same instruction bytes.
pub fn check_single_instruction(instances: &[LabeledInstance]) -> Result<(), DatasetError> {
    let distinct: HashSet<&str> = instances.iter().map(|i| i.instruction.as_str()).collect();
    if distinct.len() > 1 {
        return Err(DatasetError::MixedInstructions(distinct.len()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideCounts {
    pub train: usize,
    pub test: usize,
}

/// Sidecar record describing a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub test_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Keyed by rendered label, so each CWE's vulnerable rows and the
    /// secure rows are counted separately.
    pub counts: BTreeMap<String, SideCounts>,
    pub train_digest: String,
    pub test_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
    pub seed: u64,
    pub manifest: SplitManifest,
}

/// Deterministic split stratified by label.
///
/// Each label's share of the test side is its proportional quota with
/// largest-remainder rounding; ties between equal remainders are broken by
/// a seeded permutation of the labels.
pub fn split_dataset(
    instances: Vec<LabeledInstance>,
    test_size: usize,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let total = instances.len();
    if test_size == 0 || test_size >= total {
        return Err(DatasetError::TestSizeOutOfRange { test_size, total });
    }

    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, inst) in instances.iter().enumerate() {
        strata.entry(inst.output.as_str()).or_default().push(idx);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tie_order: Vec<usize> = (0..strata.len()).collect();
    tie_order.shuffle(&mut rng);

    let mut quotas: Vec<usize> = Vec::with_capacity(strata.len());
    let mut remainders: Vec<(usize, usize, usize)> = Vec::with_capacity(strata.len());
    for (pos, members) in strata.values().enumerate() {
        let scaled = test_size * members.len();
        quotas.push(scaled / total);
        remainders.push((scaled % total, tie_order[pos], pos));
    }
    let leftover = test_size - quotas.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, _, pos) in remainders.iter().take(leftover) {
        quotas[pos] += 1;
    }

    let mut in_test = vec![false; total];
    for (members, quota) in strata.values().zip(&quotas) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &idx in shuffled.iter().take(*quota) {
            in_test[idx] = true;
        }
    }

    let mut train = Vec::with_capacity(total - test_size);
    let mut test = Vec::with_capacity(test_size);
    for (inst, is_test) in instances.into_iter().zip(in_test) {
        if is_test {
            test.push(inst);
        } else {
            train.push(inst);
        }
    }

    let mut counts: BTreeMap<String, SideCounts> = BTreeMap::new();
    for inst in &train {
        counts.entry(inst.output.clone()).or_default().train += 1;
    }
    for inst in &test {
        counts.entry(inst.output.clone()).or_default().test += 1;
    }
    let manifest = SplitManifest {
        schema_version: SCHEMA_VERSION,
        seed,
        test_size,
        train_count: train.len(),
        test_count: test.len(),
        counts,
        train_digest: sha256_hex(to_jsonl_bytes(&train)),
        test_digest: sha256_hex(to_jsonl_bytes(&test)),
    };
    Ok(DatasetSplit {
        train,
        test,
        seed,
        manifest,
    })
}

/// A JSONL record type with a post-deserialization check.
pub trait Record: Serialize + DeserializeOwned {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

impl Record for LabeledInstance {
    fn validate(&self) -> Result<(), String> {
        if self.input.trim().is_empty() {
            return Err("input is empty".into());
        }
        self.verdict().map(|_| ()).map_err(|e| e.to_string())
    }
}

impl Record for PairedExample {
    fn validate(&self) -> Result<(), String> {
        self.check_distinct().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl JsonlError {
    pub fn line(&self) -> Option<usize> {
        match self {
            JsonlError::Line { line, .. } => Some(*line),
            JsonlError::Io { .. } => None,
        }
    }
}

/// Serializes records as JSONL, one per line, each newline-terminated.
pub fn to_jsonl_bytes<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).expect("records serialize to JSON");
        out.push(b'\n');
    }
    out
}

/// Writes `records` to `path` via a temporary file and rename.
pub fn write_jsonl<T: Record>(path: &Path, records: &[T]) -> Result<usize, JsonlError> {
    write_atomic(path, &to_jsonl_bytes(records)).map_err(|source| JsonlError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(records.len())
}

pub fn read_jsonl<T: Record>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_jsonl(&text).map_err(|(line, message)| JsonlError::Line {
        path: path.to_owned(),
        line,
        message,
    })
}

/// Parses JSONL text; errors carry the 1-based line number.
pub fn parse_jsonl<T: Record>(text: &str) -> Result<Vec<T>, (usize, String)> {
    text.lines()
        .enumerate()
        .map(|(idx, line)| {
            let record: T = serde_json::from_str(line).map_err(|e| (idx + 1, e.to_string()))?;
            record.validate().map_err(|msg| (idx + 1, msg))?;
            Ok(record)
        })
        .collect()
}

/// Writes `value` as pretty JSON (newline-terminated) via temp file and rename.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)
}
