//! Tolerant parsing of model output, binary scoring and the evaluation run.
//!
//! The positive class is any vulnerable verdict. Output that matches no rule
//! is kept verbatim and scored as a non-detection. Backend failures are kept
//! out of the matrix and listed per instance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use futures::StreamExt;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{assemble_prompt, CompletionBackend, CompletionRequest};
use crate::catalog::CweId;
use crate::dataset::{parse_label_strict, LabeledInstance, Record, Verdict};
use crate::{sha256_hex, SCHEMA_VERSION};

static SECURE_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bsecure\b").unwrap());
static VULNERABLE_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bvulnerable\b").unwrap());
static CWE_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bcwe[-_ ]?(\d{1,7})\b").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    Secure,
    /// `cwe` is `None` when the output flags a weakness without naming one.
    Vulnerable { cwe: Option<CweId> },
    Unparseable,
}

impl Prediction {
    pub fn is_positive(&self) -> bool {
        matches!(self, Prediction::Vulnerable { .. })
    }

    /// The verdict this prediction asserts, if it asserts a complete one.
    pub fn verdict(&self) -> Option<Verdict> {
        match self {
            Prediction::Secure => Some(Verdict::Secure),
            Prediction::Vulnerable { cwe: Some(id) } => Some(Verdict::Vulnerable(*id)),
            _ => None,
        }
    }
}

impl std::fmt::Display for Prediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Prediction::Secure => Verdict::Secure.fmt(f),
            Prediction::Vulnerable { cwe: Some(id) } => Verdict::Vulnerable(*id).fmt(f),
            Prediction::Vulnerable { cwe: None } => f.write_str("Vulnerable (CWE not stated)"),
            Prediction::Unparseable => f.write_str("Unparseable"),
        }
    }
}

/// Which parsing rule produced a prediction, in the order they are tried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRule {
    StrictLabel,
    SecureToken,
    VulnerableWithId,
    VulnerableWithoutId,
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub prediction: Prediction,
    pub raw: String,
    pub rule: ParseRule,
}

/// Maps free-form model text to a prediction. Total: never fails.
pub fn parse_model_output(text: &str) -> ParsedOutput {
    let (prediction, rule) = classify(text);
    ParsedOutput {
        prediction,
        raw: text.to_owned(),
        rule,
    }
}

fn classify(text: &str) -> (Prediction, ParseRule) {
    if let Ok(verdict) = parse_label_strict(text.trim()) {
        let prediction = match verdict {
            Verdict::Secure => Prediction::Secure,
            Verdict::Vulnerable(id) => Prediction::Vulnerable { cwe: Some(id) },
        };
        return (prediction, ParseRule::StrictLabel);
    }
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(first) = lines.next() else {
        return (Prediction::Unparseable, ParseRule::NoMatch);
    };
    if SECURE_TOKEN.is_match(first) {
        return (Prediction::Secure, ParseRule::SecureToken);
    }
    let head: Vec<&str> = std::iter::once(first).chain(lines.next()).collect();
    if !head.iter().any(|l| VULNERABLE_TOKEN.is_match(l)) {
        return (Prediction::Unparseable, ParseRule::NoMatch);
    }
    let id = head
        .iter()
        .flat_map(|l| CWE_ID.captures_iter(l))
        .find_map(|c| c[1].parse::<u32>().ok().and_then(CweId::new));
    match id {
        Some(id) => (Prediction::Vulnerable { cwe: Some(id) }, ParseRule::VulnerableWithId),
        None => (Prediction::Vulnerable { cwe: None }, ParseRule::VulnerableWithoutId),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Tp,
    Fp,
    Fn,
    Tn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scored {
    pub cell: Cell,
    pub exact: bool,
}

pub fn score(gold: Verdict, predicted: &Prediction) -> Scored {
    let cell = match (gold.is_vulnerable(), predicted.is_positive()) {
        (true, true) => Cell::Tp,
        (true, false) => Cell::Fn,
        (false, true) => Cell::Fp,
        (false, false) => Cell::Tn,
    };
    Scored {
        cell,
        exact: predicted.verdict() == Some(gold),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn add(&mut self, cell: Cell) {
        match cell {
            Cell::Tp => self.tp += 1,
            Cell::Fp => self.fp += 1,
            Cell::Fn => self.fn_ += 1,
            Cell::Tn => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("test instance {index} has an invalid gold label {label:?}")]
    InvalidGold { index: usize, label: String },
    #[error("{errors} of {total} instances failed, above the allowed error rate {bound}")]
    TooManyErrors { errors: usize, total: usize, bound: f64 },
    #[error("every instance failed; nothing to score")]
    NothingScored,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(matrix: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = matrix.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let precision = ratio(matrix.tp, matrix.tp + matrix.fp);
    let recall = ratio(matrix.tp, matrix.tp + matrix.fn_);
    // 2PR/(P+R) written over counts: 2tp / (2tp + fp + fn)
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => ratio(2 * matrix.tp, 2 * matrix.tp + matrix.fp + matrix.fn_),
        _ => None,
    };
    Ok(Metrics {
        accuracy: ratio(matrix.tp + matrix.tn, total),
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Base model, no fine-tuning.
    Baseline,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub backend_id: String,
    pub instruction_digest: String,
    pub seed: Option<u64>,
    pub timestamp: DateTime<Utc>,
    pub mode: EvalMode,
}

/// One persisted model call. Reports are recomputed from these alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOutput {
    pub index: usize,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Record for RawOutput {
    fn validate(&self) -> Result<(), String> {
        match (&self.output, &self.error) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err("exactly one of \"output\" and \"error\" must be present".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub instances: u64,
    pub exact_matches: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceError {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub metadata: EvalMetadata,
    pub matrix: ConfusionMatrix,
    pub metrics: Metrics,
    /// Gold-vulnerable instances by CWE.
    pub per_cwe: BTreeMap<CweId, Tally>,
    /// Gold-secure instances.
    pub secure: Tally,
    pub exact_matches: u64,
    pub unparseable: u64,
    pub rule_counts: BTreeMap<ParseRule, u64>,
    pub errors: Vec<InstanceError>,
}

impl EvalReport {
    pub fn positive_predictions(&self) -> u64 {
        self.matrix.tp + self.matrix.fp
    }

    /// Plain-text metric table.
    pub fn summary_table(&self) -> String {
        let pct = |v: Option<f64>| match v {
            Some(v) => format!("{:.2}%", v * 100.0),
            None => "undefined".to_owned(),
        };
        let m = &self.metrics;
        let mut out = String::new();
        let _ = writeln!(out, "{:<12}{:>12}", "Metric", "Value");
        let _ = writeln!(out, "{:<12}{:>12}", "Accuracy", pct(m.accuracy));
        let _ = writeln!(out, "{:<12}{:>12}", "Precision", pct(m.precision));
        let _ = writeln!(out, "{:<12}{:>12}", "Recall", pct(m.recall));
        let _ = writeln!(out, "{:<12}{:>12}", "F1-Score", pct(m.f1));
        let c = &self.matrix;
        let _ = writeln!(
            out,
            "\ntp={} fp={} fn={} tn={}  exact={}/{}  unparseable={}  errors={}",
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            self.exact_matches,
            c.total(),
            self.unparseable,
            self.errors.len()
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub concurrency: usize,
    /// Largest tolerated fraction of failed instances.
    pub max_error_rate: f64,
    pub max_new_tokens: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            concurrency: 1,
            max_error_rate: 0.0,
            max_new_tokens: 32,
        }
    }
}

fn gold_verdicts(test: &[LabeledInstance]) -> Result<Vec<Verdict>, EvalError> {
    test.iter()
        .enumerate()
        .map(|(index, inst)| {
            inst.verdict().map_err(|_| EvalError::InvalidGold {
                index,
                label: inst.output.clone(),
            })
        })
        .collect()
}

/// Issues one completion per instance; results keep input order.
pub async fn collect_outputs(
    backend: &dyn CompletionBackend,
    test: &[LabeledInstance],
    instruction: &str,
    options: &EvalOptions,
) -> Result<Vec<RawOutput>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    gold_verdicts(test)?;
    let calls = test.iter().enumerate().map(|(index, inst)| async move {
        let result = match assemble_prompt(instruction, &inst.input) {
            Ok(prompt) => backend
                .complete(&CompletionRequest::new(prompt, options.max_new_tokens))
                .await
                .map(|r| r.text)
                .map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        let (output, error) = match result {
            Ok(text) => (Some(text), None),
            Err(message) => {
                tracing::warn!(index, %message, "instance failed");
                (None, Some(message))
            }
        };
        RawOutput {
            index,
            gold: inst.output.clone(),
            output,
            error,
        }
    });
    Ok(futures::stream::iter(calls)
        .buffered(options.concurrency.max(1))
        .collect()
        .await)
}

/// Builds the report from persisted outputs. Deterministic.
pub fn rescore(raw: &[RawOutput], metadata: EvalMetadata, max_error_rate: f64) -> Result<EvalReport, EvalError> {
    if raw.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut matrix = ConfusionMatrix::default();
    let mut per_cwe: BTreeMap<CweId, Tally> = BTreeMap::new();
    let mut secure = Tally::default();
    let mut exact_matches = 0;
    let mut unparseable = 0;
    let mut rule_counts = BTreeMap::new();
    let mut errors = Vec::new();

    let mut ordered: Vec<&RawOutput> = raw.iter().collect();
    ordered.sort_by_key(|r| r.index);
    for record in ordered {
        let gold = parse_label_strict(&record.gold).map_err(|_| EvalError::InvalidGold {
            index: record.index,
            label: record.gold.clone(),
        })?;
        let Some(output) = &record.output else {
            errors.push(InstanceError {
                index: record.index,
                message: record.error.clone().unwrap_or_else(|| "no output".into()),
            });
            continue;
        };
        let parsed = parse_model_output(output);
        let scored = score(gold, &parsed.prediction);
        matrix.add(scored.cell);
        *rule_counts.entry(parsed.rule).or_insert(0) += 1;
        if parsed.prediction == Prediction::Unparseable {
            unparseable += 1;
        }
        let tally = match gold {
            Verdict::Secure => &mut secure,
            Verdict::Vulnerable(id) => per_cwe.entry(id).or_default(),
        };
        tally.instances += 1;
        if scored.exact {
            tally.exact_matches += 1;
            exact_matches += 1;
        }
    }

    let total = raw.len();
    if errors.len() as f64 > max_error_rate * total as f64 {
        return Err(EvalError::TooManyErrors {
            errors: errors.len(),
            total,
            bound: max_error_rate,
        });
    }
    if matrix.total() == 0 {
        return Err(EvalError::NothingScored);
    }
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        metrics: compute_metrics(&matrix)?,
        metadata,
        matrix,
        per_cwe,
        secure,
        exact_matches,
        unparseable,
        rule_counts,
        errors,
    })
}

pub struct EvalRun {
    pub raw: Vec<RawOutput>,
    pub report: Result<EvalReport, EvalError>,
}

/// Collects outputs and scores them. The raw outputs are returned even when
/// scoring fails so they can be archived.
pub async fn run_eval(
    backend: &dyn CompletionBackend,
    test: &[LabeledInstance],
    instruction: &str,
    mode: EvalMode,
    seed: Option<u64>,
    options: &EvalOptions,
) -> Result<EvalRun, EvalError> {
    let raw = collect_outputs(backend, test, instruction, options).await?;
    let metadata = EvalMetadata {
        backend_id: backend.id(),
        instruction_digest: sha256_hex(instruction),
        seed,
        timestamp: Utc::now(),
        mode,
    };
    let report = rescore(&raw, metadata, options.max_error_rate);
    Ok(EvalRun { raw, report })
}
