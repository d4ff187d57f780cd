//! Timing metrics over token traces: time to first token, decode throughput
//! and inter-token latency percentiles.
//!
//! "Latency" here is the gap between consecutive streamed tokens, pooled over
//! all measured requests. TTFT is summarized as the median of per-request
//! values. Throughput excludes the wait for the first token.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::time::Instant;

use crate::backend::{CompletionBackend, CompletionRequest, TimingTrace};
use crate::SCHEMA_VERSION;

pub const INTERPRETATION: &str = "latency = inter-token gap, pooled over measured requests (nearest-rank percentiles); \
TTFT = median of per-request first-token delays; TPS = tokens after the first / decode time, excluding TTFT; \
tokens = streamed units as reported by the backend";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("trace has no token arrivals")]
    EmptyTrace,
    #[error("no trace has two or more tokens")]
    NoDecodePhase,
    #[error("decode time is zero")]
    ZeroDecodeTime,
    #[error("percentile of an empty list")]
    EmptyValues,
    #[error("percentile {0} is outside (0, 100]")]
    InvalidPercentile(f64),
    #[error("invalid bench configuration: {0}")]
    InvalidConfig(String),
    #[error("{failed} requests failed, above the tolerance of {tolerance}; last error: {last}")]
    TooManyFailures { failed: usize, tolerance: usize, last: String },
}

pub fn ttft(trace: &TimingTrace) -> Result<f64, BenchError> {
    trace
        .token_arrivals
        .first()
        .map(|first| first - trace.request_sent_at)
        .ok_or(BenchError::EmptyTrace)
}

/// Consecutive arrival differences; empty for fewer than two arrivals.
pub fn inter_token_latencies(trace: &TimingTrace) -> Vec<f64> {
    trace.token_arrivals.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Decode-phase throughput over all traces with at least two tokens.
pub fn tokens_per_second(traces: &[TimingTrace]) -> Result<f64, BenchError> {
    let (tokens, seconds) = traces
        .iter()
        .filter(|t| t.token_arrivals.len() >= 2)
        .fold((0usize, 0.0f64), |(n, s), t| {
            let first = t.token_arrivals[0];
            let last = t.token_arrivals[t.token_arrivals.len() - 1];
            (n + t.token_arrivals.len() - 1, s + (last - first))
        });
    if tokens == 0 {
        return Err(BenchError::NoDecodePhase);
    }
    if seconds <= 0.0 {
        return Err(BenchError::ZeroDecodeTime);
    }
    Ok(tokens as f64 / seconds)
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of
/// the ascending sort.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, BenchError> {
    if values.is_empty() {
        return Err(BenchError::EmptyValues);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(BenchError::InvalidPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // p * n first keeps integer products exact
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Prompts, used round-robin.
    pub workload: Vec<String>,
    pub warmup_requests: usize,
    pub measured_requests: usize,
    pub max_new_tokens: u32,
    /// Failed requests tolerated before the run is abandoned.
    pub max_failures: usize,
    pub host_description: String,
    /// Run the warmup only and report zero statistics.
    pub dry_run: bool,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.workload.is_empty() {
            return Err(BenchError::InvalidConfig("workload is empty".into()));
        }
        if self.measured_requests == 0 && !self.dry_run {
            return Err(BenchError::InvalidConfig("measured_requests must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(BenchError::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEnvironment {
    pub backend_id: String,
    pub host_description: String,
    pub warmup_requests: usize,
    pub measured_requests: usize,
    pub failed_requests: usize,
    pub total_tokens: usize,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub interpretation: String,
    pub dry_run: bool,
    pub ttft_seconds: Vec<f64>,
    pub ttft_median: f64,
    pub tokens_per_second: f64,
    pub latency_p50: f64,
    pub latency_p95: f64,
    pub latency_p99: f64,
    pub environment: BenchEnvironment,
}

impl BenchReport {
    pub fn from_traces(traces: &[TimingTrace], environment: BenchEnvironment) -> Result<Self, BenchError> {
        let ttfts = traces.iter().map(ttft).collect::<Result<Vec<_>, _>>()?;
        let gaps: Vec<f64> = traces.iter().flat_map(inter_token_latencies).collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            interpretation: INTERPRETATION.into(),
            dry_run: false,
            ttft_median: percentile(&ttfts, 50.0)?,
            ttft_seconds: ttfts,
            tokens_per_second: tokens_per_second(traces)?,
            latency_p50: percentile(&gaps, 50.0)?,
            latency_p95: percentile(&gaps, 95.0)?,
            latency_p99: percentile(&gaps, 99.0)?,
            environment,
        })
    }

    fn empty(environment: BenchEnvironment) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            interpretation: INTERPRETATION.into(),
            dry_run: true,
            ttft_seconds: Vec::new(),
            ttft_median: 0.0,
            tokens_per_second: 0.0,
            latency_p50: 0.0,
            latency_p95: 0.0,
            latency_p99: 0.0,
            environment,
        }
    }

    /// Plain-text timing table.
    pub fn summary_table(&self) -> String {
        let rows = [
            ("Time to First Token (TTFT)", format!("{:.3} seconds", self.ttft_median)),
            ("Tokens per Second (TPS)", format!("{:.2} tokens/sec", self.tokens_per_second)),
            ("Median Latency (P50)", format!("{:.3} seconds", self.latency_p50)),
            ("P95 Latency", format!("{:.3} seconds", self.latency_p95)),
            ("P99 Latency", format!("{:.3} seconds", self.latency_p99)),
        ];
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.interpretation);
        let _ = writeln!(out, "{:<30}Value", "Metric");
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<30}{value}");
        }
        let env = &self.environment;
        let _ = writeln!(
            out,
            "\nrequests={} warmup={} failed={} tokens={} wall={:.3}s host={}",
            env.measured_requests,
            env.warmup_requests,
            env.failed_requests,
            env.total_tokens,
            env.wall_time_seconds,
            env.host_description
        );
        out
    }
}

/// Warmup, then measured requests one at a time.
pub async fn run_bench(backend: &dyn CompletionBackend, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let started = Instant::now();
    let measured = if config.dry_run { 0 } else { config.measured_requests };
    let mut traces = Vec::with_capacity(measured);
    let mut failed = 0;
    let mut last_error = String::new();

    for i in 0..config.warmup_requests + measured {
        let prompt = &config.workload[i % config.workload.len()];
        let request = CompletionRequest::new(prompt.clone(), config.max_new_tokens);
        match backend.complete(&request).await {
            Ok(result) if i >= config.warmup_requests => traces.push(result.trace),
            Ok(_) => {}
            Err(e) => {
                tracing::warn!(request = i, error = %e, "bench request failed");
                failed += 1;
                last_error = e.to_string();
                if failed > config.max_failures {
                    return Err(BenchError::TooManyFailures {
                        failed,
                        tolerance: config.max_failures,
                        last: last_error,
                    });
                }
            }
        }
    }

    let environment = BenchEnvironment {
        backend_id: backend.id(),
        host_description: config.host_description.clone(),
        warmup_requests: config.warmup_requests,
        measured_requests: traces.len(),
        failed_requests: failed,
        total_tokens: traces.iter().map(|t| t.token_count).sum(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    if config.dry_run {
        return Ok(BenchReport::empty(environment));
    }
    if traces.is_empty() {
        return Err(BenchError::TooManyFailures {
            failed,
            tolerance: config.max_failures,
            last: last_error,
        });
    }
    BenchReport::from_traces(&traces, environment)
}
