use std::collections::HashMap;
use std::future::Future;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use cweguard_core::backend::mock::{MockScript, ScriptedBackend};
use cweguard_core::backend::{assemble_prompt, CompletionBackend, HttpCompletionBackend};
use cweguard_core::bench::{run_bench, BenchConfig};
use cweguard_core::dataset::{check_single_instruction, read_jsonl, split_dataset, write_json, write_jsonl, SplitManifest};
use cweguard_core::eval::{run_eval, EvalMode, EvalOptions};
use cweguard_core::review::api::{self, ApiState};
use cweguard_core::review::ReviewStore;
use cweguard_core::scan::{expand_paths, run_scan, ScanOptions, ScanStatus, ScanTarget, STDIN_NAME};
use cweguard_core::synth::{
    generate_all, FixtureGenerationBackend, GenerationBackend, GenerationProfile, GenerationSettings,
    HttpGenerationBackend, PromptTemplate,
};
use cweguard_core::{load_catalog, parse_cwe_id, Catalog, LabeledInstance, SCHEMA_VERSION};
use serde::Serialize;

use crate::config::ToolConfig;
use crate::{Cli, Command};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_REPORT_FILE: &str = "eval-report.json";
pub const EVAL_RAW_FILE: &str = "eval-raw.jsonl";
pub const BENCH_REPORT_FILE: &str = "bench-report.json";
pub const GENERATION_SUMMARY_FILE: &str = "generation-summary.json";

const MOCK_SCHEME: &str = "mock:";
const FIXTURE_SCHEME: &str = "fixture:";

/// Snippet used as the bench workload when none is given.
const DEFAULT_BENCH_INPUT: &str = "import sqlite3\n\ndef find_user(conn, name):\n    cur = conn.cursor()\n    cur.execute(\"SELECT * FROM users WHERE name = '\" + name + \"'\")\n    return cur.fetchall()\n";

pub async fn dispatch(cli: &Cli, vars: &HashMap<String, String>, out: &mut (dyn Write + Send)) -> Result<i32> {
    let cfg = cli.resolve_config(vars)?;
    match &cli.command {
        Command::Generate { cwes, .. } => generate(&cfg, cwes, out).await,
        Command::ReviewServe { .. } => {
            let listener = tokio::net::TcpListener::bind(&cfg.bind)
                .await
                .with_context(|| format!("cannot bind {}", cfg.bind))?;
            review_serve(&cfg, listener, shutdown_signal(), out).await?;
            Ok(0)
        }
        Command::Assemble { .. } => assemble(&cfg, out),
        Command::Eval { test, baseline, .. } => eval(&cfg, test, *baseline, out).await,
        Command::Bench { dry_run, workload, .. } => bench(&cfg, *dry_run, workload.as_deref(), out).await,
        Command::Scan { paths, out: report } => scan(&cfg, paths, report.as_deref(), out).await,
    }
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        tracing::error!(error = %e, "cannot listen for interrupt; serving until killed");
        std::future::pending::<()>().await;
    }
}

fn catalog(cfg: &ToolConfig) -> Result<Catalog> {
    load_catalog(cfg.catalog.as_deref()).context("loading CWE catalog")
}

fn timeout(cfg: &ToolConfig) -> Duration {
    Duration::from_secs(cfg.request_timeout_secs)
}

/// `mock:<script.json>` runs the scripted backend in process; anything else
/// is an HTTP endpoint.
pub fn completion_backend(cfg: &ToolConfig) -> Result<Box<dyn CompletionBackend>> {
    let url = cfg.require_backend()?;
    if let Some(path) = url.strip_prefix(MOCK_SCHEME) {
        let script = MockScript::load(Path::new(path)).map_err(anyhow::Error::msg)?;
        return Ok(Box::new(ScriptedBackend::new(script)));
    }
    if !(url.starts_with("http://") || url.starts_with("https://")) {
        bail!("backend_url {url:?} must be an http(s) URL or {MOCK_SCHEME}<script.json>");
    }
    Ok(Box::new(HttpCompletionBackend::new(
        url,
        cfg.backend_dialect,
        cfg.backend_api_key.clone(),
        timeout(cfg),
    )))
}

fn generation_backend(cfg: &ToolConfig) -> Result<Box<dyn GenerationBackend>> {
    let target = cfg.require_generator()?;
    if let Some(dir) = target.strip_prefix(FIXTURE_SCHEME) {
        if !Path::new(dir).is_dir() {
            bail!("fixture directory {dir} does not exist");
        }
        return Ok(Box::new(FixtureGenerationBackend::new(dir)));
    }
    if !(target.starts_with("http://") || target.starts_with("https://")) {
        bail!("generator {target:?} must be an http(s) URL or {FIXTURE_SCHEME}<dir>");
    }
    Ok(Box::new(HttpGenerationBackend::new(
        target,
        cfg.generator_api_key.clone(),
        timeout(cfg),
    )))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Debug, Serialize)]
struct GenerationRow {
    cwe: String,
    requested: usize,
    attempts: u32,
    parsed: usize,
    rejected: usize,
    complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct GenerationSummary {
    schema_version: u32,
    backend: String,
    template_version: String,
    rows: Vec<GenerationRow>,
    pending_total: usize,
}

async fn generate(cfg: &ToolConfig, cwes: &[String], out: &mut (dyn Write + Send)) -> Result<i32> {
    let backend = generation_backend(cfg)?;
    let catalog = catalog(cfg)?;
    let mut entries = Vec::new();
    if cwes.is_empty() {
        entries.extend(catalog.entries().iter().cloned());
    } else {
        for text in cwes {
            let id = parse_cwe_id(text).with_context(|| format!("--cwe {text}"))?;
            let entry = catalog
                .get(id)
                .with_context(|| format!("{id} is not in the catalog"))?;
            entries.push(entry.clone());
        }
    }
    let template = match &cfg.generator_template {
        Some(path) => PromptTemplate::load(path).with_context(|| format!("reading template {}", path.display()))?,
        None => PromptTemplate::default(),
    };
    let settings = GenerationSettings {
        template,
        profile: GenerationProfile::default(),
        pairs: cfg.pairs_per_cwe as usize,
        max_retries: cfg.max_retries as u32,
    };
    let store = Mutex::new(ReviewStore::open(&cfg.store_dir).context("opening review store")?);
    let results = generate_all(
        backend.as_ref(),
        &settings,
        &entries,
        cfg.generation_parallelism as usize,
        &store,
    )
    .await;

    let rows: Vec<GenerationRow> = results
        .into_iter()
        .map(|(cwe, result)| match result {
            Ok(batch) => GenerationRow {
                cwe: cwe.to_string(),
                requested: batch.requested,
                attempts: batch.attempts,
                parsed: batch.parsed.len(),
                rejected: batch.rejected_candidates.len(),
                complete: batch.complete,
                error: None,
            },
            Err(e) => GenerationRow {
                cwe: cwe.to_string(),
                requested: settings.pairs,
                attempts: 0,
                parsed: 0,
                rejected: 0,
                complete: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let store = store.into_inner().expect("store lock");
    let summary = GenerationSummary {
        schema_version: SCHEMA_VERSION,
        backend: backend.id(),
        template_version: settings.template.version.clone(),
        pending_total: store.items().iter().filter(|i| i.pair.review_state.is_pending()).count(),
        rows,
    };
    write_json(&cfg.store_dir.join(GENERATION_SUMMARY_FILE), &summary)?;

    writeln!(out, "{:<10}{:>8}{:>10}{:>10}  status", "CWE", "parsed", "rejected", "attempts")?;
    for row in &summary.rows {
        let status = match (&row.error, row.complete) {
            (Some(e), _) => format!("failed: {e}"),
            (None, true) => "complete".to_owned(),
            (None, false) => format!("short by {}", row.requested - row.parsed),
        };
        writeln!(
            out,
            "{:<10}{:>8}{:>10}{:>10}  {status}",
            row.cwe, row.parsed, row.rejected, row.attempts
        )?;
    }
    writeln!(out, "pending review: {}", summary.pending_total)?;
    Ok(if summary.rows.iter().any(|r| r.parsed == 0) { 1 } else { 0 })
}

/// Serves until `shutdown` resolves.
pub async fn review_serve(
    cfg: &ToolConfig,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
    out: &mut (dyn Write + Send),
) -> Result<()> {
    let store = ReviewStore::open(&cfg.store_dir).context("opening review store")?;
    let pending = store.items().iter().filter(|i| i.pair.review_state.is_pending()).count();
    let state = ApiState {
        store: Arc::new(Mutex::new(store)),
        catalog: Arc::new(catalog(cfg)?),
        default_reviewer: cfg.reviewer.clone(),
        assets: cfg.assets_dir.clone(),
    };
    writeln!(
        out,
        "review server on http://{} ({pending} pending)",
        listener.local_addr()?
    )?;
    out.flush()?;
    api::serve(listener, state, shutdown).await?;
    writeln!(out, "review server stopped")?;
    Ok(())
}

fn assemble(cfg: &ToolConfig, out: &mut (dyn Write + Send)) -> Result<i32> {
    let catalog = catalog(cfg)?;
    let store = ReviewStore::open(&cfg.store_dir).context("opening review store")?;
    let instances = store.export_accepted(&cfg.instruction, &catalog);
    if instances.is_empty() {
        bail!(
            "no accepted pairs in {}; finish reviewing pending items before assembling",
            cfg.store_dir.display()
        );
    }
    check_single_instruction(&instances)?;
    let total = instances.len();
    let split = split_dataset(instances, cfg.test_size as usize, cfg.seed)?;

    ensure_dir(&cfg.dataset_dir)?;
    write_jsonl(&cfg.dataset_dir.join(TRAIN_FILE), &split.train)?;
    write_jsonl(&cfg.dataset_dir.join(TEST_FILE), &split.test)?;
    write_json(&cfg.dataset_dir.join(MANIFEST_FILE), &split.manifest)?;

    let m = &split.manifest;
    writeln!(out, "instances: {total} (train {}, test {})", m.train_count, m.test_count)?;
    writeln!(out, "seed: {}", m.seed)?;
    writeln!(out, "train digest: {}", m.train_digest)?;
    writeln!(out, "test digest:  {}", m.test_digest)?;
    writeln!(out, "{:<24}{:>7}{:>7}", "label", "train", "test")?;
    for (label, counts) in &m.counts {
        writeln!(out, "{label:<24}{:>7}{:>7}", counts.train, counts.test)?;
    }
    writeln!(out, "written to {}", cfg.dataset_dir.display())?;
    Ok(0)
}

fn manifest_seed(test: &Path) -> Option<u64> {
    let path = test.with_file_name(MANIFEST_FILE);
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str::<SplitManifest>(&text).ok().map(|m| m.seed)
}

async fn eval(cfg: &ToolConfig, test_path: &Path, baseline: bool, out: &mut (dyn Write + Send)) -> Result<i32> {
    let backend = completion_backend(cfg)?;
    let test: Vec<LabeledInstance> = read_jsonl(test_path)?;
    if test.iter().any(|i| i.instruction != cfg.instruction) {
        tracing::warn!("test instances carry a different instruction; prompting with the configured one");
    }
    let options = EvalOptions {
        concurrency: cfg.eval_concurrency as usize,
        max_error_rate: cfg.eval_max_error_rate,
        max_new_tokens: cfg.max_new_tokens as u32,
    };
    let mode = if baseline { EvalMode::Baseline } else { EvalMode::Finetuned };
    let run = run_eval(
        backend.as_ref(),
        &test,
        &cfg.instruction,
        mode,
        manifest_seed(test_path),
        &options,
    )
    .await?;

    ensure_dir(&cfg.reports_dir)?;
    write_jsonl(&cfg.reports_dir.join(EVAL_RAW_FILE), &run.raw)?;
    let report = run.report?;
    write_json(&cfg.reports_dir.join(EVAL_REPORT_FILE), &report)?;

    write!(out, "{}", report.summary_table())?;
    if baseline {
        writeln!(out, "positive predictions: {}", report.positive_predictions())?;
    }
    writeln!(out, "report: {}", cfg.reports_dir.join(EVAL_REPORT_FILE).display())?;
    Ok(0)
}

async fn bench(cfg: &ToolConfig, dry_run: bool, workload: Option<&Path>, out: &mut (dyn Write + Send)) -> Result<i32> {
    let backend = completion_backend(cfg)?;
    let inputs: Vec<String> = match workload {
        Some(path) => read_jsonl::<LabeledInstance>(path)?
            .into_iter()
            .map(|i| i.input)
            .collect(),
        None => vec![DEFAULT_BENCH_INPUT.to_owned()],
    };
    let prompts = inputs
        .iter()
        .map(|input| assemble_prompt(&cfg.instruction, input))
        .collect::<Result<Vec<_>, _>>()?;
    let config = BenchConfig {
        workload: prompts,
        warmup_requests: cfg.bench_warmup as usize,
        measured_requests: cfg.bench_requests as usize,
        max_new_tokens: cfg.bench_max_new_tokens as u32,
        max_failures: cfg.bench_max_failures as usize,
        host_description: cfg.host_description.clone(),
        dry_run,
    };
    let report = run_bench(backend.as_ref(), &config).await?;
    ensure_dir(&cfg.reports_dir)?;
    let path = cfg.reports_dir.join(BENCH_REPORT_FILE);
    write_json(&path, &report)?;
    write!(out, "{}", report.summary_table())?;
    writeln!(out, "report: {}", path.display())?;
    Ok(0)
}

async fn scan(cfg: &ToolConfig, paths: &[PathBuf], report_path: Option<&Path>, out: &mut (dyn Write + Send)) -> Result<i32> {
    let backend = completion_backend(cfg)?;
    let mut targets = Vec::new();
    for path in paths {
        if path.as_os_str() == "-" {
            let mut content = Vec::new();
            // one byte past the cap is enough to know the input is oversize
            std::io::stdin()
                .take(cfg.scan_max_bytes + 1)
                .read_to_end(&mut content)
                .context("reading standard input")?;
            targets.push(ScanTarget::Inline {
                name: STDIN_NAME.into(),
                content,
            });
        } else {
            targets.extend(expand_paths(std::slice::from_ref(path)));
        }
    }
    let options = ScanOptions {
        instruction: cfg.instruction.clone(),
        max_bytes: cfg.scan_max_bytes,
        workers: cfg.scan_workers as usize,
        max_new_tokens: cfg.max_new_tokens as u32,
    };
    let report = run_scan(backend.as_ref(), &targets, &options).await;

    let json = serde_json::to_string_pretty(&report)?;
    match report_path {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                ensure_dir(parent)?;
            }
            write_json(path, &report)?;
            for f in &report.findings {
                let what = match (&f.status, &f.prediction) {
                    (ScanStatus::Scanned, Some(p)) => p.to_string(),
                    (status, _) => format!(
                        "{}: {}",
                        serde_json::to_value(status)?.as_str().unwrap_or("?"),
                        f.message.as_deref().unwrap_or("")
                    ),
                };
                writeln!(out, "{}: {what}", f.path)?;
            }
            writeln!(out, "exit code {}", report.exit_code)?;
        }
        None => writeln!(out, "{json}")?,
    }
    Ok(report.exit_code)
}
