//! Command-line front end: generate, review-serve, assemble, eval, bench
//! and scan.
//!
//! Every command writes its JSON artifact before printing a summary.

pub mod commands;
pub mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{parse_assignment, ConfigError, Layers, ToolConfig, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "cweguard", version, about = "Curate, evaluate and run small-model CWE detectors")]
pub struct Cli {
    /// Flat TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "URL")]
    pub backend_url: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    pub instruction_file: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate vulnerable/fixed pairs and queue them for review.
    Generate {
        /// Restrict to these CWEs (repeatable), e.g. --cwe CWE-79.
        #[arg(long = "cwe", value_name = "CWE")]
        cwes: Vec<String>,
        #[arg(long)]
        pairs: Option<u64>,
    },
    /// Serve the review API and UI until interrupted.
    ReviewServe {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Export accepted pairs and write the train/test split.
    Assemble {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        test_size: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a backend on a labeled test file.
    Eval {
        #[arg(long, value_name = "FILE")]
        test: PathBuf,
        /// Record the run as a base-model baseline.
        #[arg(long)]
        baseline: bool,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Measure first-token delay, throughput and inter-token latency.
    Bench {
        #[arg(long)]
        requests: Option<u64>,
        #[arg(long)]
        warmup: Option<u64>,
        /// Run the warmup only.
        #[arg(long)]
        dry_run: bool,
        /// JSONL instances whose inputs form the prompt workload.
        #[arg(long, value_name = "FILE")]
        workload: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Classify Python files; exit 0 clean, 1 vulnerable, 2 error.
    Scan {
        /// Files, directories, or - for standard input.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Write the findings report here instead of standard output.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

impl Cli {
    /// Command-line values as configuration keys.
    pub fn flag_layer(&self) -> Result<Vec<(String, String)>, ConfigError> {
        let mut flags = Vec::new();
        if let Some(url) = &self.backend_url {
            flags.push(("backend_url".into(), url.clone()));
        }
        if let Some(path) = &self.instruction_file {
            flags.push(("instruction_file".into(), path.display().to_string()));
        }
        let mut put = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                flags.push((key.to_owned(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        match &self.command {
            Command::Generate { pairs, .. } => put("pairs_per_cwe", pairs.map(|n| n.to_string())),
            Command::ReviewServe { bind } => put("bind", bind.clone()),
            Command::Assemble { out, test_size, seed } => {
                put("dataset_dir", path(out));
                put("test_size", test_size.map(|n| n.to_string()));
                put("seed", seed.map(|n| n.to_string()));
            }
            Command::Eval { out, .. } => put("reports_dir", path(out)),
            Command::Bench {
                requests, warmup, out, ..
            } => {
                put("bench_requests", requests.map(|n| n.to_string()));
                put("bench_warmup", warmup.map(|n| n.to_string()));
                put("reports_dir", path(out));
            }
            Command::Scan { .. } => {}
        }
        // --set comes last so it can override the dedicated flags
        for assignment in &self.set {
            flags.push(parse_assignment(assignment)?);
        }
        Ok(flags)
    }

    pub fn resolve_config(&self, vars: &HashMap<String, String>) -> Result<ToolConfig, ConfigError> {
        let mut layers = Layers {
            env: Layers::env_from(vars),
            ..Layers::default()
        };
        let file = self.config.clone().or_else(|| vars.get(CONFIG_ENV).map(PathBuf::from));
        if let Some(path) = file {
            layers.file = Layers::parse_file(&path)?;
        }
        layers.flags = self.flag_layer()?.into_iter().collect();
        ToolConfig::resolve(&layers, vars)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub async fn run<I, T>(args: I, vars: &HashMap<String, String>, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match commands::dispatch(&cli, vars, out).await {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            2
        }
    }
}
