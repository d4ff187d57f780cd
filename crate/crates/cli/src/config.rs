//! Tool configuration: one flat key space, four layers.
//!
//! Each key resolves from the first layer that sets it: command-line flag,
//! then `CWEGUARD_<KEY>` environment variable, then the TOML config file,
//! then the built-in default. Credentials are read from the environment only
//! (`CWEGUARD_BACKEND_API_KEY`, `CWEGUARD_GENERATOR_API_KEY`).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use cweguard_core::backend::Dialect;
use cweguard_core::dataset::DEFAULT_INSTRUCTION;
use serde::Serialize;
use thiserror::Error;

pub const ENV_PREFIX: &str = "CWEGUARD_";
pub const BACKEND_API_KEY_ENV: &str = "CWEGUARD_BACKEND_API_KEY";
pub const GENERATOR_API_KEY_ENV: &str = "CWEGUARD_GENERATOR_API_KEY";
/// Names the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "CWEGUARD_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Text,
    Path,
    Url,
    Dialect,
    Integer,
    Fraction,
}

pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, kind, default, help }
}

pub const KEYS: &[Key] = &[
    key("backend_url", Kind::Url, None, "completion endpoint base URL, or mock:<script.json>"),
    key("backend_dialect", Kind::Dialect, Some("native"), "native | openai"),
    key("instruction", Kind::Text, Some(DEFAULT_INSTRUCTION), "instruction text paired with every input"),
    key("instruction_file", Kind::Path, None, "file holding the instruction; wins over `instruction`"),
    key("catalog", Kind::Path, None, "CWE catalog override (JSONL)"),
    key("store_dir", Kind::Path, Some("review-store"), "review store directory"),
    key("dataset_dir", Kind::Path, Some("dataset"), "assembled dataset directory"),
    key("reports_dir", Kind::Path, Some("reports"), "evaluation and bench artifacts"),
    key("generator", Kind::Url, None, "generation endpoint URL, or fixture:<dir>"),
    key("generator_template", Kind::Path, None, "generation prompt template file"),
    key("pairs_per_cwe", Kind::Integer, Some("10"), "pairs requested per CWE"),
    key("max_retries", Kind::Integer, Some("3"), "generation retries per CWE"),
    key("generation_parallelism", Kind::Integer, Some("4"), "CWEs generated concurrently"),
    key("test_size", Kind::Integer, Some("100"), "held-out instances"),
    key("seed", Kind::Integer, Some("7"), "split seed"),
    key("scan_max_bytes", Kind::Integer, Some("65536"), "larger files are skipped"),
    key("scan_workers", Kind::Integer, Some("4"), "concurrent scan requests"),
    key("reviewer", Kind::Text, Some("reviewer"), "reviewer recorded when a decision names none"),
    key("bind", Kind::Text, Some("127.0.0.1:8400"), "review server address"),
    key("assets_dir", Kind::Path, None, "static review UI assets"),
    key("max_new_tokens", Kind::Integer, Some("32"), "token cap for eval and scan"),
    key("eval_concurrency", Kind::Integer, Some("1"), "eval requests in flight"),
    key("eval_max_error_rate", Kind::Fraction, Some("0"), "tolerated fraction of failed eval instances"),
    key("bench_warmup", Kind::Integer, Some("1"), "bench warmup requests"),
    key("bench_requests", Kind::Integer, Some("5"), "bench measured requests"),
    key("bench_max_new_tokens", Kind::Integer, Some("64"), "bench token cap"),
    key("bench_max_failures", Kind::Integer, Some("0"), "bench failures tolerated"),
    key("host_description", Kind::Text, Some("unspecified"), "free-form host label in bench reports"),
    key("request_timeout_secs", Kind::Integer, Some("120"), "per-request timeout"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key {key:?} (from {origin})")]
    UnknownKey { key: String, origin: Origin },
    #[error("{key} = {value:?} (from {origin}): {message}")]
    Invalid {
        key: String,
        value: String,
        origin: Origin,
        message: String,
    },
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("--set expects key=value, got {0:?}")]
    BadAssignment(String),
    #[error("{key} is not configured; set it with --set {key}=..., {env}, or the config file")]
    Missing { key: &'static str, env: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Flag,
    Env,
    File,
    Default,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Origin::Flag => "command line",
            Origin::Env => "environment",
            Origin::File => "config file",
            Origin::Default => "default",
        })
    }
}

/// Raw string values per layer, before typing.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    pub flags: BTreeMap<String, String>,
    pub env: BTreeMap<String, String>,
    pub file: BTreeMap<String, String>,
}

impl Layers {
    /// Picks up `CWEGUARD_<KEY>` for every known key.
    pub fn env_from(vars: &HashMap<String, String>) -> BTreeMap<String, String> {
        KEYS.iter()
            .filter_map(|k| {
                vars.get(&env_name(k.name))
                    .map(|v| (k.name.to_owned(), v.clone()))
            })
            .collect()
    }

    pub fn parse_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Self::parse_file_text(&text).map_err(|message| ConfigError::File {
            path: path.to_owned(),
            message,
        })
    }

    /// Flat TOML: scalar values only.
    pub fn parse_file_text(text: &str) -> Result<BTreeMap<String, String>, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        table
            .into_iter()
            .map(|(k, v)| {
                let value = match v {
                    toml::Value::String(s) => s,
                    toml::Value::Integer(i) => i.to_string(),
                    toml::Value::Float(f) => f.to_string(),
                    toml::Value::Boolean(b) => b.to_string(),
                    other => return Err(format!("{k}: expected a scalar, found {}", other.type_str())),
                };
                Ok((k, value))
            })
            .collect()
    }

    pub fn lookup(&self, name: &str) -> Option<(&str, Origin)> {
        self.flags
            .get(name)
            .map(|v| (v.as_str(), Origin::Flag))
            .or_else(|| self.env.get(name).map(|v| (v.as_str(), Origin::Env)))
            .or_else(|| self.file.get(name).map(|v| (v.as_str(), Origin::File)))
            .or_else(|| find_key(name)?.default.map(|d| (d, Origin::Default)))
    }

    fn check_known(&self) -> Result<(), ConfigError> {
        for (map, origin) in [(&self.flags, Origin::Flag), (&self.file, Origin::File)] {
            if let Some(k) = map.keys().find(|k| find_key(k).is_none()) {
                return Err(ConfigError::UnknownKey {
                    key: k.clone(),
                    origin,
                });
            }
        }
        Ok(())
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())
}

pub fn parse_assignment(text: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| ConfigError::BadAssignment(text.to_owned()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::BadAssignment(text.to_owned()));
    }
    Ok((k.to_owned(), v.to_owned()))
}

/// Fully typed configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolConfig {
    pub backend_url: Option<String>,
    #[serde(serialize_with = "dialect_name")]
    pub backend_dialect: Dialect,
    pub instruction: String,
    pub instruction_file: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub store_dir: PathBuf,
    pub dataset_dir: PathBuf,
    pub reports_dir: PathBuf,
    pub generator: Option<String>,
    pub generator_template: Option<PathBuf>,
    pub pairs_per_cwe: u64,
    pub max_retries: u64,
    pub generation_parallelism: u64,
    pub test_size: u64,
    pub seed: u64,
    pub scan_max_bytes: u64,
    pub scan_workers: u64,
    pub reviewer: String,
    pub bind: String,
    pub assets_dir: Option<PathBuf>,
    pub max_new_tokens: u64,
    pub eval_concurrency: u64,
    pub eval_max_error_rate: f64,
    pub bench_warmup: u64,
    pub bench_requests: u64,
    pub bench_max_new_tokens: u64,
    pub bench_max_failures: u64,
    pub host_description: String,
    pub request_timeout_secs: u64,
    #[serde(skip)]
    pub backend_api_key: Option<String>,
    #[serde(skip)]
    pub generator_api_key: Option<String>,
}

fn dialect_name<S: serde::Serializer>(d: &Dialect, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match d {
        Dialect::Native => "native",
        Dialect::OpenAi => "openai",
    })
}

struct Resolver<'a> {
    layers: &'a Layers,
}

impl Resolver<'_> {
    fn raw(&self, name: &'static str) -> Option<(&str, Origin)> {
        debug_assert!(find_key(name).is_some(), "{name} missing from KEYS");
        self.layers.lookup(name)
    }

    fn invalid(name: &str, value: &str, origin: Origin, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            key: name.to_owned(),
            value: value.to_owned(),
            origin,
            message: message.into(),
        }
    }

    fn text(&self, name: &'static str) -> Option<String> {
        self.raw(name).map(|(v, _)| v.to_owned())
    }

    fn required_text(&self, name: &'static str) -> String {
        self.text(name).expect("key has a default")
    }

    fn path(&self, name: &'static str) -> Result<Option<PathBuf>, ConfigError> {
        match self.raw(name) {
            None => Ok(None),
            Some((v, origin)) if v.trim().is_empty() => Err(Self::invalid(name, v, origin, "path is empty")),
            Some((v, _)) => Ok(Some(PathBuf::from(v))),
        }
    }

    fn required_path(&self, name: &'static str) -> Result<PathBuf, ConfigError> {
        Ok(self.path(name)?.expect("key has a default"))
    }

    fn integer(&self, name: &'static str, min: u64) -> Result<u64, ConfigError> {
        let (v, origin) = self.raw(name).expect("key has a default");
        let n: u64 = v
            .trim()
            .parse()
            .map_err(|_| Self::invalid(name, v, origin, "expected a non-negative integer"))?;
        if n < min {
            return Err(Self::invalid(name, v, origin, format!("must be at least {min}")));
        }
        Ok(n)
    }

    fn fraction(&self, name: &'static str) -> Result<f64, ConfigError> {
        let (v, origin) = self.raw(name).expect("key has a default");
        match v.trim().parse::<f64>() {
            Ok(f) if (0.0..=1.0).contains(&f) => Ok(f),
            _ => Err(Self::invalid(name, v, origin, "expected a number within [0, 1]")),
        }
    }
}

impl ToolConfig {
    pub fn resolve(layers: &Layers, vars: &HashMap<String, String>) -> Result<Self, ConfigError> {
        layers.check_known()?;
        let r = Resolver { layers };
        let (dialect_raw, dialect_origin) = r.raw("backend_dialect").expect("default");
        let backend_dialect = dialect_raw
            .parse::<Dialect>()
            .map_err(|m| Resolver::invalid("backend_dialect", dialect_raw, dialect_origin, m))?;
        let instruction_file = r.path("instruction_file")?;
        let instruction = match &instruction_file {
            Some(path) => {
                let origin = r.raw("instruction_file").map_or(Origin::Default, |(_, o)| o);
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Resolver::invalid("instruction_file", &path.display().to_string(), origin, e.to_string())
                })?;
                text.trim_end_matches(['\n', '\r']).to_owned()
            }
            None => r.required_text("instruction"),
        };
        if instruction.trim().is_empty() {
            return Err(Resolver::invalid("instruction", &instruction, Origin::Default, "instruction is empty"));
        }
        let non_empty = |name: &'static str| -> Option<String> { r.text(name).filter(|s| !s.trim().is_empty()) };
        Ok(Self {
            backend_url: non_empty("backend_url"),
            backend_dialect,
            instruction,
            instruction_file,
            catalog: r.path("catalog")?,
            store_dir: r.required_path("store_dir")?,
            dataset_dir: r.required_path("dataset_dir")?,
            reports_dir: r.required_path("reports_dir")?,
            generator: non_empty("generator"),
            generator_template: r.path("generator_template")?,
            pairs_per_cwe: r.integer("pairs_per_cwe", 1)?,
            max_retries: r.integer("max_retries", 0)?,
            generation_parallelism: r.integer("generation_parallelism", 1)?,
            test_size: r.integer("test_size", 1)?,
            seed: r.integer("seed", 0)?,
            scan_max_bytes: r.integer("scan_max_bytes", 1)?,
            scan_workers: r.integer("scan_workers", 1)?,
            reviewer: r.required_text("reviewer"),
            bind: r.required_text("bind"),
            assets_dir: r.path("assets_dir")?,
            max_new_tokens: r.integer("max_new_tokens", 1)?,
            eval_concurrency: r.integer("eval_concurrency", 1)?,
            eval_max_error_rate: r.fraction("eval_max_error_rate")?,
            bench_warmup: r.integer("bench_warmup", 0)?,
            bench_requests: r.integer("bench_requests", 0)?,
            bench_max_new_tokens: r.integer("bench_max_new_tokens", 1)?,
            bench_max_failures: r.integer("bench_max_failures", 0)?,
            host_description: r.required_text("host_description"),
            request_timeout_secs: r.integer("request_timeout_secs", 1)?,
            backend_api_key: vars.get(BACKEND_API_KEY_ENV).cloned().filter(|s| !s.is_empty()),
            generator_api_key: vars.get(GENERATOR_API_KEY_ENV).cloned().filter(|s| !s.is_empty()),
        })
    }

    pub fn require_backend(&self) -> Result<&str, ConfigError> {
        self.backend_url.as_deref().ok_or(ConfigError::Missing {
            key: "backend_url",
            env: env_name("backend_url"),
        })
    }

    pub fn require_generator(&self) -> Result<&str, ConfigError> {
        self.generator.as_deref().ok_or(ConfigError::Missing {
            key: "generator",
            env: env_name("generator"),
        })
    }

    /// Every key rendered back to text, for display and round-trip checks.
    pub fn values(&self) -> BTreeMap<&'static str, Option<String>> {
        let json = serde_json::to_value(self).expect("config serializes");
        KEYS.iter()
            .map(|k| {
                let value = match &json[k.name] {
                    serde_json::Value::Null => None,
                    serde_json::Value::String(s) => Some(s.clone()),
                    other => Some(other.to_string()),
                };
                (k.name, value)
            })
            .collect()
    }
}
