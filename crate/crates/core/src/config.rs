//! Run configuration, read from a TOML file (conventionally `urbanllm.toml`).
//!
//! Every key is optional. Relative paths are taken relative to the file's
//! directory. A complete example:
//!
//! ```toml
//! [backend]
//! kind = "replay"              # "replay" or "live"
//! replay_files = ["extra.jsonl"]
//! builtin_replay = true        # also load the shipped planner replies
//! model = "gpt-4o-mini"        # live only
//! api_base = "https://api.example.com/v1"   # else URBANLLM_API_BASE
//! timeout_secs = 60
//! max_inflight = 4
//! temperature = 0.0
//!
//! [paths]
//! registry = "zoo.json"        # default: built-in model zoo
//! fixtures = "fixtures"        # default: built-in fixtures
//! templates = "templates"      # default: built-in prompt templates
//! runs_dir = "runs"            # where run records are written
//!
//! [prompt]
//! ablate = ""                  # e.g. "tu" or "sf,cu"
//!
//! [matching]
//! llm = true
//! allow_fallback = true
//!
//! [synthesis]
//! llm = false
//! allow_fallback = true
//!
//! [execution]
//! mode = "serial"              # or "parallel"
//! workers = 4
//! clock = "2024-05-20T17:00:00+08:00"   # or "now"
//!
//! [eval]
//! strict_args = false
//!
//! [server]
//! host = "127.0.0.1"
//! port = 8080
//!
//! [dataset]
//! rng_seed = 0
//! train_ratio = 0.9
//! seeds_per_prompt = 3
//! temperature = 0.7
//! ```
//!
//! The live backend reads its key from `URBANLLM_API_KEY`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{ExecMode, Timestamp};
use crate::gateway::RetryPolicy;

/// Reference time of the shipped fixtures.
pub const FIXTURE_CLOCK: &str = "2024-05-20T17:00:00+08:00";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error("{key}: path {path} does not exist")]
    MissingPath { key: &'static str, path: String },
    #[error("{key}: {reason}")]
    BadValue { key: &'static str, reason: String },
    #[error("live backend needs {0} to be set")]
    MissingCredential(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Replay,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub replay_files: Vec<PathBuf>,
    pub builtin_replay: bool,
    pub model: String,
    pub api_base: Option<String>,
    pub timeout_secs: u64,
    pub max_inflight: usize,
    pub temperature: f64,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            replay_files: Vec::new(),
            builtin_replay: true,
            model: "gpt-4o-mini".into(),
            api_base: None,
            timeout_secs: 60,
            max_inflight: 4,
            temperature: 0.0,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub registry: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Comma-separated components to leave out.
    pub ablate: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmStageConfig {
    pub llm: bool,
    pub allow_fallback: bool,
}

impl Default for LlmStageConfig {
    fn default() -> Self {
        LlmStageConfig { llm: true, allow_fallback: true }
    }
}

/// Like [`LlmStageConfig`] but off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub llm: bool,
    pub allow_fallback: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { llm: false, allow_fallback: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    pub mode: ExecMode,
    pub workers: Option<usize>,
    /// RFC 3339 time, or `now`.
    pub clock: String,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        ExecutionConfig { mode: ExecMode::Serial, workers: None, clock: FIXTURE_CLOCK.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub strict_args: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { host: "127.0.0.1".into(), port: 8080 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub rng_seed: u64,
    pub train_ratio: f64,
    pub seeds_per_prompt: usize,
    pub temperature: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { rng_seed: 0, train_ratio: 0.9, seeds_per_prompt: 3, temperature: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendConfig,
    pub paths: PathsConfig,
    pub prompt: PromptConfig,
    pub matching: LlmStageConfig,
    pub synthesis: SynthesisConfig,
    pub execution: ExecutionConfig,
    pub eval: EvalConfig,
    pub server: ServerConfig,
    pub dataset: DatasetConfig,
}

impl Config {
    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse { path: path.display().to_string(), source },
            other => other,
        })
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Config =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: "<config>".into(), source: Box::new(e) })?;
        cfg.rebase(base_dir);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.paths.registry, &mut self.paths.fixtures, &mut self.paths.templates, &mut self.paths.runs_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.backend.replay_files.iter_mut().for_each(fix);
    }

    /// Fails on the first configured input path that does not exist.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let inputs: [(&'static str, Option<&PathBuf>); 3] = [
            ("paths.registry", self.paths.registry.as_ref()),
            ("paths.fixtures", self.paths.fixtures.as_ref()),
            ("paths.templates", self.paths.templates.as_ref()),
        ];
        for (key, p) in inputs {
            if let Some(p) = p.filter(|p| !p.exists()) {
                return Err(ConfigError::MissingPath { key, path: p.display().to_string() });
            }
        }
        if let Some(p) = self.backend.replay_files.iter().find(|p| !p.exists()) {
            return Err(ConfigError::MissingPath { key: "backend.replay_files", path: p.display().to_string() });
        }
        Ok(())
    }

    /// The execution clock.
    pub fn clock(&self) -> Result<Timestamp, ConfigError> {
        parse_clock(&self.execution.clock)
    }
}

/// RFC 3339 time, or `now` for the current local time.
pub fn parse_clock(text: &str) -> Result<Timestamp, ConfigError> {
    if text.trim().eq_ignore_ascii_case("now") {
        return Ok(chrono::Local::now().fixed_offset());
    }
    chrono::DateTime::parse_from_rfc3339(text.trim())
        .map_err(|e| ConfigError::BadValue { key: "execution.clock", reason: format!("'{text}': {e}") })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.backend.kind, BackendKind::Replay);
        assert!(c.matching.llm);
        assert!(!c.synthesis.llm);
        assert_eq!(c.clock().unwrap().to_rfc3339(), FIXTURE_CLOCK);
        assert_eq!(Config::from_toml("", Path::new(".")).unwrap(), c);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let c = Config::from_toml("[paths]\nregistry = \"zoo.json\"\n[execution]\nmode = \"parallel\"", Path::new("/etc/u")).unwrap();
        assert_eq!(c.paths.registry, Some(PathBuf::from("/etc/u/zoo.json")));
        assert_eq!(c.execution.mode, ExecMode::Parallel);
        assert!(!c.synthesis.llm);
        let partial = Config::from_toml("[synthesis]\nallow_fallback = false", Path::new(".")).unwrap();
        assert!(!partial.synthesis.llm);
    }

    #[test]
    fn unknown_keys_and_missing_paths_fail() {
        assert!(matches!(Config::from_toml("[paths]\nzoo = 1", Path::new(".")), Err(ConfigError::Parse { .. })));
        let c = Config::from_toml("[paths]\nfixtures = \"nope\"", Path::new("/nonexistent")).unwrap();
        match c.check_paths() {
            Err(ConfigError::MissingPath { key, .. }) => assert_eq!(key, "paths.fixtures"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_clock() {
        assert!(parse_clock("tomorrow").is_err());
        assert!(parse_clock("now").is_ok());
    }
}
