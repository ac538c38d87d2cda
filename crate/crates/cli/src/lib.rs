//! Command-line and HTTP front-ends over [`urbanplan::pipeline::Pipeline`].
//!
//! Both front-ends build their pipeline with [`load_config`] and
//! [`urbanplan::pipeline::Pipeline::from_config`], and render results with
//! the helpers below, so a CLI invocation and a service request with the same
//! inputs produce the same artifacts.

pub mod commands;
pub mod server;

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;
use urbanplan::config::Config;
use urbanplan::pipeline::{FailureKind, PipelineRun};
use urbanplan::Plan;

/// Config file picked up from the working directory when `--config` is absent.
pub const DEFAULT_CONFIG_FILE: &str = "urbanllm.toml";

/// Reads `explicit`, else `urbanllm.toml` in the working directory if present,
/// else the built-in defaults.
pub fn load_config(explicit: Option<&Path>) -> anyhow::Result<Config> {
    match explicit {
        Some(p) => Config::load(p).with_context(|| format!("config {}", p.display())),
        None => {
            let p = PathBuf::from(DEFAULT_CONFIG_FILE);
            if p.is_file() {
                Config::load(&p).with_context(|| format!("config {}", p.display()))
            } else {
                Ok(Config::default())
            }
        }
    }
}

/// Reads a plan file in either the strict or the relaxed dialect.
pub fn read_plan(path: &Path) -> anyhow::Result<Plan> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    urbanplan::parse_relaxed(text.trim()).with_context(|| format!("parsing {}", path.display()))
}

/// The `{response, run_id}` body returned by `ask`.
pub fn ask_body(run: &PipelineRun) -> serde_json::Value {
    json!({ "response": run.response, "run_id": run.run_id })
}

/// HTTP status for a failed pipeline stage.
pub fn status_for(kind: FailureKind) -> u16 {
    match kind {
        FailureKind::InvalidInput => 400,
        FailureKind::PlanInvalid | FailureKind::MatchFailed => 422,
        FailureKind::Backend | FailureKind::PlanParseFailed => 502,
        FailureKind::ExecutionFailed => 500,
    }
}
