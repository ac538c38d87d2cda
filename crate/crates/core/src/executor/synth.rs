use std::fmt::Write as _;

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompt;

use super::{ExecutionTrace, TaskStatus};

/// Summary used when a trace has no tasks.
pub const NO_RESULTS: &str = "No results: the plan contained no executable tasks.";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub backend: String,
    pub temperature: f64,
    /// When false, gateway errors are returned instead of the templated summary.
    pub allow_fallback: bool,
}

/// Deterministic plain-text summary: one block per task in execution order.
pub fn summarize(query: &str, trace: &ExecutionTrace) -> String {
    if trace.tasks.is_empty() {
        return NO_RESULTS.to_string();
    }
    let mut out = format!("Results for: {query}\n");
    for t in &trace.tasks {
        let _ = write!(out, "\n[{}] {} via {}: ", t.task_id, t.task, t.model_name);
        match (t.status, &t.output) {
            (TaskStatus::Ok, Some(o)) if o.is_empty() => out.push_str("no result"),
            (TaskStatus::Ok, Some(o)) => out.push_str(&o.render()),
            (TaskStatus::Ok, None) => out.push_str("no result"),
            (TaskStatus::Failed, _) => {
                let _ = write!(out, "failed ({})", t.error.as_deref().unwrap_or("unknown error"));
            }
            (TaskStatus::Skipped, _) => {
                let _ = write!(out, "skipped ({})", t.error.as_deref().unwrap_or("upstream failure"));
            }
        }
        out.push('\n');
    }
    out
}

/// Asks the planning model to phrase an answer from the trace. With no
/// options, or on gateway failure when fallback is allowed, returns
/// [`summarize`].
pub fn synthesize_response(
    query: &str,
    trace: &ExecutionTrace,
    gateway: &Gateway,
    opts: Option<&SynthOptions>,
) -> Result<String, GatewayError> {
    let Some(opts) = opts else { return Ok(summarize(query, trace)) };
    let text = prompt::build_synthesis_prompt(query, trace);
    let request = ChatRequest::user(&opts.backend, text).with_temperature(opts.temperature);
    match gateway.complete(&request) {
        Ok(r) => Ok(r.content),
        Err(e) if opts.allow_fallback => {
            tracing::warn!("synthesis fell back to the templated summary: {e}");
            Ok(summarize(query, trace))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::ExecMode;

    #[test]
    fn empty_trace_gives_fixed_template() {
        let trace = ExecutionTrace { mode: ExecMode::Serial, clock: String::new(), topo_order: vec![], tasks: vec![], wall_time_ms: 0 };
        assert_eq!(synthesize_response("q", &trace, &Gateway::default(), None).unwrap(), NO_RESULTS);
    }
}
