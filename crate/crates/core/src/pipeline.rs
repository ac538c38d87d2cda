//! The end-to-end query pipeline: analysis, matching, generation.
//!
//! *Analysis* builds the planning prompt, asks the planner backend and
//! parses and validates the plan. *Matching* assigns a model card to each
//! task. *Generation* executes the plan and phrases the answer. Each run is
//! recorded in a [`PipelineRun`]; a failing stage ends the run and the error
//! carries the partial record.

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::{Fixtures, StubAdapters, StubConfig};
use crate::config::{BackendKind, Config, ConfigError};
use crate::executor::{execute, synthesize_response, AdapterSet, ExecMode, ExecOptions, ExecutionTrace, SynthOptions, Timestamp};
use crate::gateway::{ChatRequest, Gateway, LiveBackend, ReplayBackend, ReplayStore, ENV_API_BASE, ENV_API_KEY};
use crate::parser::{extract_plan, serialize_strict};
use crate::plan::{validate, Plan, Severity, ValidationIssue};
use crate::prompt::{build_inference_prompt, ComponentSet, PromptTemplates};
use crate::registry::{chat_log, match_all_fallback, match_llm, MatchOptions, MatchResult, Registry};

/// Planner replies recorded for the reference queries.
pub const BUILTIN_REPLAY: &str = include_str!("../assets/replay/planner.jsonl");

/// Name under which the planning backend is registered.
pub const PLANNER: &str = "planner";

/// Parking forecast query used as the end-to-end demonstration.
pub const CARPARK_QUERY: &str = "How many parking lots will be available at Marina Square Carpark when I get there at 7PM?";

/// Planner reply recorded for [`CARPARK_QUERY`].
pub const CARPARK_PLAN: &str = "[{task: time_series_prediction, id: 0, dep: [1], args: {location_gps_list: <resource>-1, time: 7PM, input: history_steps, domain: 'parking'}}, {task: map_mapping, id: 1, dep: [-1], args: {location_name_list:['Marina Square Carpark']}}]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Analysis,
    Matching,
    Generation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Analysis => "analysis",
            Stage::Matching => "matching",
            Stage::Generation => "generation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The query or plan handed in was unusable.
    InvalidInput,
    /// A chat backend failed.
    Backend,
    PlanParseFailed,
    /// The plan parsed but has validation violations.
    PlanInvalid,
    MatchFailed,
    ExecutionFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<ValidationIssue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub elapsed_ms: f64,
}

/// Everything one run produced, in stage order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineRun {
    pub run_id: String,
    pub query: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_plan: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<Plan>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<ValidationIssue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matching: Option<MatchResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<ExecutionTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub stages: Vec<StageTiming>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<StageFailure>,
}

impl PipelineRun {
    fn new(query: &str) -> Self {
        PipelineRun {
            run_id: String::new(),
            query: query.to_string(),
            prompt: None,
            raw_plan: None,
            plan: None,
            warnings: Vec::new(),
            matching: None,
            trace: None,
            response: None,
            stages: Vec::new(),
            error: None,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("run serializes")
    }

    fn seal(&mut self) {
        let mut h = Sha256::new();
        h.update(self.query.as_bytes());
        h.update([0]);
        if let Some(p) = &self.plan {
            h.update(serialize_strict(p).as_bytes());
        }
        h.update([0]);
        if let Some(r) = &self.response {
            h.update(r.as_bytes());
        }
        self.run_id = hex::encode(&h.finalize()[..8]);
    }
}

#[derive(Debug, Clone, Error)]
#[error("{} stage failed: {}", .failure.stage, .failure.message)]
pub struct PipelineError {
    pub failure: StageFailure,
    /// The run up to and including the failing stage.
    pub run: Box<PipelineRun>,
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        self.failure.stage
    }

    pub fn kind(&self) -> FailureKind {
        self.failure.kind
    }
}

/// Stage settings that do not depend on loaded resources.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub enabled: ComponentSet,
    pub temperature: f64,
    /// LLM-assisted matching; `None` uses the deterministic fallback only.
    pub matching: Option<MatchSettings>,
    /// LLM phrasing of the answer; `None` uses the templated summary.
    pub synthesis: Option<SynthOptions>,
    pub exec: ExecOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSettings {
    pub backend: String,
    pub allow_fallback: bool,
}

impl PipelineSettings {
    pub fn new(clock: Timestamp) -> Self {
        PipelineSettings {
            enabled: ComponentSet::all(),
            temperature: 0.0,
            matching: Some(MatchSettings { backend: PLANNER.into(), allow_fallback: true }),
            synthesis: None,
            exec: ExecOptions { mode: ExecMode::Serial, workers: None, clock },
        }
    }
}

pub struct Pipeline {
    pub gateway: Arc<Gateway>,
    pub templates: PromptTemplates,
    pub registry: Registry,
    pub adapters: AdapterSet,
    pub settings: PipelineSettings,
}

/// The shipped planner replies.
pub fn builtin_replay() -> ReplayStore {
    ReplayStore::from_jsonl(BUILTIN_REPLAY, "builtin planner replay").expect("shipped replay store is valid")
}

/// Replay store answering the full planning prompt of every reference
/// query (and [`CARPARK_QUERY`]) with its reference plan text.
pub fn reference_replay(templates: &PromptTemplates) -> ReplayStore {
    let mut store = ReplayStore::default();
    let pairs = crate::golden::golden_corpus()
        .iter()
        .map(|g| (g.query.as_str(), g.answer.as_str()))
        .chain(std::iter::once((CARPARK_QUERY, CARPARK_PLAN)));
    for (query, answer) in pairs {
        let prompt = build_inference_prompt(templates, query, ComponentSet::all()).expect("reference queries are non-empty");
        store.insert_prompt(&prompt, answer);
    }
    store
}

impl Pipeline {
    /// Builds every resource named by `config`. Paths are checked first.
    pub fn from_config(config: &Config) -> Result<Pipeline, PipelineBuildError> {
        config.check_paths()?;
        let clock = config.clock()?;
        let enabled = ComponentSet::ablating(&config.prompt.ablate)?;

        let b = &config.backend;
        let mut gateway = Gateway::new(b.retry, b.max_inflight);
        match b.kind {
            BackendKind::Replay => {
                let mut store = if b.builtin_replay { builtin_replay() } else { ReplayStore::default() };
                store.merge(ReplayStore::load_all(&b.replay_files)?);
                gateway.register(PLANNER, ReplayBackend::new(store));
            }
            BackendKind::Live => {
                let base = match &b.api_base {
                    Some(base) => base.clone(),
                    None => std::env::var(ENV_API_BASE).map_err(|_| ConfigError::MissingCredential(ENV_API_BASE))?,
                };
                let key = std::env::var(ENV_API_KEY).map_err(|_| ConfigError::MissingCredential(ENV_API_KEY))?;
                gateway.register(PLANNER, LiveBackend::new(base, key, &b.model, std::time::Duration::from_secs(b.timeout_secs)));
            }
        }

        let templates = match &config.paths.templates {
            Some(dir) => PromptTemplates::load(dir)?,
            None => PromptTemplates::builtin(),
        };
        let registry = match &config.paths.registry {
            Some(p) => Registry::load(p)?,
            None => Registry::builtin(),
        };
        let fixtures = match &config.paths.fixtures {
            Some(dir) => Fixtures::load(dir)?,
            None => Fixtures::builtin(),
        };
        let settings = PipelineSettings {
            enabled,
            temperature: b.temperature,
            matching: config
                .matching
                .llm
                .then(|| MatchSettings { backend: PLANNER.into(), allow_fallback: config.matching.allow_fallback }),
            synthesis: config.synthesis.llm.then(|| SynthOptions {
                backend: PLANNER.into(),
                temperature: b.temperature,
                allow_fallback: config.synthesis.allow_fallback,
            }),
            exec: ExecOptions { mode: config.execution.mode, workers: config.execution.workers, clock },
        };
        Ok(Pipeline {
            gateway: Arc::new(gateway),
            templates,
            registry,
            adapters: StubAdapters::new(fixtures, StubConfig::default()).into_set(),
            settings,
        })
    }

    /// Analysis stage only: prompt, planner reply, parsed and validated plan.
    pub fn plan_query(&self, query: &str) -> Result<PipelineRun, PipelineError> {
        let mut run = PipelineRun::new(query);
        self.analysis(&mut run)?;
        run.seal();
        Ok(run)
    }

    /// All three stages.
    pub fn run_query(&self, query: &str) -> Result<PipelineRun, PipelineError> {
        let mut run = PipelineRun::new(query);
        self.analysis(&mut run)?;
        self.downstream(&mut run, true)?;
        run.seal();
        Ok(run)
    }

    /// Matching and execution of a given plan, optionally with the answer.
    pub fn run_plan(&self, query: &str, plan: Plan, respond: bool) -> Result<PipelineRun, PipelineError> {
        let mut run = PipelineRun::new(query);
        run.raw_plan = Some(serialize_strict(&plan));
        let report = validate(&plan);
        run.plan = Some(plan);
        accept_report(&mut run, report.issues)?;
        self.downstream(&mut run, respond)?;
        run.seal();
        Ok(run)
    }

    /// Matching only.
    pub fn match_plan(&self, query: &str, plan: &Plan) -> Result<MatchResult, PipelineError> {
        let mut run = PipelineRun::new(query);
        run.plan = Some(plan.clone());
        let started = Instant::now();
        self.matching(&mut run, started)?;
        Ok(run.matching.expect("matching stage sets the result"))
    }

    /// Re-runs matching, execution and the answer from a persisted run
    /// record (its `query` and `plan` fields).
    pub fn rerun(&self, record_json: &str) -> Result<PipelineRun, PipelineError> {
        #[derive(Deserialize)]
        struct Head {
            query: String,
            plan: Plan,
        }
        let head: Head = serde_json::from_str(record_json).map_err(|e| {
            let mut run = PipelineRun::new("");
            fail(&mut run, Stage::Analysis, FailureKind::InvalidInput, format!("unreadable run record: {e}"))
        })?;
        self.run_plan(&head.query, head.plan, true)
    }

    fn analysis(&self, run: &mut PipelineRun) -> Result<(), PipelineError> {
        let started = Instant::now();
        let finish = |run: &mut PipelineRun| run.stages.push(timing(Stage::Analysis, started));
        let prompt = match build_inference_prompt(&self.templates, &run.query, self.settings.enabled) {
            Ok(p) => p,
            Err(e) => {
                finish(run);
                return Err(fail(run, Stage::Analysis, FailureKind::InvalidInput, e.to_string()));
            }
        };
        run.prompt = Some(prompt.clone());
        let request = ChatRequest::user(PLANNER, prompt).with_temperature(self.settings.temperature);
        let reply = match self.gateway.complete(&request) {
            Ok(r) => r.content,
            Err(e) => {
                finish(run);
                return Err(fail(run, Stage::Analysis, FailureKind::Backend, e.to_string()));
            }
        };
        run.raw_plan = Some(reply.clone());
        let plan = match extract_plan(&reply) {
            Ok((_, p)) => p,
            Err(e) => {
                finish(run);
                return Err(fail(run, Stage::Analysis, FailureKind::PlanParseFailed, e.to_string()));
            }
        };
        let report = validate(&plan);
        run.plan = Some(plan);
        finish(run);
        accept_report(run, report.issues)
    }

    fn matching(&self, run: &mut PipelineRun, started: Instant) -> Result<(), PipelineError> {
        let plan = run.plan.as_ref().expect("analysis produced a plan");
        let result = match &self.settings.matching {
            Some(m) => {
                let opts = MatchOptions {
                    backend: m.backend.clone(),
                    chat_log: chat_log(&run.query, plan),
                    temperature: self.settings.temperature,
                    allow_fallback: m.allow_fallback,
                };
                match_llm(plan, &self.registry, &self.gateway, &opts)
            }
            None => match_all_fallback(plan, &self.registry),
        };
        run.stages.push(timing(Stage::Matching, started));
        match result {
            Ok(r) => {
                run.matching = Some(r);
                Ok(())
            }
            Err(e) => Err(fail(run, Stage::Matching, FailureKind::MatchFailed, e.to_string())),
        }
    }

    fn downstream(&self, run: &mut PipelineRun, respond: bool) -> Result<(), PipelineError> {
        self.matching(run, Instant::now())?;
        let started = Instant::now();
        let plan = run.plan.as_ref().expect("analysis produced a plan");
        let matched = run.matching.as_ref().expect("matching produced a result");
        let trace = match execute(plan, matched, &self.registry, &self.adapters, &self.settings.exec) {
            Ok(t) => t,
            Err(e) => {
                run.stages.push(timing(Stage::Generation, started));
                return Err(fail(run, Stage::Generation, FailureKind::ExecutionFailed, e.to_string()));
            }
        };
        if respond {
            match synthesize_response(&run.query, &trace, &self.gateway, self.settings.synthesis.as_ref()) {
                Ok(text) => run.response = Some(text),
                Err(e) => {
                    run.trace = Some(trace);
                    run.stages.push(timing(Stage::Generation, started));
                    return Err(fail(run, Stage::Generation, FailureKind::Backend, e.to_string()));
                }
            }
        }
        run.trace = Some(trace);
        run.stages.push(timing(Stage::Generation, started));
        Ok(())
    }
}

/// Keeps warnings on the run; violations end it.
fn accept_report(run: &mut PipelineRun, issues: Vec<ValidationIssue>) -> Result<(), PipelineError> {
    let (violations, warnings): (Vec<_>, Vec<_>) = issues.into_iter().partition(|i| i.severity == Severity::Violation);
    run.warnings = warnings;
    if violations.is_empty() {
        return Ok(());
    }
    let message = violations.iter().map(|v| v.message.clone()).collect::<Vec<_>>().join("; ");
    let mut err = fail(run, Stage::Analysis, FailureKind::PlanInvalid, message);
    err.failure.violations = violations;
    err.run.error = Some(err.failure.clone());
    Err(err)
}

fn timing(stage: Stage, started: Instant) -> StageTiming {
    StageTiming { stage, elapsed_ms: started.elapsed().as_secs_f64() * 1000.0 }
}

fn fail(run: &mut PipelineRun, stage: Stage, kind: FailureKind, message: String) -> PipelineError {
    let failure = StageFailure { stage, kind, message, violations: Vec::new() };
    run.error = Some(failure.clone());
    run.seal();
    PipelineError { failure, run: Box::new(run.clone()) }
}

/// Writes `run` to `<dir>/<run_id>.json`.
pub fn persist_run(dir: &Path, run: &PipelineRun) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", run.run_id));
    std::fs::write(&path, run.to_json_pretty())?;
    Ok(path)
}

#[derive(Debug, Error)]
pub enum PipelineBuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
    #[error(transparent)]
    Registry(#[from] crate::registry::RegistryError),
    #[error(transparent)]
    Fixtures(#[from] crate::adapters::FixtureError),
    #[error(transparent)]
    Replay(#[from] crate::gateway::ReplayStoreError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;
    use crate::golden::golden_item;

    fn pipeline_with(reply: &str) -> Pipeline {
        let mut p = Pipeline::from_config(&Config::default()).unwrap();
        let mut g = Gateway::default();
        g.register(PLANNER, ScriptedBackend::replies([reply.to_string()]));
        p.gateway = Arc::new(g);
        p.settings.matching = None;
        p
    }

    #[test]
    fn builtin_replay_is_fresh() {
        let expected = reference_replay(&PromptTemplates::builtin()).to_jsonl();
        if std::env::var_os("UPDATE_REPLAY").is_some() {
            std::fs::write(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/replay/planner.jsonl"), &expected).unwrap();
            return;
        }
        assert!(BUILTIN_REPLAY == expected, "assets/replay/planner.jsonl is stale; rerun with UPDATE_REPLAY=1");
    }

    #[test]
    fn builtin_replay_covers_reference_queries() {
        let p = Pipeline::from_config(&Config::default()).unwrap();
        let run = p.plan_query(&golden_item(1).query).unwrap();
        assert_eq!(run.plan.unwrap(), golden_item(1).plan());
    }

    #[test]
    fn empty_plan_keeps_raw_text() {
        let err = pipeline_with("[]").run_query("anything").unwrap_err();
        assert_eq!(err.kind(), FailureKind::PlanInvalid);
        assert!(err.failure.message.contains("plan must contain"));
        assert_eq!(err.run.raw_plan.as_deref(), Some("[]"));
    }

    #[test]
    fn unparseable_reply_is_a_parse_failure() {
        let err = pipeline_with("I cannot help with that.").run_query("q").unwrap_err();
        assert_eq!((err.stage(), err.kind()), (Stage::Analysis, FailureKind::PlanParseFailed));
    }

    #[test]
    fn full_run_records_stages_in_order() {
        let run = pipeline_with(&golden_item(5).answer).run_query(&golden_item(5).query).unwrap();
        let stages: Vec<Stage> = run.stages.iter().map(|s| s.stage).collect();
        assert_eq!(stages, vec![Stage::Analysis, Stage::Matching, Stage::Generation]);
        assert!(run.response.unwrap().contains("bus_arrival"));
    }

    #[test]
    fn rerun_from_record_reproduces_outputs() {
        let p = pipeline_with(&golden_item(1).answer);
        let run = p.run_query(&golden_item(1).query).unwrap();
        let again = p.rerun(&run.to_json_pretty()).unwrap();
        assert_eq!(again.response, run.response);
        assert_eq!(again.matching, run.matching);
        let outs = |r: &PipelineRun| serde_json::to_string(&r.trace.as_ref().unwrap().outputs()).unwrap();
        assert_eq!(outs(&again), outs(&run));
    }
}
