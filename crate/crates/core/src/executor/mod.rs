//! Runs a matched plan against adapters and records an execution trace.
//!
//! Tasks run in dependency order over the effective graph. Each task's
//! `<resource>-k` arguments are replaced by upstream outputs before its
//! adapter is called; adapters never see the plan itself. A failed task
//! marks all of its transitive dependents as skipped while independent
//! branches keep running.

mod synth;
mod value;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{topo_order, ArgValue, Plan, TaskNode, TaskType, TimeSpec};
use crate::registry::{MatchResult, ModelCard, Registry};

pub use synth::{summarize, synthesize_response, SynthOptions, NO_RESULTS};
pub use value::{fmt_time, GeoPoint, OutputValue, Record, ResolvedArg, ResolvedArgs, Series, Timestamp};

/// Failure reported by an adapter.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdapterError {
    #[error("place not found: {0}")]
    NameNotFound(String),
    #[error("series has {len} point(s), need at least {need}")]
    SeriesTooShort { len: usize, need: usize },
    #[error("horizon of {steps} step(s) exceeds the limit of {max}")]
    HorizonExceedsGuard { steps: usize, max: usize },
    #[error("every value in the series is missing")]
    AllMissing,
    #[error("event history covers no time")]
    EmptyHistory,
    #[error("trajectory needs at least two fixes")]
    FewerThanTwoFixes,
    #[error("no departure time available")]
    MissingDeparture,
    #[error("fixture not available: {0}")]
    FixtureMissing(String),
    #[error("unknown bus stop {0}")]
    UnknownStop(String),
    #[error("bus service {service} does not call at stop {stop}")]
    UnknownService { stop: String, service: String },
    #[error("need at least two locations")]
    FewerThanTwoPoints,
    #[error("nothing matches category '{0}'")]
    NoMatch(String),
    #[error("missing argument '{0}'")]
    MissingArgument(String),
    #[error("argument '{name}': {reason}")]
    BadArgument { name: String, reason: String },
    #[error("adapter does not serve {0}")]
    Unsupported(TaskType),
    #[error("{0}")]
    Other(String),
}

/// Everything an adapter gets to see for one task.
#[derive(Debug, Clone, Copy)]
pub struct AdapterCall<'a> {
    pub task_id: u32,
    pub task: TaskType,
    pub model: &'a ModelCard,
    pub args: &'a ResolvedArgs,
    /// Reference "now" for relative and clock times.
    pub clock: Timestamp,
}

impl AdapterCall<'_> {
    pub fn arg(&self, name: &str) -> Option<&ResolvedArg> {
        self.args.get(name)
    }
}

pub trait Adapter: Send + Sync {
    fn invoke(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError>;
}

impl<F> Adapter for F
where
    F: Fn(&AdapterCall<'_>) -> Result<OutputValue, AdapterError> + Send + Sync,
{
    fn invoke(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        self(call)
    }
}

/// Adapters keyed by the scheme of a card's binding (`stub`, `builtin`, ...).
#[derive(Clone, Default)]
pub struct AdapterSet {
    by_scheme: BTreeMap<String, Arc<dyn Adapter>>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, scheme: impl Into<String>, adapter: impl Adapter + 'static) -> &mut Self {
        self.by_scheme.insert(scheme.into(), Arc::new(adapter));
        self
    }

    pub fn register_shared(&mut self, scheme: impl Into<String>, adapter: Arc<dyn Adapter>) -> &mut Self {
        self.by_scheme.insert(scheme.into(), adapter);
        self
    }

    pub fn get(&self, scheme: &str) -> Option<&Arc<dyn Adapter>> {
        self.by_scheme.get(scheme)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Serial,
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOptions {
    pub mode: ExecMode,
    /// Worker threads in parallel mode; `None` picks the widest level of
    /// the plan, capped at 8.
    pub workers: Option<usize>,
    pub clock: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskTrace {
    pub task_id: u32,
    pub task: TaskType,
    pub model_id: u32,
    pub model_name: String,
    pub status: TaskStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolved_args: Option<ResolvedArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
    /// Logical clock; every start and finish gets a distinct, increasing value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finish_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionTrace {
    pub mode: ExecMode,
    pub clock: String,
    pub topo_order: Vec<u32>,
    /// One entry per task, in `topo_order`.
    pub tasks: Vec<TaskTrace>,
    pub wall_time_ms: u64,
}

impl ExecutionTrace {
    pub fn task(&self, id: u32) -> Option<&TaskTrace> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    pub fn statuses(&self) -> BTreeMap<u32, TaskStatus> {
        self.tasks.iter().map(|t| (t.task_id, t.status)).collect()
    }

    pub fn outputs(&self) -> BTreeMap<u32, Option<&OutputValue>> {
        self.tasks.iter().map(|t| (t.task_id, t.output.as_ref())).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExecError {
    #[error("plan is not executable: {0}")]
    InvalidPlan(String),
    #[error("task {0} has no model assignment")]
    MissingAssignment(u32),
    #[error("task {task_id} is assigned unknown model {model_id}")]
    UnknownModel { task_id: u32, model_id: u32 },
    #[error("no adapter registered for binding '{binding}' (task {task_id})")]
    NoAdapter { task_id: u32, binding: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("<resource>-{0} has no successful output")]
    UnresolvedRef(u32),
    #[error("argument '{arg}' needs {expected}, got {found}")]
    TypeMismatch { arg: String, expected: &'static str, found: String },
}

fn shape(o: &OutputValue) -> String {
    match o {
        OutputValue::Points { .. } => "points",
        OutputValue::Text { .. } => "text",
        OutputValue::Series(_) => "series",
        OutputValue::Records { .. } => "records",
        OutputValue::Verdict { .. } => "verdict",
    }
    .to_string()
}

/// Replaces references in `task`'s arguments with upstream outputs.
///
/// `outputs` holds the outputs of tasks that finished successfully.
pub fn resolve_args(task: &TaskNode, outputs: &BTreeMap<u32, OutputValue>) -> Result<ResolvedArgs, ResolveError> {
    fn go(slot: &str, v: &ArgValue, outputs: &BTreeMap<u32, OutputValue>) -> Result<ResolvedArg, ResolveError> {
        Ok(match v {
            ArgValue::Text(s) => ResolvedArg::Text(s.clone()),
            ArgValue::Number(n) => ResolvedArg::Number(*n),
            ArgValue::TextList(l) => ResolvedArg::TextList(l.clone()),
            ArgValue::Ref(r) => {
                let out = outputs.get(&r.target).ok_or(ResolveError::UnresolvedRef(r.target))?;
                if slot == "location_gps_list" && !matches!(out, OutputValue::Points { .. }) {
                    return Err(ResolveError::TypeMismatch { arg: slot.into(), expected: "locations", found: shape(out) });
                }
                ResolvedArg::Output(out.clone())
            }
            ArgValue::Time(TimeSpec::Resource(r)) => {
                let out = outputs.get(&r.target).ok_or(ResolveError::UnresolvedRef(r.target))?;
                let ts = out.primary_timestamp().ok_or_else(|| ResolveError::TypeMismatch {
                    arg: slot.into(),
                    expected: "an output carrying a timestamp",
                    found: shape(out),
                })?;
                ResolvedArg::Timestamp(ts)
            }
            ArgValue::Time(t) => ResolvedArg::Time(*t),
            ArgValue::List(items) => ResolvedArg::List(items.iter().map(|i| go(slot, i, outputs)).collect::<Result<_, _>>()?),
        })
    }
    task.args.iter().map(|(k, v)| Ok((k.clone(), go(k, v, outputs)?))).collect()
}

fn now_rfc3339() -> String {
    fmt_time(&chrono::Utc::now().fixed_offset())
}

/// Widest depth level of the effective graph.
fn widest_level(plan: &Plan, order: &[u32]) -> usize {
    let deps = plan.effective_deps();
    let mut depth: BTreeMap<u32, usize> = BTreeMap::new();
    for id in order {
        let d = deps[id].iter().map(|p| depth[p] + 1).max().unwrap_or(0);
        depth.insert(*id, d);
    }
    let mut width: BTreeMap<usize, usize> = BTreeMap::new();
    for d in depth.values() {
        *width.entry(*d).or_default() += 1;
    }
    width.values().copied().max().unwrap_or(1)
}

struct Prepared<'a> {
    node: &'a TaskNode,
    card: &'a ModelCard,
    adapter: Arc<dyn Adapter>,
}

struct Outcome {
    result: Result<OutputValue, String>,
    started: String,
    finished: String,
    start_seq: u64,
    finish_seq: u64,
}

fn run_one(p: &Prepared<'_>, args: &ResolvedArgs, clock: Timestamp, seq: &AtomicU64) -> Outcome {
    let start_seq = seq.fetch_add(1, Ordering::SeqCst);
    let started = now_rfc3339();
    let call = AdapterCall { task_id: p.node.id, task: p.node.task, model: p.card, args, clock };
    let result = match catch_unwind(AssertUnwindSafe(|| p.adapter.invoke(&call))) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(format!(
            "adapter panicked: {}",
            panic.downcast_ref::<&str>().copied().or_else(|| panic.downcast_ref::<String>().map(String::as_str)).unwrap_or("?")
        )),
    };
    let finished = now_rfc3339();
    let finish_seq = seq.fetch_add(1, Ordering::SeqCst);
    Outcome { result, started, finished, start_seq, finish_seq }
}

/// Executes `plan` with the models in `assignments`.
pub fn execute(
    plan: &Plan,
    assignments: &MatchResult,
    registry: &Registry,
    adapters: &AdapterSet,
    opts: &ExecOptions,
) -> Result<ExecutionTrace, ExecError> {
    let report = crate::plan::validate(plan);
    if !report.is_ok() {
        let msgs: Vec<String> = report.violations().map(|v| v.message.clone()).collect();
        return Err(ExecError::InvalidPlan(msgs.join("; ")));
    }
    let order = topo_order(plan).map_err(|e| ExecError::InvalidPlan(e.to_string()))?;
    let mut prepared: BTreeMap<u32, Prepared<'_>> = BTreeMap::new();
    for node in &plan.tasks {
        let model_id = assignments.model_for(node.id).ok_or(ExecError::MissingAssignment(node.id))?;
        let card = registry.card(model_id).ok_or(ExecError::UnknownModel { task_id: node.id, model_id })?;
        let adapter = adapters
            .get(card.binding_scheme())
            .ok_or_else(|| ExecError::NoAdapter { task_id: node.id, binding: card.adapter_binding.clone() })?
            .clone();
        prepared.insert(node.id, Prepared { node, card, adapter });
    }
    let deps = plan.effective_deps();
    let started = Instant::now();
    let seq = AtomicU64::new(0);
    let mut traces: BTreeMap<u32, TaskTrace> = BTreeMap::new();
    let mut outputs: BTreeMap<u32, OutputValue> = BTreeMap::new();

    let blank = |p: &Prepared<'_>, status: TaskStatus| TaskTrace {
        task_id: p.node.id,
        task: p.node.task,
        model_id: p.card.model_id,
        model_name: p.card.model_name.clone(),
        status,
        resolved_args: None,
        output: None,
        error: None,
        started: None,
        finished: None,
        start_seq: None,
        finish_seq: None,
    };
    // Shared bookkeeping for both modes: a task whose dependencies are all
    // terminal is either skipped, fails argument resolution, or is runnable.
    enum Next {
        Done(TaskTrace),
        Run(ResolvedArgs),
    }
    let decide = |p: &Prepared<'_>, traces: &BTreeMap<u32, TaskTrace>, outputs: &BTreeMap<u32, OutputValue>| -> Next {
        let id = p.node.id;
        if let Some(bad) = deps[&id].iter().find(|d| traces[d].status != TaskStatus::Ok) {
            let mut t = blank(p, TaskStatus::Skipped);
            t.error = Some(format!("dependency {bad} did not succeed"));
            return Next::Done(t);
        }
        match resolve_args(p.node, outputs) {
            Ok(args) => Next::Run(args),
            Err(e) => {
                let mut t = blank(p, TaskStatus::Failed);
                let s = seq.fetch_add(2, Ordering::SeqCst);
                let now = now_rfc3339();
                t.started = Some(now.clone());
                t.finished = Some(now);
                t.start_seq = Some(s);
                t.finish_seq = Some(s + 1);
                t.error = Some(e.to_string());
                Next::Done(t)
            }
        }
    };
    let record = |p: &Prepared<'_>, args: ResolvedArgs, o: Outcome| -> TaskTrace {
        let mut t = blank(p, if o.result.is_ok() { TaskStatus::Ok } else { TaskStatus::Failed });
        t.resolved_args = Some(args);
        t.started = Some(o.started);
        t.finished = Some(o.finished);
        t.start_seq = Some(o.start_seq);
        t.finish_seq = Some(o.finish_seq);
        match o.result {
            Ok(v) => t.output = Some(v),
            Err(e) => t.error = Some(e),
        }
        t
    };

    match opts.mode {
        ExecMode::Serial => {
            for id in &order {
                let p = &prepared[id];
                let t = match decide(p, &traces, &outputs) {
                    Next::Done(t) => t,
                    Next::Run(args) => {
                        let o = run_one(p, &args, opts.clock, &seq);
                        record(p, args, o)
                    }
                };
                if let Some(out) = &t.output {
                    outputs.insert(*id, out.clone());
                }
                traces.insert(*id, t);
            }
        }
        ExecMode::Parallel => {
            let workers = opts.workers.unwrap_or_else(|| widest_level(plan, &order).min(8)).max(1);
            let dependents = plan.dependents();
            let mut waiting: BTreeMap<u32, usize> = deps.iter().map(|(id, d)| (*id, d.len())).collect();
            let (job_tx, job_rx) = crossbeam_channel::unbounded::<(u32, ResolvedArgs)>();
            let (done_tx, done_rx) = crossbeam_channel::unbounded::<(u32, ResolvedArgs, Outcome)>();
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    let job_rx = job_rx.clone();
                    let done_tx = done_tx.clone();
                    let prepared = &prepared;
                    let seq = &seq;
                    scope.spawn(move || {
                        for (id, args) in job_rx.iter() {
                            let o = run_one(&prepared[&id], &args, opts.clock, seq);
                            if done_tx.send((id, args, o)).is_err() {
                                break;
                            }
                        }
                    });
                }
                drop(done_tx);

                let mut ready: BTreeSet<u32> = waiting.iter().filter(|(_, n)| **n == 0).map(|(id, _)| *id).collect();
                let mut in_flight = 0usize;
                let mut settled: VecDeque<u32> = VecDeque::new();
                while traces.len() < prepared.len() {
                    // Decide every ready task, lowest id first; finished
                    // decisions release their dependents immediately.
                    while let Some(id) = ready.pop_first() {
                        let p = &prepared[&id];
                        match decide(p, &traces, &outputs) {
                            Next::Done(t) => {
                                traces.insert(id, t);
                                settled.push_back(id);
                            }
                            Next::Run(args) => {
                                in_flight += 1;
                                job_tx.send((id, args)).expect("workers alive");
                            }
                        }
                        while let Some(s) = settled.pop_front() {
                            for d in dependents.get(&s).into_iter().flatten() {
                                let w = waiting.get_mut(d).unwrap();
                                *w -= 1;
                                if *w == 0 {
                                    ready.insert(*d);
                                }
                            }
                        }
                    }
                    if in_flight == 0 {
                        break;
                    }
                    let (id, args, o) = done_rx.recv().expect("a worker reports back");
                    in_flight -= 1;
                    let t = record(&prepared[&id], args, o);
                    if let Some(out) = &t.output {
                        outputs.insert(id, out.clone());
                    }
                    traces.insert(id, t);
                    settled.push_back(id);
                    while let Some(s) = settled.pop_front() {
                        for d in dependents.get(&s).into_iter().flatten() {
                            let w = waiting.get_mut(d).unwrap();
                            *w -= 1;
                            if *w == 0 {
                                ready.insert(*d);
                            }
                        }
                    }
                }
                drop(job_tx);
            });
        }
    }

    let tasks = order.iter().map(|id| traces.remove(id).expect("every task is settled")).collect();
    Ok(ExecutionTrace {
        mode: opts.mode,
        clock: fmt_time(&opts.clock),
        topo_order: order,
        tasks,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}
