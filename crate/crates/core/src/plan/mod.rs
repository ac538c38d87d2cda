//! In-memory task plans: the task taxonomy, argument values, and the plan DAG.
//!
//! A [`Plan`] is an ordered list of [`TaskNode`]s. Edges come from two places:
//! the declared `dep` list and any `<resource>-k` reference inside the
//! arguments. Execution honors the union of both ([`Plan::effective_deps`]).

mod canon;
mod graph;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use canon::{canonical_structure, canonicalize, CanonError};
pub use graph::{topo_order, CycleError};
pub use validate::{validate, IssueKind, Severity, ValidationIssue, ValidationReport};

/// Sentinel used in `dep` lists for "no dependency".
pub const NO_DEP: i64 = -1;

/// Argument names understood by the planner and the adapters.
pub const ARG_VOCABULARY: [&str; 8] = [
    "location_gps_list",
    "location_name_list",
    "time",
    "input",
    "domain",
    "task_specific",
    "bus_stop",
    "service_no",
];

/// One of the thirteen spatio-temporal sub-task categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskType {
    LongTimeSeriesPrediction,
    TimeSeriesPrediction,
    EventPrediction,
    TrajectoryCompletion,
    TrajectoryPrediction,
    TimeSeriesAnomalyDetection,
    TimeSeriesImputation,
    ArrivalTimeEstimation,
    TaxiAvailability,
    MapMapping,
    BusArrival,
    SpatialRelationshipInfer,
    Recommendation,
}

/// Spellings seen in model output that map onto a canonical name.
const TASK_ALIASES: &[(&str, TaskType)] = &[
    ("arrval_time_estimation", TaskType::ArrivalTimeEstimation),
    ("arrival_time_estimate", TaskType::ArrivalTimeEstimation),
    ("taxi_availability_prediction", TaskType::TaxiAvailability),
    ("spatial_relationship_inference", TaskType::SpatialRelationshipInfer),
    ("map_maping", TaskType::MapMapping),
];

impl TaskType {
    /// All task types, ordered by their taxonomy index.
    pub const ALL: [TaskType; 13] = [
        TaskType::LongTimeSeriesPrediction,
        TaskType::TimeSeriesPrediction,
        TaskType::EventPrediction,
        TaskType::TrajectoryCompletion,
        TaskType::TrajectoryPrediction,
        TaskType::TimeSeriesAnomalyDetection,
        TaskType::TimeSeriesImputation,
        TaskType::ArrivalTimeEstimation,
        TaskType::TaxiAvailability,
        TaskType::MapMapping,
        TaskType::BusArrival,
        TaskType::SpatialRelationshipInfer,
        TaskType::Recommendation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::LongTimeSeriesPrediction => "long_time_series_prediction",
            TaskType::TimeSeriesPrediction => "time_series_prediction",
            TaskType::EventPrediction => "event_prediction",
            TaskType::TrajectoryCompletion => "trajectory_completion",
            TaskType::TrajectoryPrediction => "trajectory_prediction",
            TaskType::TimeSeriesAnomalyDetection => "time_series_anomaly_detection",
            TaskType::TimeSeriesImputation => "time_series_imputation",
            TaskType::ArrivalTimeEstimation => "arrival_time_estimation",
            TaskType::TaxiAvailability => "taxi_availability",
            TaskType::MapMapping => "map_mapping",
            TaskType::BusArrival => "bus_arrival",
            TaskType::SpatialRelationshipInfer => "spatial_relationship_infer",
            TaskType::Recommendation => "recommendation",
        }
    }

    /// 1-based position in the task-understanding listing.
    pub fn explanation_index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).unwrap() + 1
    }

    /// Human-readable title used in prompts.
    pub fn title(self) -> &'static str {
        match self {
            TaskType::LongTimeSeriesPrediction => "Long Time Series Prediction",
            TaskType::TimeSeriesPrediction => "Time Series Prediction",
            TaskType::EventPrediction => "Event Prediction",
            TaskType::TrajectoryCompletion => "Trajectory Completion",
            TaskType::TrajectoryPrediction => "Trajectory Prediction",
            TaskType::TimeSeriesAnomalyDetection => "Time Series Anomaly Detection",
            TaskType::TimeSeriesImputation => "Time Series Imputation",
            TaskType::ArrivalTimeEstimation => "Arrival Time Estimation",
            TaskType::TaxiAvailability => "Taxi Availability Prediction",
            TaskType::MapMapping => "Map Mapping",
            TaskType::BusArrival => "Bus Arrival",
            TaskType::SpatialRelationshipInfer => "Spatial Relationship Inference",
            TaskType::Recommendation => "Recommendation",
        }
    }

    /// Arguments a task of this type usually takes.
    pub fn typical_args(self) -> &'static [&'static str] {
        use TaskType::*;
        match self {
            LongTimeSeriesPrediction | TimeSeriesPrediction | EventPrediction => {
                &["location_gps_list", "time", "input", "domain"]
            }
            TimeSeriesAnomalyDetection | TimeSeriesImputation => {
                &["location_gps_list", "input", "domain", "task_specific"]
            }
            TrajectoryCompletion => &["input", "domain"],
            TrajectoryPrediction => &["input", "time", "domain"],
            ArrivalTimeEstimation => &["location_gps_list", "time"],
            TaxiAvailability | Recommendation => &["location_gps_list", "task_specific"],
            MapMapping => &["location_name_list", "location_gps_list"],
            BusArrival => &["bus_stop", "service_no", "task_specific"],
            SpatialRelationshipInfer => &["location_gps_list"],
        }
    }

    /// Looks up a canonical name or a known alias.
    pub fn from_name(name: &str) -> Option<TaskType> {
        let trimmed = name.trim();
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == trimmed)
            .or_else(|| {
                TASK_ALIASES
                    .iter()
                    .find(|(alias, _)| *alias == trimmed)
                    .map(|(_, t)| *t)
            })
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown task type: {0}")]
pub struct UnknownTaskType(pub String);

impl FromStr for TaskType {
    type Err = UnknownTaskType;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::from_name(s).ok_or_else(|| UnknownTaskType(s.to_string()))
    }
}

impl Serialize for TaskType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TaskType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Binding of an argument to the output of task `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResourceRef {
    pub target: u32,
}

impl ResourceRef {
    pub fn new(target: u32) -> Self {
        Self { target }
    }

    /// Recognizes `<resource>-k` (surrounding whitespace tolerated).
    pub fn parse(text: &str) -> Option<ResourceRef> {
        let digits = text.trim().strip_prefix("<resource>-")?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok().map(ResourceRef::new)
    }
}

impl fmt::Display for ResourceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<resource>-{}", self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Minute,
    Hour,
    Day,
    Week,
}

impl TimeUnit {
    fn suffix(self) -> char {
        match self {
            TimeUnit::Minute => 'm',
            TimeUnit::Hour => 'h',
            TimeUnit::Day => 'd',
            TimeUnit::Week => 'w',
        }
    }

    pub fn minutes(self) -> i64 {
        match self {
            TimeUnit::Minute => 1,
            TimeUnit::Hour => 60,
            TimeUnit::Day => 24 * 60,
            TimeUnit::Week => 7 * 24 * 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Meridiem {
    AM,
    PM,
}

/// The `time` argument grammar: `0`, `2h`, `1w`, `7PM`, `<resource>-k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeSpec {
    Now,
    Relative { magnitude: u32, unit: TimeUnit },
    Clock { hour: u8, minute: u8, meridiem: Meridiem },
    Resource(ResourceRef),
}

impl TimeSpec {
    pub fn parse(text: &str) -> Option<TimeSpec> {
        let t = text.trim();
        if t == "0" {
            return Some(TimeSpec::Now);
        }
        if let Some(r) = ResourceRef::parse(t) {
            return Some(TimeSpec::Resource(r));
        }
        if t.len() >= 2 && t.is_ascii() {
            let (num, unit) = t.split_at(t.len() - 1);
            let unit = match unit {
                "m" => Some(TimeUnit::Minute),
                "h" | "H" => Some(TimeUnit::Hour),
                "d" | "D" => Some(TimeUnit::Day),
                "w" | "W" => Some(TimeUnit::Week),
                _ => None,
            };
            if let Some(unit) = unit {
                if num.bytes().all(|b| b.is_ascii_digit()) && num.len() <= 6 {
                    let magnitude: u32 = num.parse().ok()?;
                    if magnitude >= 1 {
                        return Some(TimeSpec::Relative { magnitude, unit });
                    }
                    return None;
                }
            }
        }
        parse_clock(t)
    }

    /// Duration in minutes for relative specs; `Now` is zero.
    pub fn relative_minutes(&self) -> Option<i64> {
        match self {
            TimeSpec::Now => Some(0),
            TimeSpec::Relative { magnitude, unit } => Some(i64::from(*magnitude) * unit.minutes()),
            _ => None,
        }
    }
}

fn parse_clock(t: &str) -> Option<TimeSpec> {
    if !t.is_ascii() || t.len() < 3 {
        return None;
    }
    let (body, mer) = t.split_at(t.len() - 2);
    let meridiem = match mer.to_ascii_uppercase().as_str() {
        "AM" => Meridiem::AM,
        "PM" => Meridiem::PM,
        _ => return None,
    };
    let (h, m) = match body.split_once(':') {
        Some((h, m)) => (h, Some(m)),
        None => (body, None),
    };
    if h.is_empty() || h.len() > 2 || !h.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let hour: u8 = h.parse().ok()?;
    if !(1..=12).contains(&hour) {
        return None;
    }
    let minute = match m {
        None => 0,
        Some(m) if m.len() == 2 && m.bytes().all(|b| b.is_ascii_digit()) => m.parse().ok()?,
        Some(_) => return None,
    };
    if minute > 59 {
        return None;
    }
    Some(TimeSpec::Clock { hour, minute, meridiem })
}

impl Serialize for TimeSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl fmt::Display for TimeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeSpec::Now => f.write_str("0"),
            TimeSpec::Relative { magnitude, unit } => write!(f, "{magnitude}{}", unit.suffix()),
            TimeSpec::Clock { hour, minute, meridiem } => {
                let mer = match meridiem {
                    Meridiem::AM => "AM",
                    Meridiem::PM => "PM",
                };
                if *minute == 0 {
                    write!(f, "{hour}{mer}")
                } else {
                    write!(f, "{hour}:{minute:02}{mer}")
                }
            }
            TimeSpec::Resource(r) => r.fmt(f),
        }
    }
}

/// A single argument value after parsing.
///
/// Lists made only of text are always [`ArgValue::TextList`]; [`ArgValue::List`]
/// is reserved for lists holding anything else.
#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    Text(String),
    Number(f64),
    TextList(Vec<String>),
    Ref(ResourceRef),
    Time(TimeSpec),
    List(Vec<ArgValue>),
}

impl ArgValue {
    /// Every resource reference reachable from this value, time refs included.
    pub fn refs(&self) -> Vec<ResourceRef> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs(&self, out: &mut Vec<ResourceRef>) {
        match self {
            ArgValue::Ref(r) | ArgValue::Time(TimeSpec::Resource(r)) => out.push(*r),
            ArgValue::List(items) => items.iter().for_each(|v| v.collect_refs(out)),
            _ => {}
        }
    }

    /// Rewrites every reference target through `f`.
    pub fn map_refs(&self, f: &impl Fn(u32) -> u32) -> ArgValue {
        match self {
            ArgValue::Ref(r) => ArgValue::Ref(ResourceRef::new(f(r.target))),
            ArgValue::Time(TimeSpec::Resource(r)) => {
                ArgValue::Time(TimeSpec::Resource(ResourceRef::new(f(r.target))))
            }
            ArgValue::List(items) => ArgValue::List(items.iter().map(|v| v.map_refs(f)).collect()),
            other => other.clone(),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ArgValue::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Text values, flattening single strings and text lists alike.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            ArgValue::Text(s) => vec![s.as_str()],
            ArgValue::TextList(items) => items.iter().map(String::as_str).collect(),
            ArgValue::List(items) => items.iter().flat_map(|v| v.texts()).collect(),
            _ => Vec::new(),
        }
    }

    pub(crate) fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            ArgValue::Text(s) => Value::String(s.clone()),
            ArgValue::Number(n) => number_to_json(*n),
            ArgValue::TextList(items) => Value::Array(items.iter().cloned().map(Value::String).collect()),
            ArgValue::Ref(r) => Value::String(r.to_string()),
            ArgValue::Time(t) => Value::String(t.to_string()),
            ArgValue::List(items) => Value::Array(items.iter().map(ArgValue::to_json).collect()),
        }
    }
}

/// Integral values within the exactly-representable range serialize as integers.
pub(crate) fn number_to_json(n: f64) -> serde_json::Value {
    if n.fract() == 0.0 && n.abs() < 9.0e15 {
        serde_json::Value::from(n as i64)
    } else {
        serde_json::Number::from_f64(n)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null)
    }
}

impl Serialize for ArgValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

/// One sub-task of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskNode {
    pub task: TaskType,
    pub id: u32,
    /// Declared dependencies; `[-1]` means none.
    pub dep: Vec<i64>,
    pub args: BTreeMap<String, ArgValue>,
}

impl TaskNode {
    pub fn new(task: TaskType, id: u32) -> Self {
        Self { task, id, dep: vec![NO_DEP], args: BTreeMap::new() }
    }

    pub fn with_dep(mut self, dep: Vec<i64>) -> Self {
        self.dep = dep;
        self
    }

    pub fn with_arg(mut self, key: impl Into<String>, value: ArgValue) -> Self {
        self.args.insert(key.into(), value);
        self
    }

    /// Declared dependency ids, `-1` removed.
    pub fn declared_deps(&self) -> impl Iterator<Item = i64> + '_ {
        self.dep.iter().copied().filter(|d| *d != NO_DEP)
    }

    /// Targets of all resource references in the arguments.
    pub fn ref_targets(&self) -> BTreeSet<u32> {
        self.args.values().flat_map(ArgValue::refs).map(|r| r.target).collect()
    }

    pub fn arg(&self, key: &str) -> Option<&ArgValue> {
        self.args.get(key)
    }

    pub(crate) fn to_json(&self) -> serde_json::Value {
        let args: serde_json::Map<String, serde_json::Value> =
            self.args.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
        let mut obj = serde_json::Map::new();
        obj.insert("task".into(), self.task.name().into());
        obj.insert("id".into(), self.id.into());
        obj.insert("dep".into(), self.dep.clone().into());
        obj.insert("args".into(), serde_json::Value::Object(args));
        serde_json::Value::Object(obj)
    }
}

/// A task plan: an ordered list of task nodes forming a DAG.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plan {
    pub tasks: Vec<TaskNode>,
}

impl Plan {
    pub fn new(tasks: Vec<TaskNode>) -> Self {
        Self { tasks }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: u32) -> Option<&TaskNode> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    /// Declared deps (minus `-1`) united with reference targets, restricted to
    /// ids present in the plan. Dangling declared deps are reported by
    /// [`validate`] and carry no edge.
    pub fn effective_deps(&self) -> BTreeMap<u32, BTreeSet<u32>> {
        let ids = self.ids();
        self.tasks
            .iter()
            .map(|t| {
                let mut deps: BTreeSet<u32> = t
                    .declared_deps()
                    .filter_map(|d| u32::try_from(d).ok())
                    .filter(|d| ids.contains(d))
                    .collect();
                deps.extend(t.ref_targets().into_iter().filter(|d| ids.contains(d)));
                (t.id, deps)
            })
            .collect()
    }

    /// Reverse adjacency of [`Plan::effective_deps`].
    pub fn dependents(&self) -> BTreeMap<u32, BTreeSet<u32>> {
        let mut out: BTreeMap<u32, BTreeSet<u32>> =
            self.tasks.iter().map(|t| (t.id, BTreeSet::new())).collect();
        for (id, deps) in self.effective_deps() {
            for d in deps {
                out.entry(d).or_default().insert(id);
            }
        }
        out
    }

    /// Multiset of task types, sorted.
    pub fn task_types(&self) -> Vec<TaskType> {
        let mut v: Vec<TaskType> = self.tasks.iter().map(|t| t.task).collect();
        v.sort();
        v
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(self.tasks.iter().map(TaskNode::to_json).collect())
    }
}

impl Serialize for Plan {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Plan {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        let text = match value {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        crate::parser::parse_relaxed(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_has_thirteen_distinct_names() {
        let names: BTreeSet<_> = TaskType::ALL.iter().map(|t| t.name()).collect();
        assert_eq!(names.len(), 13);
        for (i, t) in TaskType::ALL.iter().enumerate() {
            assert_eq!(t.explanation_index(), i + 1);
            assert_eq!(TaskType::from_name(t.name()), Some(*t));
        }
    }

    #[test]
    fn misspelled_arrival_is_an_alias() {
        assert_eq!(
            TaskType::from_name("arrval_time_estimation"),
            Some(TaskType::ArrivalTimeEstimation)
        );
        assert!(TaskType::from_name("image_captioning").is_none());
    }

    #[test]
    fn resource_ref_forms() {
        assert_eq!(ResourceRef::parse("<resource>-12"), Some(ResourceRef::new(12)));
        assert_eq!(ResourceRef::new(3).to_string(), "<resource>-3");
        assert_eq!(ResourceRef::parse("<resource>-"), None);
        assert_eq!(ResourceRef::parse("<resource>--1"), None);
        assert_eq!(ResourceRef::parse("resource-1"), None);
    }

    #[test]
    fn time_spec_grammar() {
        assert_eq!(TimeSpec::parse("0"), Some(TimeSpec::Now));
        assert_eq!(
            TimeSpec::parse("2h"),
            Some(TimeSpec::Relative { magnitude: 2, unit: TimeUnit::Hour })
        );
        assert_eq!(TimeSpec::parse("1w").unwrap().relative_minutes(), Some(7 * 24 * 60));
        assert_eq!(
            TimeSpec::parse("7PM"),
            Some(TimeSpec::Clock { hour: 7, minute: 0, meridiem: Meridiem::PM })
        );
        assert_eq!(TimeSpec::parse("5:30pm").unwrap().to_string(), "5:30PM");
        assert_eq!(
            TimeSpec::parse("<resource>-1"),
            Some(TimeSpec::Resource(ResourceRef::new(1)))
        );
        assert_eq!(TimeSpec::parse("0h"), None);
        assert_eq!(TimeSpec::parse("13PM"), None);
        assert_eq!(TimeSpec::parse("history_steps"), None);
        for s in ["0", "2h", "1w", "1d", "45m", "7PM", "12:05AM", "<resource>-4"] {
            assert_eq!(TimeSpec::parse(s).unwrap().to_string(), s);
        }
    }

    #[test]
    fn effective_deps_union_declared_and_refs() {
        let plan = Plan::new(vec![
            TaskNode::new(TaskType::TimeSeriesPrediction, 0)
                .with_dep(vec![1])
                .with_arg("location_gps_list", ArgValue::Ref(ResourceRef::new(2)))
                .with_arg("time", ArgValue::Time(TimeSpec::Resource(ResourceRef::new(1)))),
            TaskNode::new(TaskType::ArrivalTimeEstimation, 1).with_dep(vec![2]),
            TaskNode::new(TaskType::MapMapping, 2),
        ]);
        let eff = plan.effective_deps();
        assert_eq!(eff[&0], BTreeSet::from([1, 2]));
        assert_eq!(eff[&1], BTreeSet::from([2]));
        assert!(eff[&2].is_empty());
        assert_eq!(plan.dependents()[&2], BTreeSet::from([0, 1]));
    }
}
