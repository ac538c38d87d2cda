//! Prompt construction for planning, model matching and answer synthesis.
//!
//! The planning prompt has up to three instruction components followed by
//! the query:
//!
//! * scenario formulation (SF): output format, argument vocabulary and the
//!   task table, generated from [`TaskType`];
//! * task understanding (TU): one explanation per task type;
//! * causal understanding (CU): how sub-tasks depend on each other.
//!
//! Component texts live in template files so that ablations are a pure
//! configuration change. Lines starting with `;;` in a template are comments.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{ExecutionTrace, TaskStatus};
use crate::plan::{Plan, TaskType};
use crate::registry::ModelCard;

pub const SF_FILE: &str = "scenario_formulation.txt";
pub const TU_FILE: &str = "task_understanding.txt";
pub const CU_FILE: &str = "causal_understanding.txt";

pub const SF_MARKER: &str = "### Scenario Formulation";
pub const TU_MARKER: &str = "### Task Understanding";
pub const CU_MARKER: &str = "### Causal Understanding";
pub const QUERY_MARKER: &str = "### Query";

const BUILTIN_SF: &str = include_str!("../assets/templates/scenario_formulation.txt");
const BUILTIN_TU: &str = include_str!("../assets/templates/task_understanding.txt");
const BUILTIN_CU: &str = include_str!("../assets/templates/causal_understanding.txt");

const ARG_DEFINITIONS: [(&str, &str); 8] = [
    ("location_gps_list", "coordinates of the places involved, usually \"<resource>-k\" from a map_mapping sub-task"),
    ("location_name_list", "list of place names or addresses to look up"),
    (
        "time",
        "when the answer is needed: 0 for now, a horizon such as 2h, 1d or 1w, a clock time such as 7PM, or \"<resource>-k\" for a time computed by another sub-task",
    ),
    ("input", "data the model consumes, such as history_steps or trajectory_records"),
    ("domain", "data domain, such as 'parking', 'traffic speed', 'precipitation', 'air', 'traffic accident' or 'user trajectory'"),
    ("task_specific", "extra detail for the task, such as a place category, a radius ('2km') or a time window ('next 30 mins')"),
    ("bus_stop", "bus stop code"),
    ("service_no", "bus service number"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Sf,
    Tu,
    Cu,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Sf, Component::Tu, Component::Cu];

    pub fn marker(self) -> &'static str {
        match self {
            Component::Sf => SF_MARKER,
            Component::Tu => TU_MARKER,
            Component::Cu => CU_MARKER,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Sf => "sf",
            Component::Tu => "tu",
            Component::Cu => "cu",
        })
    }
}

impl FromStr for Component {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sf" => Ok(Component::Sf),
            "tu" => Ok(Component::Tu),
            "cu" => Ok(Component::Cu),
            other => Err(PromptError::UnknownComponent(other.to_string())),
        }
    }
}

/// Which instruction components are rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentSet {
    pub sf: bool,
    pub tu: bool,
    pub cu: bool,
}

impl Default for ComponentSet {
    fn default() -> Self {
        ComponentSet::all()
    }
}

impl ComponentSet {
    pub fn all() -> Self {
        ComponentSet { sf: true, tu: true, cu: true }
    }

    pub fn none() -> Self {
        ComponentSet { sf: false, tu: false, cu: false }
    }

    pub fn contains(&self, c: Component) -> bool {
        match c {
            Component::Sf => self.sf,
            Component::Tu => self.tu,
            Component::Cu => self.cu,
        }
    }

    pub fn without(mut self, c: Component) -> Self {
        match c {
            Component::Sf => self.sf = false,
            Component::Tu => self.tu = false,
            Component::Cu => self.cu = false,
        }
        self
    }

    /// All components minus a comma-separated ablation list (`"sf,cu"`).
    pub fn ablating(list: &str) -> Result<Self, PromptError> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .try_fold(ComponentSet::all(), |set, s| Ok(set.without(s.parse()?)))
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("unknown prompt component '{0}' (expected sf, tu or cu)")]
    UnknownComponent(String),
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub(crate) fn strip_comments(text: &str) -> String {
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with(";;")).collect();
    kept.join("\n").trim().to_string()
}

/// Component corpora after comment stripping. The SF text still holds the
/// `{arg_schema}` and `{task_schema}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub scenario_formulation: String,
    pub task_understanding: String,
    pub causal_understanding: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self::from_texts(BUILTIN_SF, BUILTIN_TU, BUILTIN_CU)
    }

    pub fn from_texts(sf: &str, tu: &str, cu: &str) -> Self {
        PromptTemplates {
            scenario_formulation: strip_comments(sf),
            task_understanding: strip_comments(tu),
            causal_understanding: strip_comments(cu),
        }
    }

    /// Reads the three template files from `dir`.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| PromptError::Io { path: path.display().to_string(), source })
        };
        Ok(Self::from_texts(&read(SF_FILE)?, &read(TU_FILE)?, &read(CU_FILE)?))
    }
}

/// Argument vocabulary lines for the SF component.
pub fn arg_schema() -> String {
    ARG_DEFINITIONS.iter().map(|(k, d)| format!("- {k}: {d}")).collect::<Vec<_>>().join("\n")
}

/// Task table lines for the SF component, one per [`TaskType`].
pub fn task_schema() -> String {
    TaskType::ALL
        .iter()
        .map(|t| format!("{}. {} (args: {})", t.explanation_index(), t.name(), t.typical_args().join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The rendered pieces of one planning prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub scenario_formulation: String,
    pub task_understanding: String,
    pub causal_understanding: String,
    pub qa_query: String,
    pub enabled: ComponentSet,
}

impl PromptBundle {
    pub fn new(templates: &PromptTemplates, query: &str, enabled: ComponentSet) -> Self {
        PromptBundle {
            scenario_formulation: templates
                .scenario_formulation
                .replace("{arg_schema}", &arg_schema())
                .replace("{task_schema}", &task_schema()),
            task_understanding: templates.task_understanding.clone(),
            causal_understanding: templates.causal_understanding.clone(),
            qa_query: query.trim().to_string(),
            enabled,
        }
    }

    pub fn render(&self) -> String {
        let mut sections = Vec::new();
        for (c, text) in [
            (Component::Sf, &self.scenario_formulation),
            (Component::Tu, &self.task_understanding),
            (Component::Cu, &self.causal_understanding),
        ] {
            if self.enabled.contains(c) {
                sections.push(format!("{}\n{}", c.marker(), text));
            }
        }
        sections.push(format!(
            "{QUERY_MARKER}\n{}\n\nReply with the sub-task list only, as a JSON list of task objects.",
            self.qa_query
        ));
        sections.join("\n\n")
    }
}

/// Planning prompt for `query` with the given components.
pub fn build_inference_prompt(templates: &PromptTemplates, query: &str, enabled: ComponentSet) -> Result<String, PromptError> {
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    Ok(PromptBundle::new(templates, query, enabled).render())
}

/// Body of the section introduced by `marker`, if present.
pub fn extract_section<'a>(prompt: &'a str, marker: &str) -> Option<&'a str> {
    let start = prompt.find(&format!("{marker}\n"))? + marker.len() + 1;
    let rest = &prompt[start..];
    let end = [SF_MARKER, TU_MARKER, CU_MARKER, QUERY_MARKER]
        .iter()
        .filter_map(|m| rest.find(&format!("\n\n{m}\n")))
        .min()
        .unwrap_or(rest.len());
    Some(&rest[..end])
}

fn quote_single(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\'', "\\'")
}

/// One card in the model-description style used by the zoo documentation.
pub fn render_card(card: &ModelCard) -> String {
    format!(
        "{{'model id':{}, 'model name':'{}', 'data domain':'{}', 'description':'{}'}}",
        card.model_id,
        quote_single(&card.model_name),
        quote_single(&card.data_domain.join(", ")),
        quote_single(&card.description)
    )
}

/// Matching prompt: each sub-task with its candidate cards, asking for a
/// task-id to model-id JSON object.
pub fn build_matching_prompt(plan: &Plan, candidates: &BTreeMap<u32, Vec<&ModelCard>>, chat_log: &str) -> String {
    let mut out = String::from("### Model Matching\nConversation so far:\n");
    out.push_str(chat_log.trim());
    out.push_str("\n\nSub-tasks and candidate models:\n");
    for (id, cards) in candidates {
        let Some(task) = plan.task(*id) else { continue };
        let args = serde_json::Value::Object(task.args.iter().map(|(k, v)| (k.clone(), serde_json::to_value(v).unwrap())).collect());
        let _ = write!(out, "\nTask {id} ({}), args: {args}\n", task.task);
        for c in cards {
            out.push_str(&render_card(c));
            out.push('\n');
        }
    }
    out.push_str(
        "\nChoose the most suitable model for every sub-task. Reply with a JSON object mapping each task id to a model id, for example {\"0\": 2}.",
    );
    out
}

/// Synthesis prompt: the query and every task's output in execution order.
pub fn build_synthesis_prompt(query: &str, trace: &ExecutionTrace) -> String {
    let mut out = format!("### Response Generation\nUser query: {}\n\nResults of the executed sub-tasks, in execution order:\n", query.trim());
    for t in &trace.tasks {
        let _ = write!(out, "\n[Task {}] {} (model: {})\n", t.task_id, t.task, t.model_name);
        match (t.status, &t.output) {
            (TaskStatus::Ok, Some(o)) if !o.is_empty() => out.push_str(&o.render()),
            (TaskStatus::Ok, _) => out.push_str("no result"),
            (TaskStatus::Failed, _) => {
                let _ = write!(out, "no result (failed: {})", t.error.as_deref().unwrap_or("unknown error"));
            }
            (TaskStatus::Skipped, _) => {
                let _ = write!(out, "no result (skipped: {})", t.error.as_deref().unwrap_or("upstream failure"));
            }
        }
        out.push('\n');
    }
    out.push_str("\nUsing only these results, answer the user's query in a few sentences and say so when a result is missing.");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const Q: &str = "Where can I park near Jurong East at 7PM?";

    #[test]
    fn full_prompt_has_every_marker_in_order() {
        let p = build_inference_prompt(&PromptTemplates::builtin(), Q, ComponentSet::all()).unwrap();
        let pos: Vec<usize> = [SF_MARKER, TU_MARKER, CU_MARKER, QUERY_MARKER].iter().map(|m| p.find(m).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(p.contains(Q));
        assert!(!p.contains(";;"));
        assert!(!p.contains("{task_schema}"));
    }

    #[test]
    fn empty_set_leaves_only_the_query() {
        let p = build_inference_prompt(&PromptTemplates::builtin(), Q, ComponentSet::none()).unwrap();
        assert!(p.starts_with(QUERY_MARKER));
        for c in Component::ALL {
            assert!(!p.contains(c.marker()));
        }
    }

    #[test]
    fn schema_lists_every_task() {
        let s = task_schema();
        for t in TaskType::ALL {
            assert!(s.contains(t.name()));
        }
        assert_eq!(s.lines().count(), 13);
    }

    #[test]
    fn ablation_flags_parse() {
        assert_eq!(ComponentSet::ablating("").unwrap(), ComponentSet::all());
        assert_eq!(ComponentSet::ablating("sf, CU").unwrap(), ComponentSet { sf: false, tu: true, cu: false });
        assert!(ComponentSet::ablating("xx").is_err());
    }

    #[test]
    fn empty_query_is_rejected() {
        assert!(matches!(build_inference_prompt(&PromptTemplates::builtin(), "  ", ComponentSet::all()), Err(PromptError::EmptyQuery)));
    }

    #[test]
    fn sections_are_extractable() {
        let t = PromptTemplates::builtin();
        let p = build_inference_prompt(&t, Q, ComponentSet::all()).unwrap();
        assert_eq!(extract_section(&p, TU_MARKER), Some(t.task_understanding.as_str()));
        assert_eq!(extract_section(&p, CU_MARKER), Some(t.causal_understanding.as_str()));
    }
}
