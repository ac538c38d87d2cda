//! The model zoo: model cards, candidate filtering and sub-task matching.
//!
//! Matching first asks a planning model to pick a card per task
//! ([`match_llm`]); anything it gets wrong or leaves out is settled by the
//! deterministic domain-overlap rule in [`match_fallback`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::parser::{extract_object, RelaxedValue};
use crate::plan::{ArgValue, Plan, TaskNode, TaskType};
use crate::prompt;

/// The shipped registry.
pub const DEFAULT_ZOO: &str = include_str!("../assets/zoo.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelCard {
    pub model_id: u32,
    pub model_name: String,
    pub data_domain: Vec<String>,
    pub description: String,
    pub task_types: BTreeSet<TaskType>,
    /// `scheme:target`, e.g. `stub:time_series_prediction`.
    pub adapter_binding: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DomainField {
    Joined(String),
    List(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCard {
    #[serde(alias = "model id")]
    model_id: u32,
    #[serde(alias = "model name")]
    model_name: String,
    #[serde(alias = "data domain")]
    data_domain: DomainField,
    description: String,
    #[serde(default)]
    task_types: BTreeSet<TaskType>,
    #[serde(default)]
    adapter_binding: Option<String>,
}

impl<'de> Deserialize<'de> for ModelCard {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawCard::deserialize(d)?;
        let data_domain = match raw.data_domain {
            DomainField::Joined(s) => s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
            DomainField::List(v) => v,
        };
        let adapter_binding = raw.adapter_binding.unwrap_or_else(|| {
            raw.task_types.iter().next().map(|t| format!("stub:{t}")).unwrap_or_default()
        });
        Ok(ModelCard {
            model_id: raw.model_id,
            model_name: raw.model_name,
            data_domain,
            description: raw.description,
            task_types: raw.task_types,
            adapter_binding,
        })
    }
}

impl ModelCard {
    /// Scheme part of the adapter binding (text before the first `:`).
    pub fn binding_scheme(&self) -> &str {
        self.adapter_binding.split_once(':').map_or(self.adapter_binding.as_str(), |(s, _)| s)
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("reading registry {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("registry is not a JSON array of model cards: {0}")]
    Format(#[from] serde_json::Error),
    #[error("duplicate model id {0}")]
    DuplicateId(u32),
    #[error("model {0} lists no task types")]
    NoTaskTypes(u32),
    #[error("model id must be positive")]
    ZeroId,
}

/// Immutable set of model cards ordered by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Registry {
    cards: Vec<ModelCard>,
}

impl Registry {
    pub fn new(mut cards: Vec<ModelCard>) -> Result<Self, RegistryError> {
        cards.sort_by_key(|c| c.model_id);
        for pair in cards.windows(2) {
            if pair[0].model_id == pair[1].model_id {
                return Err(RegistryError::DuplicateId(pair[0].model_id));
            }
        }
        for c in &cards {
            if c.model_id == 0 {
                return Err(RegistryError::ZeroId);
            }
            if c.task_types.is_empty() {
                return Err(RegistryError::NoTaskTypes(c.model_id));
            }
        }
        Ok(Registry { cards })
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = fs::read_to_string(path)
            .map_err(|source| RegistryError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// The registry shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_ZOO).expect("shipped zoo.json is valid")
    }

    pub fn cards(&self) -> &[ModelCard] {
        &self.cards
    }

    pub fn card(&self, model_id: u32) -> Option<&ModelCard> {
        self.cards.binary_search_by_key(&model_id, |c| c.model_id).ok().map(|i| &self.cards[i])
    }

    /// Cards able to serve `task`, ordered by model id.
    pub fn candidates_for(&self, task: &TaskNode) -> Result<Vec<&ModelCard>, MatchError> {
        let found: Vec<&ModelCard> = self.cards.iter().filter(|c| c.task_types.contains(&task.task)).collect();
        if found.is_empty() {
            return Err(MatchError::NoCandidate { task_id: task.id, task: task.task });
        }
        Ok(found)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MatchError {
    #[error("no model in the registry serves task {task_id} ({task})")]
    NoCandidate { task_id: u32, task: TaskType },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Llm,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Assignment {
    pub model_id: u32,
    pub method: MatchMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub assignments: BTreeMap<u32, Assignment>,
    /// `Llm` only when every assignment came from the model reply.
    pub method: MatchMethod,
}

impl MatchResult {
    pub fn model_for(&self, task_id: u32) -> Option<u32> {
        self.assignments.get(&task_id).map(|a| a.model_id)
    }

    fn from_assignments(assignments: BTreeMap<u32, Assignment>) -> Self {
        let method = if !assignments.is_empty() && assignments.values().all(|a| a.method == MatchMethod::Llm) {
            MatchMethod::Llm
        } else {
            MatchMethod::Fallback
        };
        MatchResult { assignments, method }
    }
}

/// Query-side terms and the card-side phrases they also match.
const DOMAIN_SYNONYMS: &[(&str, &[&str])] = &[
    ("parking", &["carpark", "car park"]),
    ("carpark", &["parking", "car park"]),
    ("air", &["air quality", "pm2.5"]),
    ("precipitation", &["rainfall"]),
    ("rainfall", &["precipitation"]),
    ("traffic speed", &["road speed"]),
];

/// Domain tags requested by a task (`args.domain`, comma-separated).
pub fn domain_tags(task: &TaskNode) -> Vec<String> {
    let raw: Vec<&str> = match task.arg("domain") {
        Some(v @ (ArgValue::Text(_) | ArgValue::TextList(_))) => v.texts(),
        _ => Vec::new(),
    };
    raw.iter()
        .flat_map(|s| s.split(','))
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Number of the task's domain tags found in the card's data domain.
pub fn domain_score(task: &TaskNode, card: &ModelCard) -> usize {
    let haystack = card.data_domain.join(", ").to_lowercase();
    domain_tags(task)
        .iter()
        .filter(|tag| {
            let synonyms = DOMAIN_SYNONYMS.iter().filter(|(k, _)| k == tag).flat_map(|(_, s)| s.iter().copied());
            std::iter::once(tag.as_str()).chain(synonyms).any(|term| haystack.contains(term))
        })
        .count()
}

/// Highest domain score wins; ties go to the lowest model id.
///
/// # Panics
/// If `candidates` is empty.
pub fn match_fallback<'a>(task: &TaskNode, candidates: &[&'a ModelCard]) -> &'a ModelCard {
    let mut best = candidates[0];
    let mut best_score = domain_score(task, best);
    for &c in &candidates[1..] {
        let s = domain_score(task, c);
        if s > best_score || (s == best_score && c.model_id < best.model_id) {
            best = c;
            best_score = s;
        }
    }
    best
}

/// Assigns every task by the fallback rule alone.
pub fn match_all_fallback(plan: &Plan, registry: &Registry) -> Result<MatchResult, MatchError> {
    let mut assignments = BTreeMap::new();
    for t in &plan.tasks {
        let cands = registry.candidates_for(t)?;
        assignments.insert(t.id, Assignment { model_id: match_fallback(t, &cands).model_id, method: MatchMethod::Fallback });
    }
    Ok(MatchResult::from_assignments(assignments))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOptions {
    pub backend: String,
    /// Context shown to the model; by convention the query and the plan JSON.
    pub chat_log: String,
    pub temperature: f64,
    /// When false, gateway failures are returned instead of falling back.
    pub allow_fallback: bool,
}

/// Chat log used at matching time: the original query plus the plan as JSON.
pub fn chat_log(query: &str, plan: &Plan) -> String {
    format!("User query: {query}\nPlan: {}", crate::parser::serialize_strict(plan))
}

/// Parses a `{task-id: model-id}` mapping from a model reply. Entries that
/// are not integer pairs are dropped.
pub fn parse_match_reply(reply: &str) -> BTreeMap<u32, u32> {
    let Some(pairs) = extract_object(reply) else { return BTreeMap::new() };
    let mut out = BTreeMap::new();
    for (k, v) in pairs {
        let Ok(task_id) = k.trim().parse::<u32>() else { continue };
        let model = match &v.value {
            RelaxedValue::Number(n) if n.fract() == 0.0 && *n >= 0.0 && *n <= f64::from(u32::MAX) => Some(*n as u32),
            RelaxedValue::Str { text, .. } => text.trim().parse().ok(),
            _ => None,
        };
        if let Some(m) = model {
            out.insert(task_id, m);
        }
    }
    out
}

/// Asks the planning model to choose a card per task; invalid or missing
/// choices fall back per task.
pub fn match_llm(plan: &Plan, registry: &Registry, gateway: &Gateway, opts: &MatchOptions) -> Result<MatchResult, MatchError> {
    let mut candidates: BTreeMap<u32, Vec<&ModelCard>> = BTreeMap::new();
    for t in &plan.tasks {
        candidates.insert(t.id, registry.candidates_for(t)?);
    }
    let text = prompt::build_matching_prompt(plan, &candidates, &opts.chat_log);
    let request = ChatRequest::user(&opts.backend, text).with_temperature(opts.temperature);
    let chosen = match gateway.complete(&request) {
        Ok(resp) => parse_match_reply(&resp.content),
        Err(e) if opts.allow_fallback => {
            tracing::warn!("model matching fell back for all tasks: {e}");
            BTreeMap::new()
        }
        Err(e) => return Err(e.into()),
    };
    let mut assignments = BTreeMap::new();
    for t in &plan.tasks {
        let cands = &candidates[&t.id];
        let assignment = match chosen.get(&t.id) {
            Some(&m) if cands.iter().any(|c| c.model_id == m) => Assignment { model_id: m, method: MatchMethod::Llm },
            _ => Assignment { model_id: match_fallback(t, cands).model_id, method: MatchMethod::Fallback },
        };
        assignments.insert(t.id, assignment);
    }
    Ok(MatchResult::from_assignments(assignments))
}
