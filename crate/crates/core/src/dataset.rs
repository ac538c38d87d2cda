//! Growing a training corpus from seed examples.
//!
//! [`generate`] shows a chat backend a few sampled seeds and asks for one
//! new `Query:`/`Plan:` pair per request. Every candidate is parsed and
//! validated; rejected candidates are kept with the reason so the corpus can
//! be audited. [`split_and_stratify`] then divides accepted examples into
//! train and eval sets with per-stratum proportions.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::Stratum;
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::parser::{extract_plan, parse_relaxed, serialize_strict, ParseError};
use crate::plan::{validate, Plan};
use crate::prompt::{build_inference_prompt, strip_comments, task_schema, ComponentSet, PromptError, PromptTemplates};

const SELF_INSTRUCT_TEMPLATE: &str = include_str!("../assets/templates/self_instruct.txt");

/// Target corpus sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPreset {
    pub train: usize,
    pub eval: usize,
}

impl DatasetPreset {
    /// Training and evaluation sizes of the reference corpus.
    pub const REFERENCE: DatasetPreset = DatasetPreset { train: 15_294, eval: 1_694 };
    /// The training size quoted where the generation step is described,
    /// which disagrees with [`DatasetPreset::REFERENCE`] by 45 examples.
    pub const GENERATION_QUOTE: DatasetPreset = DatasetPreset { train: 15_249, eval: 1_694 };
}

impl Default for DatasetPreset {
    fn default() -> Self {
        DatasetPreset::REFERENCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedExample {
    pub query: String,
    #[serde(alias = "answer")]
    pub plan: Plan,
    #[serde(alias = "index")]
    pub combination_index: u32,
}

/// Why a generated candidate was not accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Rejection {
    MissingQuery,
    NoPlan,
    SyntaxError(String),
    UnknownTaskType(String),
    Invalid(Vec<String>),
    Duplicate,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::MissingQuery => f.write_str("reply has no 'Query:' line"),
            Rejection::NoPlan => f.write_str("reply has no plan"),
            Rejection::SyntaxError(e) => write!(f, "plan syntax: {e}"),
            Rejection::UnknownTaskType(t) => write!(f, "unknown task type '{t}'"),
            Rejection::Invalid(v) => write!(f, "invalid plan: {}", v.join("; ")),
            Rejection::Duplicate => f.write_str("duplicate query"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    /// sha256 over the combination indices and queries of the shown seeds.
    pub seed_digest: String,
    pub seeds: Vec<u32>,
    pub attempt: usize,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_reason: Option<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedExample {
    pub query: String,
    /// Parsed plan; `None` when the candidate was rejected before parsing.
    pub plan: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<Stratum>,
    /// Pattern of the seed the candidate imitates.
    pub combination_index: u32,
    /// Backend reply, kept for rejected candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    pub provenance: Provenance,
}

impl GeneratedExample {
    pub fn accepted(&self) -> bool {
        self.provenance.accepted
    }
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("no seed examples")]
    NoSeeds,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("only {accepted} of {target} examples accepted after {attempts} attempts")]
    QuotaExceeded { target: usize, accepted: usize, attempts: usize, examples: Vec<GeneratedExample> },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {reason}")]
    BadLine { path: String, line: usize, reason: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeOptions {
    pub backend: String,
    pub rng_seed: u64,
    /// Seeds shown per request; the first is the pattern to imitate.
    pub seeds_per_prompt: usize,
    pub temperature: f64,
    /// Attempts allowed per requested example.
    pub attempts_per_example: usize,
    /// Requests issued concurrently.
    pub parallelism: usize,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        ForgeOptions {
            backend: "planner".into(),
            rng_seed: 0,
            seeds_per_prompt: 3,
            temperature: 0.7,
            attempts_per_example: 5,
            parallelism: 1,
        }
    }
}

/// The 34 reference combinations as seeds.
pub fn builtin_seeds() -> Vec<SeedExample> {
    crate::golden::golden_corpus()
        .iter()
        .map(|g| SeedExample { query: g.query.clone(), plan: g.plan(), combination_index: g.index as u32 })
        .collect()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ForgeError> {
    let text = fs::read_to_string(path).map_err(|source| ForgeError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ForgeError::BadLine { path: path.display().to_string(), line: i + 1, reason: e.to_string() })
        })
        .collect()
}

/// Reads seeds (`{query, plan, combination_index}` per line); each seed
/// plan must validate.
pub fn load_seeds(path: &Path) -> Result<Vec<SeedExample>, ForgeError> {
    let seeds: Vec<SeedExample> = read_jsonl(path)?;
    for (i, s) in seeds.iter().enumerate() {
        let report = validate(&s.plan);
        if !report.is_ok() {
            let reason = report.violations().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            return Err(ForgeError::BadLine { path: path.display().to_string(), line: i + 1, reason });
        }
    }
    Ok(seeds)
}

pub fn load_examples(path: &Path) -> Result<Vec<GeneratedExample>, ForgeError> {
    read_jsonl(path)
}

/// One JSON object per line, newline terminated.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("examples serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ForgeError> {
    let io = |source| ForgeError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(to_jsonl(items).as_bytes()).map_err(io)
}

/// Prompt asking for one new example modelled on `shown[0]`.
pub fn generation_prompt(shown: &[&SeedExample], attempt: usize) -> String {
    let examples: Vec<String> = shown
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Example {}:\nQuery: {}\nPlan: {}", i + 1, s.query, serialize_strict(&s.plan)))
        .collect();
    strip_comments(SELF_INSTRUCT_TEMPLATE)
        .replace("{task_schema}", &task_schema())
        .replace("{examples}", &examples.join("\n\n"))
        .replace("{attempt}", &attempt.to_string())
}

fn seed_digest(shown: &[&SeedExample]) -> String {
    let mut h = Sha256::new();
    for s in shown {
        h.update(s.combination_index.to_le_bytes());
        h.update(s.query.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Splits a `Query:` / `Plan:` reply and checks the plan.
pub fn check_candidate(reply: &str) -> (String, Result<Plan, Rejection>) {
    let query = reply
        .lines()
        .find_map(|l| {
            let t = l.trim_start();
            t.get(..6).filter(|p| p.eq_ignore_ascii_case("query:")).map(|_| t[6..].trim().to_string())
        })
        .unwrap_or_default();
    if query.is_empty() {
        return (query, Err(Rejection::MissingQuery));
    }
    let after = reply.find("Plan:").map_or(reply, |i| &reply[i + 5..]);
    let plan = match parse_relaxed(after.trim()) {
        Ok(p) => p,
        Err(ParseError::UnknownTaskType { name, .. }) => return (query, Err(Rejection::UnknownTaskType(name))),
        Err(first) => match extract_plan(after) {
            Ok((_, p)) => p,
            Err(_) if !after.contains('[') => return (query, Err(Rejection::NoPlan)),
            Err(_) => return (query, Err(Rejection::SyntaxError(first.to_string()))),
        },
    };
    let report = validate(&plan);
    if !report.is_ok() {
        return (query, Err(Rejection::Invalid(report.violations().map(ToString::to_string).collect())));
    }
    (query, Ok(plan))
}

/// Generates `count` accepted examples, keeping rejected candidates too.
///
/// Request `a` shows the seeds drawn at position `a` of a ChaCha8 stream
/// seeded with `opts.rng_seed`, so runs are reproducible under a replay
/// backend. At most `attempts_per_example * count` requests are made.
pub fn generate(seeds: &[SeedExample], count: usize, gateway: &Gateway, opts: &ForgeOptions) -> Result<Vec<GeneratedExample>, ForgeError> {
    if seeds.is_empty() {
        return Err(ForgeError::NoSeeds);
    }
    let max_attempts = opts.attempts_per_example.max(1) * count;
    let k = opts.seeds_per_prompt.clamp(1, seeds.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut seen: BTreeSet<String> = seeds.iter().map(|s| s.query.trim().to_string()).collect();
    let mut out = Vec::new();
    let mut accepted = 0;
    let mut attempt = 0;
    let batch = opts.parallelism.max(1);

    while accepted < count && attempt < max_attempts {
        let n = batch.min(max_attempts - attempt);
        let jobs: Vec<(usize, Vec<&SeedExample>)> = (attempt..attempt + n)
            .map(|a| (a, rand::seq::index::sample(&mut rng, seeds.len(), k).into_iter().map(|i| &seeds[i]).collect()))
            .collect();
        let replies: Vec<Result<String, GatewayError>> = std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|(a, shown)| {
                    let req = ChatRequest::user(opts.backend.clone(), generation_prompt(shown, *a)).with_temperature(opts.temperature);
                    s.spawn(move || gateway.complete(&req).map(|r| r.content))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("gateway call does not panic")).collect()
        });
        for ((a, shown), reply) in jobs.iter().zip(replies) {
            if accepted == count {
                break;
            }
            let reply = reply?;
            let (query, checked) = check_candidate(&reply);
            let checked = checked.and_then(|p| if seen.contains(query.trim()) { Err(Rejection::Duplicate) } else { Ok(p) });
            let provenance = |accepted, rejection_reason| Provenance {
                backend: opts.backend.clone(),
                seed_digest: seed_digest(shown),
                seeds: shown.iter().map(|s| s.combination_index).collect(),
                attempt: *a,
                accepted,
                rejection_reason,
            };
            let combination_index = shown[0].combination_index;
            out.push(match checked {
                Ok(plan) => {
                    accepted += 1;
                    seen.insert(query.trim().to_string());
                    GeneratedExample {
                        stratum: Some(Stratum::of(&plan)),
                        query,
                        plan: Some(plan),
                        combination_index,
                        raw: None,
                        provenance: provenance(true, None),
                    }
                }
                Err(why) => GeneratedExample {
                    query,
                    plan: None,
                    stratum: None,
                    combination_index,
                    raw: Some(reply),
                    provenance: provenance(false, Some(why)),
                },
            });
        }
        attempt += n;
    }
    if accepted < count {
        return Err(ForgeError::QuotaExceeded { target: count, accepted, attempts: attempt, examples: out });
    }
    Ok(out)
}

/// Train and eval partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub eval: Vec<T>,
}

/// Shuffles each stratum with `rng_seed` and sends `round(ratio * n)` of
/// its members to train. Both partitions keep the input order.
pub fn split_by<T: Clone>(items: &[T], stratum: impl Fn(&T) -> Stratum, train_ratio: f64, rng_seed: u64) -> Split<T> {
    use rand::seq::SliceRandom;
    let ratio = train_ratio.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut to_train = vec![false; items.len()];
    for s in [Stratum::Simple, Stratum::Complex] {
        let mut idx: Vec<usize> = (0..items.len()).filter(|&i| stratum(&items[i]) == s).collect();
        idx.shuffle(&mut rng);
        let take = (ratio * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            to_train[i] = true;
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, it) in items.iter().enumerate() {
        if to_train[i] { &mut train } else { &mut eval }.push(it.clone());
    }
    Split { train, eval }
}

/// [`split_by`] over accepted examples; rejected ones are dropped.
pub fn split_and_stratify(examples: &[GeneratedExample], train_ratio: f64, rng_seed: u64) -> Split<GeneratedExample> {
    let accepted: Vec<GeneratedExample> = examples.iter().filter(|e| e.accepted() && e.plan.is_some()).cloned().collect();
    split_by(&accepted, |e| e.stratum.unwrap_or_else(|| Stratum::of(e.plan.as_ref().expect("accepted"))), train_ratio, rng_seed)
}

/// Instruction prompt and strict target text for fine-tuning.
pub fn instruction_pair(templates: &PromptTemplates, query: &str, plan: &Plan) -> Result<(String, String), PromptError> {
    Ok((build_inference_prompt(templates, query, ComponentSet::all())?, serialize_strict(plan)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ReplayBackend, ReplayStore, RetryPolicy, ScriptedBackend};

    fn gateway_with(replies: Vec<&str>) -> Gateway {
        let mut g = Gateway::new(RetryPolicy::default(), 4).with_sleeper(|_| {});
        g.register("planner", ScriptedBackend::replies(replies));
        g
    }

    const GOOD: &str = "Query: Is it going to rain at Jurong East in 3 hours?\nPlan: [{\"task\": \"time_series_prediction\", \"id\": 0, \"dep\": [1], \"args\": {\"location_gps_list\": \"<resource>-1\", \"time\": \"3h\", \"domain\": \"precipitation\"}}, {\"task\": \"map_mapping\", \"id\": 1, \"dep\": [-1], \"args\": {\"location_name_list\": [\"Jurong East\"]}}]";

    #[test]
    fn one_valid_reply_one_example() {
        let g = gateway_with(vec![GOOD]);
        let out = generate(&builtin_seeds(), 1, &g, &ForgeOptions::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].accepted());
        assert_eq!(out[0].stratum, Some(Stratum::Complex));
    }

    #[test]
    fn unknown_task_type_is_rejected_and_kept() {
        let bad = "Query: Teleport me home\nPlan: [{task: teleportation, id: 0, dep: [-1]}]";
        let g = gateway_with(vec![bad, GOOD]);
        let out = generate(&builtin_seeds(), 1, &g, &ForgeOptions::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].provenance.rejection_reason, Some(Rejection::UnknownTaskType("teleportation".into())));
        assert!(out[1].accepted());
    }

    #[test]
    fn duplicates_and_quota() {
        let seed_query = format!("Query: {}\nPlan: [{{task: bus_arrival, id: 0, dep: [-1]}}]", builtin_seeds()[0].query);
        let g = gateway_with(vec![&seed_query; 5]);
        match generate(&builtin_seeds(), 1, &g, &ForgeOptions::default()) {
            Err(ForgeError::QuotaExceeded { attempts: 5, examples, .. }) => {
                assert!(examples.iter().all(|e| e.provenance.rejection_reason == Some(Rejection::Duplicate)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_is_reproducible() {
        let seeds = builtin_seeds();
        let opts = ForgeOptions { rng_seed: 7, ..ForgeOptions::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ReplayStore::default();
        for a in 0..3 {
            let shown: Vec<&SeedExample> = rand::seq::index::sample(&mut rng, seeds.len(), 3).into_iter().map(|i| &seeds[i]).collect();
            let req = ChatRequest::user("planner", generation_prompt(&shown, a));
            store.insert(req.digest(), GOOD.replace("3 hours", &format!("{} hours", a + 3)));
        }
        let run = || {
            let mut g = Gateway::default();
            g.register("planner", ReplayBackend::new(store.clone()));
            to_jsonl(&generate(&seeds, 3, &g, &opts).unwrap())
        };
        assert_eq!(run(), run());
        let par = {
            let mut g = Gateway::default();
            g.register("planner", ReplayBackend::new(store.clone()));
            to_jsonl(&generate(&seeds, 3, &g, &ForgeOptions { parallelism: 3, ..opts.clone() }).unwrap())
        };
        assert_eq!(run(), par);
    }

    #[test]
    fn exact_split_proportions() {
        let items: Vec<(usize, Stratum)> = (0..10).map(|i| (i, if i < 5 { Stratum::Simple } else { Stratum::Complex })).collect();
        let s = split_by(&items, |x| x.1, 0.8, 1);
        assert_eq!(s.train.iter().filter(|x| x.1 == Stratum::Simple).count(), 4);
        assert_eq!(s.train.iter().filter(|x| x.1 == Stratum::Complex).count(), 4);
        assert_eq!(s.eval.len(), 2);
        assert_eq!(s, split_by(&items, |x| x.1, 0.8, 1));
    }

    #[test]
    fn generated_examples_round_trip() {
        let g = gateway_with(vec![GOOD]);
        let out = generate(&builtin_seeds(), 1, &g, &ForgeOptions::default()).unwrap();
        let line = to_jsonl(&out);
        let back: GeneratedExample = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, out[0]);
    }

    #[test]
    fn presets() {
        assert_eq!(DatasetPreset::default().train, 15_294);
        assert_eq!(DatasetPreset::GENERATION_QUOTE.train, 15_249);
    }
}
