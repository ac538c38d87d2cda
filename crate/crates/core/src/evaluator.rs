//! Scoring predicted plans against gold plans.
//!
//! Two per-example measures are averaged over a corpus:
//!
//! * precision, recall and F1 over the multiset of predicted versus gold
//!   task types;
//! * exact match: the canonical task-type-labeled dependency graphs agree
//!   (optionally with identical arguments too).
//!
//! Reports are split into `simple` (one gold task) and `complex` strata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{parse_relaxed, serialize_strict};
use crate::plan::{canonical_structure, canonicalize, Plan, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Simple,
    Complex,
}

impl Stratum {
    /// `Simple` iff the gold plan has exactly one task.
    pub fn of(gold: &Plan) -> Self {
        if gold.len() == 1 {
            Stratum::Simple
        } else {
            Stratum::Complex
        }
    }
}

/// A model's plan, or the reason it could not be read.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Parsed(Plan),
    ParseFailure(String),
}

impl Prediction {
    /// Parses relaxed plan text; failures are kept, not raised.
    pub fn from_text(text: &str) -> Self {
        match parse_relaxed(text) {
            Ok(p) => Prediction::Parsed(p),
            Err(e) => Prediction::ParseFailure(e.to_string()),
        }
    }

    pub fn plan(&self) -> Option<&Plan> {
        match self {
            Prediction::Parsed(p) => Some(p),
            Prediction::ParseFailure(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalExample {
    pub query: String,
    pub gold: Plan,
    pub predicted: Prediction,
    pub stratum: Stratum,
}

impl EvalExample {
    pub fn new(query: impl Into<String>, gold: Plan, predicted: Prediction) -> Self {
        let stratum = Stratum::of(&gold);
        EvalExample { query: query.into(), gold, predicted, stratum }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn multiset(types: &[TaskType]) -> BTreeMap<TaskType, usize> {
    let mut m = BTreeMap::new();
    for t in types {
        *m.entry(*t).or_insert(0) += 1;
    }
    m
}

/// Precision, recall and F1 of predicted against gold task-type multisets.
/// A missing prediction counts as the empty multiset.
pub fn example_prf(predicted: Option<&Plan>, gold: &Plan) -> Prf {
    let p = multiset(&predicted.map(Plan::task_types).unwrap_or_default());
    let g = multiset(&gold.task_types());
    let (np, ng) = (p.values().sum::<usize>(), g.values().sum::<usize>());
    if np == 0 && ng == 0 {
        return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    if np == 0 || ng == 0 {
        return Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let tp: usize = p.iter().map(|(t, c)| (*c).min(g.get(t).copied().unwrap_or(0))).sum();
    let precision = tp as f64 / np as f64;
    let recall = tp as f64 / ng as f64;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Prf { precision, recall, f1 }
}

/// Exact match of canonical labeled dependency graphs; with `strict_args`
/// the canonical strict serializations must be identical. Plans that cannot
/// be canonicalized never match.
pub fn example_accuracy(predicted: Option<&Plan>, gold: &Plan, strict_args: bool) -> bool {
    let Some(pred) = predicted else { return false };
    if strict_args {
        return match (canonicalize(pred), canonicalize(gold)) {
            (Ok(a), Ok(b)) => serialize_strict(&a) == serialize_strict(&b),
            _ => false,
        };
    }
    match (canonical_structure(pred), canonical_structure(gold)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleRow {
    pub index: usize,
    pub query: String,
    pub stratum: Stratum,
    pub parsed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact: bool,
}

/// Aggregate metrics over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl Metrics {
    fn over<'a>(rows: impl IntoIterator<Item = &'a ExampleRow>) -> Option<Metrics> {
        let (mut n, mut acc, mut p, mut r, mut f) = (0usize, 0.0, 0.0, 0.0, 0.0);
        for row in rows {
            n += 1;
            acc += f64::from(u8::from(row.exact));
            p += row.precision;
            r += row.recall;
            f += row.f1;
        }
        let d = n as f64;
        (n > 0).then(|| Metrics { n, accuracy: acc / d, macro_precision: p / d, macro_recall: r / d, macro_f1: f / d })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Metrics,
    pub strict_args: bool,
    /// Present only for strata with at least one example.
    pub strata: BTreeMap<Stratum, Metrics>,
    pub examples: Vec<ExampleRow>,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no examples to evaluate")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {reason}")]
    BadLine { path: String, line: usize, reason: String },
    #[error("gold has {gold} examples but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
}

fn score(i: usize, ex: &EvalExample, strict_args: bool) -> ExampleRow {
    let pred = ex.predicted.plan();
    let prf = example_prf(pred, &ex.gold);
    ExampleRow {
        index: i,
        query: ex.query.clone(),
        stratum: ex.stratum,
        parsed: pred.is_some(),
        parse_error: match &ex.predicted {
            Prediction::ParseFailure(e) => Some(e.clone()),
            Prediction::Parsed(_) => None,
        },
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        exact: example_accuracy(pred, &ex.gold, strict_args),
    }
}

/// Scores every example (in parallel) and aggregates.
pub fn evaluate(examples: &[EvalExample], strict_args: bool) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(examples.len());
    let chunk = examples.len().div_ceil(workers);
    let rows: Vec<ExampleRow> = std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || part.iter().enumerate().map(|(j, ex)| score(c * chunk + j, ex, strict_args)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("scoring does not panic")).collect()
    });
    let overall = Metrics::over(&rows).expect("non-empty");
    let strata = [Stratum::Simple, Stratum::Complex]
        .into_iter()
        .filter_map(|s| Metrics::over(rows.iter().filter(|r| r.stratum == s)).map(|m| (s, m)))
        .collect();
    Ok(EvalReport { overall, strict_args, strata, examples: rows })
}

/// One line of an evaluation file.
#[derive(Debug, Clone, Deserialize)]
struct Line {
    #[serde(default)]
    query: String,
    #[serde(alias = "answer")]
    plan: serde_json::Value,
}

fn plan_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    Ok(text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l.to_string())).collect())
}

/// Pairs gold and predicted JSONL files line by line. Each line is
/// `{"query", "plan"}` where `plan` is a JSON array or relaxed plan text.
/// A gold line that fails to parse is an error; a predicted one becomes a
/// [`Prediction::ParseFailure`].
pub fn load_pairs(pred_path: &Path, gold_path: &Path) -> Result<Vec<EvalExample>, EvalError> {
    let gold = read_lines(gold_path)?;
    let pred = read_lines(pred_path)?;
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    let bad = |path: &Path, line: usize, reason: String| EvalError::BadLine { path: path.display().to_string(), line, reason };
    gold.into_iter()
        .zip(pred)
        .map(|((gl, gtext), (_, ptext))| {
            let g: Line = serde_json::from_str(&gtext).map_err(|e| bad(gold_path, gl, e.to_string()))?;
            let gold_plan = parse_relaxed(&plan_text(&g.plan)).map_err(|e| bad(gold_path, gl, e.to_string()))?;
            let predicted = match serde_json::from_str::<Line>(&ptext) {
                Ok(p) => Prediction::from_text(&plan_text(&p.plan)),
                Err(e) => Prediction::ParseFailure(format!("malformed line: {e}")),
            };
            Ok(EvalExample::new(g.query, gold_plan, predicted))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::golden::{golden_corpus, golden_item};

    fn plan(text: &str) -> Plan {
        parse_relaxed(text).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let g = golden_item(1).plan();
        let prf = example_prf(Some(&g), &g);
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
        assert!(example_accuracy(Some(&g), &g, true));
    }

    #[test]
    fn half_overlap() {
        let p = plan("[{task: time_series_prediction, id: 0, dep: [1]}, {task: map_mapping, id: 1, dep: [-1]}]");
        let g = plan("[{task: time_series_prediction, id: 0, dep: [1]}, {task: recommendation, id: 1, dep: [-1]}]");
        let prf = example_prf(Some(&p), &g);
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.5, 0.5, 0.5));
        assert!(!example_accuracy(Some(&p), &g, false));
    }

    #[test]
    fn empty_conventions() {
        let g = golden_item(5).plan();
        let empty = Plan::default();
        assert_eq!(example_prf(None, &g).f1, 0.0);
        assert_eq!(example_prf(Some(&empty), &empty).f1, 1.0);
        assert!(!example_accuracy(None, &g, false));
    }

    #[test]
    fn items_one_and_three_differ() {
        assert!(!example_accuracy(Some(&golden_item(1).plan()), &golden_item(3).plan(), false));
    }

    #[test]
    fn strict_args_sees_argument_changes() {
        let g = golden_item(5).plan();
        let p = plan("[{task: bus_arrival, id: 0, dep: [-1], args: {bus_stop: '83139', service_no: 16, task_specific: 'next'}}]");
        assert!(example_accuracy(Some(&p), &g, false));
        assert!(!example_accuracy(Some(&p), &g, true));
    }

    #[test]
    fn report_strata_and_weighting() {
        let ex: Vec<EvalExample> = golden_corpus()
            .iter()
            .map(|it| EvalExample::new(it.query.clone(), it.plan(), Prediction::Parsed(it.plan())))
            .collect();
        let r = evaluate(&ex, false).unwrap();
        assert_eq!(r.overall.accuracy, 1.0);
        assert_eq!(r.overall.macro_f1, 1.0);
        let n: usize = r.strata.values().map(|m| m.n).sum();
        assert_eq!(n, 34);
        assert!(matches!(evaluate(&[], false), Err(EvalError::EmptyDataset)));
    }

    #[test]
    fn parse_failures_score_zero() {
        let ex = vec![EvalExample::new("q", golden_item(1).plan(), Prediction::from_text("not a plan"))];
        let r = evaluate(&ex, false).unwrap();
        assert_eq!(r.overall.macro_precision, 0.0);
        assert!(!r.examples[0].parsed);
    }
}
