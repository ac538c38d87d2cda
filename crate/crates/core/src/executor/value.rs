use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, FixedOffset, SecondsFormat};
use serde::{Deserialize, Serialize};

use crate::plan::TimeSpec;

pub type Timestamp = DateTime<FixedOffset>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<Timestamp>,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { name: None, lat, lon, time: None }
    }

    pub fn named(name: impl Into<String>, lat: f64, lon: f64) -> Self {
        GeoPoint { name: Some(name.into()), lat, lon, time: None }
    }

    pub fn at(mut self, time: Timestamp) -> Self {
        self.time = Some(time);
        self
    }
}

/// Evenly spaced numeric series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub unit: String,
    pub start: Timestamp,
    pub step_secs: i64,
    pub values: Vec<f64>,
}

impl Series {
    pub fn timestamp(&self, i: usize) -> Timestamp {
        self.start + chrono::Duration::seconds(self.step_secs * i as i64)
    }

    pub fn end(&self) -> Option<Timestamp> {
        self.values.len().checked_sub(1).map(|i| self.timestamp(i))
    }
}

pub type Record = serde_json::Map<String, serde_json::Value>;

/// What an adapter hands back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputValue {
    Points { points: Vec<GeoPoint> },
    Text { text: String },
    Series(Series),
    Records { records: Vec<Record> },
    Verdict { value: bool, explanation: String },
}

pub fn fmt_time(t: &Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, false)
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        let s = format!("{x:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl OutputValue {
    /// First timestamp carried by the output, used when it feeds a `time`
    /// argument.
    pub fn primary_timestamp(&self) -> Option<Timestamp> {
        match self {
            OutputValue::Points { points } => points.iter().find_map(|p| p.time),
            OutputValue::Series(s) if !s.values.is_empty() => Some(s.start),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            OutputValue::Points { points } => points.is_empty(),
            OutputValue::Text { text } => text.is_empty(),
            OutputValue::Series(s) => s.values.is_empty(),
            OutputValue::Records { records } => records.is_empty(),
            OutputValue::Verdict { .. } => false,
        }
    }

    /// Deterministic plain-text rendering for prompts and summaries.
    pub fn render(&self) -> String {
        let mut out = String::new();
        match self {
            OutputValue::Points { points } => {
                let _ = write!(out, "{} location(s):", points.len());
                for p in points {
                    out.push_str("\n  - ");
                    if let Some(n) = &p.name {
                        let _ = write!(out, "{n} ");
                    }
                    let _ = write!(out, "({:.5}, {:.5})", p.lat, p.lon);
                    if let Some(t) = &p.time {
                        let _ = write!(out, " at {}", fmt_time(t));
                    }
                }
            }
            OutputValue::Text { text } => out.push_str(text),
            OutputValue::Series(s) => {
                let _ = write!(
                    out,
                    "{} [{}], {} value(s) every {} min from {}:",
                    s.label,
                    s.unit,
                    s.values.len(),
                    s.step_secs / 60,
                    s.start.format("%Y-%m-%d %H:%M")
                );
                for (i, v) in s.values.iter().enumerate() {
                    let _ = write!(out, "\n  {} {}", s.timestamp(i).format("%m-%d %H:%M"), fmt_num(*v));
                }
            }
            OutputValue::Records { records } => {
                let _ = write!(out, "{} record(s)", records.len());
                for r in records {
                    out.push_str("\n  - ");
                    let fields: Vec<String> = r.iter().map(|(k, v)| format!("{k}={}", render_json(v))).collect();
                    out.push_str(&fields.join(", "));
                }
            }
            OutputValue::Verdict { value, explanation } => {
                let _ = write!(out, "{}: {explanation}", if *value { "yes" } else { "no" });
            }
        }
        out
    }
}

fn render_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) => n.as_f64().map_or_else(|| n.to_string(), fmt_num),
        other => other.to_string(),
    }
}

/// An argument after `<resource>-k` substitution.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ResolvedArg {
    Text(String),
    Number(f64),
    TextList(Vec<String>),
    /// A time expression to be interpreted against the run clock.
    Time(TimeSpec),
    /// An absolute time taken from an upstream output.
    Timestamp(Timestamp),
    Output(OutputValue),
    List(Vec<ResolvedArg>),
}

impl ResolvedArg {
    /// Text values, flattening lists.
    pub fn texts(&self) -> Vec<String> {
        match self {
            ResolvedArg::Text(s) => vec![s.clone()],
            ResolvedArg::TextList(v) => v.clone(),
            ResolvedArg::Number(n) => vec![fmt_num(*n)],
            ResolvedArg::List(items) => items.iter().flat_map(ResolvedArg::texts).collect(),
            _ => Vec::new(),
        }
    }

    /// Points carried by the value, including nested outputs.
    pub fn points(&self) -> Vec<GeoPoint> {
        match self {
            ResolvedArg::Output(OutputValue::Points { points }) => points.clone(),
            ResolvedArg::List(items) => items.iter().flat_map(ResolvedArg::points).collect(),
            _ => Vec::new(),
        }
    }
}

pub type ResolvedArgs = BTreeMap<String, ResolvedArg>;
