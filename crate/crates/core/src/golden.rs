//! The 34 reference query/plan combinations shipped with the crate.
//!
//! Answers are stored exactly as printed in the relaxed dialect, including
//! their inconsistencies (misspelled task names, keys outside `args`, deps on
//! tasks that do not exist).

use std::sync::OnceLock;

use serde::Deserialize;

use crate::parser::{parse_relaxed, ParseError};
use crate::plan::Plan;

const GOLDEN_JSONL: &str = include_str!("../assets/golden.jsonl");

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenItem {
    /// 1-based combination index.
    pub index: usize,
    pub query: String,
    /// Relaxed plan text.
    pub answer: String,
}

impl GoldenItem {
    pub fn parse(&self) -> Result<Plan, ParseError> {
        parse_relaxed(&self.answer)
    }

    /// Parsed plan; the shipped corpus is known to parse.
    pub fn plan(&self) -> Plan {
        self.parse().expect("golden plans parse")
    }
}

pub fn golden_corpus() -> &'static [GoldenItem] {
    static CORPUS: OnceLock<Vec<GoldenItem>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        GOLDEN_JSONL
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("golden.jsonl is well-formed"))
            .collect()
    })
}

/// Item by 1-based combination index.
pub fn golden_item(index: usize) -> &'static GoldenItem {
    &golden_corpus()[index - 1]
}
