//! Orchestration of spatio-temporal task plans.
//!
//! A natural-language urban query is turned into a plan DAG by a planning
//! model ([`prompt`], [`gateway`], [`parser`]), each sub-task is matched to a
//! model card ([`registry`]), the DAG is executed against adapters
//! ([`executor`], [`adapters`]) and the outputs are synthesized into an
//! answer. [`evaluator`] scores predicted plans against gold plans and
//! [`dataset`] grows training corpora from seed examples.

pub mod adapters;
pub mod config;
pub mod dataset;
pub mod evaluator;
pub mod executor;
pub mod gateway;
pub mod golden;
pub mod parser;
pub mod pipeline;
pub mod plan;
pub mod prompt;
pub mod registry;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use parser::{extract_plan_text, parse_relaxed, serialize_strict, ParseError};
pub use plan::{
    canonicalize, topo_order, validate, ArgValue, Plan, ResourceRef, TaskNode, TaskType, TimeSpec,
};
