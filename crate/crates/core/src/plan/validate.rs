use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::graph::kahn;
use super::{ArgValue, Plan, ARG_VOCABULARY, NO_DEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    EmptyPlan,
    DuplicateId,
    EmptyDep,
    MixedNoDep,
    InvalidDep,
    DanglingDep,
    DanglingRef,
    RefNotDeclared,
    UnknownArg,
    UnparsedTime,
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    pub kind: IssueKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_id: Option<u32>,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Violation => "violation",
        };
        write!(f, "{sev}: {}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations().next().is_none()
    }

    pub fn violations(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Violation)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }

    fn push(&mut self, severity: Severity, kind: IssueKind, task_id: Option<u32>, message: String) {
        self.issues.push(ValidationIssue { severity, kind, task_id, message });
    }
}

/// Checks the structural invariants of a plan. Violations and warnings are
/// returned as data; nothing here fails.
pub fn validate(plan: &Plan) -> ValidationReport {
    use IssueKind::*;
    use Severity::*;

    let mut report = ValidationReport::default();
    if plan.is_empty() {
        report.push(Violation, EmptyPlan, None, "plan must contain ≥ 1 task".into());
        return report;
    }

    let mut seen = BTreeSet::new();
    for t in &plan.tasks {
        if !seen.insert(t.id) {
            report.push(Violation, DuplicateId, Some(t.id), format!("duplicate id: {}", t.id));
        }
    }
    let ids = plan.ids();

    for t in &plan.tasks {
        let id = t.id;
        if t.dep.is_empty() {
            report.push(Violation, EmptyDep, Some(id), format!("task {id}: dep list is empty"));
        } else if t.dep.contains(&NO_DEP) && t.dep.len() > 1 {
            report.push(
                Violation,
                MixedNoDep,
                Some(id),
                format!("task {id}: dep mixes -1 with other entries {:?}", t.dep),
            );
        }
        let mut declared = BTreeSet::new();
        for d in t.declared_deps() {
            match u32::try_from(d) {
                Err(_) => report.push(
                    Violation,
                    InvalidDep,
                    Some(id),
                    format!("task {id}: invalid dep entry {d}"),
                ),
                Ok(d) if !ids.contains(&d) => report.push(
                    Warning,
                    DanglingDep,
                    Some(id),
                    format!("task {id}: declared dep {d} is not a task in the plan"),
                ),
                Ok(d) => {
                    declared.insert(d);
                }
            }
        }
        for target in t.ref_targets() {
            if !ids.contains(&target) {
                report.push(
                    Violation,
                    DanglingRef,
                    Some(id),
                    format!("task {id}: <resource>-{target} targets a missing task"),
                );
            } else if !declared.contains(&target) {
                report.push(
                    Warning,
                    RefNotDeclared,
                    Some(id),
                    format!("task {id}: references task {target} without declaring it in dep"),
                );
            }
        }
        for (key, value) in &t.args {
            if !ARG_VOCABULARY.contains(&key.as_str()) {
                report.push(
                    Warning,
                    UnknownArg,
                    Some(id),
                    format!("task {id}: unknown argument '{key}'"),
                );
            }
            if key == "time" && !matches!(value, ArgValue::Time(_)) {
                report.push(
                    Warning,
                    UnparsedTime,
                    Some(id),
                    format!("task {id}: time value is not a recognized time expression"),
                );
            }
        }
    }

    // Cycle detection needs unique ids to build the adjacency map.
    if report.has(DuplicateId) {
        return report;
    }
    let deps: BTreeMap<u32, BTreeSet<u32>> = plan.effective_deps();
    if let Err(e) = kahn(&deps) {
        report.push(Violation, Cycle, e.cycle.first().copied(), format!("cycle: {}", e));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{ResourceRef, TaskNode, TaskType};

    #[test]
    fn empty_plan_is_rejected() {
        let r = validate(&Plan::default());
        assert!(!r.is_ok());
        assert_eq!(r.issues[0].message, "plan must contain ≥ 1 task");
    }

    #[test]
    fn duplicate_ids() {
        let plan = Plan::new(vec![
            TaskNode::new(TaskType::MapMapping, 0),
            TaskNode::new(TaskType::Recommendation, 0),
        ]);
        let r = validate(&plan);
        assert!(!r.is_ok());
        assert!(r.violations().any(|v| v.message == "duplicate id: 0"));
    }

    #[test]
    fn mixed_no_dep_and_empty_dep() {
        let plan = Plan::new(vec![
            TaskNode::new(TaskType::MapMapping, 0).with_dep(vec![-1, 1]),
            TaskNode::new(TaskType::MapMapping, 1).with_dep(vec![]),
        ]);
        let r = validate(&plan);
        assert!(r.has(IssueKind::MixedNoDep));
        assert!(r.has(IssueKind::EmptyDep));
    }

    #[test]
    fn dangling_ref_is_a_violation_but_dangling_dep_a_warning() {
        let plan = Plan::new(vec![TaskNode::new(TaskType::EventPrediction, 0).with_dep(vec![1])]);
        let r = validate(&plan);
        assert!(r.is_ok());
        assert!(r.has(IssueKind::DanglingDep));

        let plan = Plan::new(vec![TaskNode::new(TaskType::Recommendation, 0)
            .with_arg("location_gps_list", ArgValue::Ref(ResourceRef::new(4)))]);
        let r = validate(&plan);
        assert!(!r.is_ok());
        assert!(r.has(IssueKind::DanglingRef));
    }

    #[test]
    fn self_reference_is_a_cycle() {
        let plan = Plan::new(vec![TaskNode::new(TaskType::MapMapping, 0).with_dep(vec![0])]);
        let r = validate(&plan);
        assert!(r.violations().any(|v| v.kind == IssueKind::Cycle));
    }

    #[test]
    fn unknown_argument_warns() {
        let plan = Plan::new(vec![TaskNode::new(TaskType::MapMapping, 0)
            .with_arg("radius", ArgValue::Number(5.0))]);
        let r = validate(&plan);
        assert!(r.is_ok());
        assert!(r.has(IssueKind::UnknownArg));
    }
}
