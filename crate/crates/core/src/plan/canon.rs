//! Canonical relabeling of plans.
//!
//! Ids are reassigned level by level (depth in the effective graph), ordered
//! by task type, then arguments with references rewritten to already-assigned
//! ids, then the rewritten dependency lists, then a digest of the downstream
//! structure. Nodes that still tie are either interchangeable (same parents
//! and same children) or are resolved by trying every arrangement and keeping
//! the smallest serialization, so isomorphic plans always meet.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::graph::{kahn, CycleError};
use super::{number_to_json, ArgValue, Plan, TaskNode, TimeSpec, NO_DEP};

/// Upper bound on explored tie arrangements; beyond it the first-found
/// (input-order) arrangement of the remaining ties is kept.
const MAX_ARRANGEMENTS: usize = 50_000;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CanonError {
    #[error("duplicate id: {0}")]
    DuplicateId(u32),
    #[error("task {task}: <resource>-{target} targets a missing task")]
    DanglingRef { task: u32, target: u32 },
    #[error(transparent)]
    Cycle(#[from] CycleError),
}

/// Relabels ids to `0..n` in a permutation-invariant order and rewrites deps
/// and references to match. Declared deps that name no task are dropped.
pub fn canonicalize(plan: &Plan) -> Result<Plan, CanonError> {
    Canonicalizer::new(plan)?.run()
}

/// Canonical form of the task-type-labeled effective dependency graph: args
/// removed, `dep` replaced by the effective dependency set.
pub fn canonical_structure(plan: &Plan) -> Result<Plan, CanonError> {
    let eff = plan.effective_deps();
    let skeleton = Plan::new(
        plan.tasks
            .iter()
            .map(|t| {
                let deps: Vec<i64> = eff
                    .get(&t.id)
                    .map(|d| d.iter().map(|&x| i64::from(x)).collect())
                    .unwrap_or_default();
                TaskNode::new(t.task, t.id).with_dep(if deps.is_empty() { vec![NO_DEP] } else { deps })
            })
            .collect(),
    );
    canonicalize(&skeleton)
}

struct Canonicalizer<'a> {
    nodes: BTreeMap<u32, &'a TaskNode>,
    declared: BTreeMap<u32, BTreeSet<u32>>,
    effective: BTreeMap<u32, BTreeSet<u32>>,
    levels: Vec<Vec<u32>>,
    down: BTreeMap<u32, String>,
    /// Per node, what each child looks like from this node's point of view.
    child_views: BTreeMap<u32, BTreeSet<(u32, String)>>,
}

#[derive(Default)]
struct Search {
    best: Option<(String, Plan)>,
    explored: usize,
}

impl<'a> Canonicalizer<'a> {
    fn new(plan: &'a Plan) -> Result<Self, CanonError> {
        let mut nodes = BTreeMap::new();
        for t in &plan.tasks {
            if nodes.insert(t.id, t).is_some() {
                return Err(CanonError::DuplicateId(t.id));
            }
        }
        for t in &plan.tasks {
            if let Some(target) = t.ref_targets().into_iter().find(|r| !nodes.contains_key(r)) {
                return Err(CanonError::DanglingRef { task: t.id, target });
            }
        }
        let effective = plan.effective_deps();
        let order = kahn(&effective)?;
        let declared: BTreeMap<u32, BTreeSet<u32>> = plan
            .tasks
            .iter()
            .map(|t| {
                let d = t
                    .declared_deps()
                    .filter_map(|d| u32::try_from(d).ok())
                    .filter(|d| nodes.contains_key(d))
                    .collect();
                (t.id, d)
            })
            .collect();

        let mut depth: BTreeMap<u32, usize> = BTreeMap::new();
        for id in &order {
            let d = effective[id].iter().map(|p| depth[p] + 1).max().unwrap_or(0);
            depth.insert(*id, d);
        }
        let max_depth = depth.values().copied().max().unwrap_or(0);
        let mut levels = vec![Vec::new(); if nodes.is_empty() { 0 } else { max_depth + 1 }];
        for (id, d) in &depth {
            levels[*d].push(*id);
        }

        let mut children: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (id, ds) in &effective {
            for d in ds {
                children.entry(*d).or_default().push(*id);
            }
        }
        let mut this = Self {
            nodes,
            declared,
            effective,
            levels,
            down: BTreeMap::new(),
            child_views: BTreeMap::new(),
        };
        for id in order.iter().rev() {
            let mut views = BTreeSet::new();
            let mut parts = Vec::new();
            for c in children.get(id).into_iter().flatten() {
                let view = this.edge_view(*c, *id);
                parts.push(format!("{}/{}", this.down[c], view));
                views.insert((*c, view));
            }
            parts.sort();
            let own = args_repr(&this.nodes[id].args, &|_| "<ref>".to_string());
            let digest = hex::encode(Sha256::digest(
                format!("{}\u{1}{}\u{1}{}", this.nodes[id].task.name(), own, parts.join("\u{2}"))
                    .as_bytes(),
            ));
            this.down.insert(*id, digest);
            this.child_views.insert(*id, views);
        }
        Ok(this)
    }

    /// How `child` uses `parent`: which argument slots point at it and whether
    /// the dependency is declared.
    fn edge_view(&self, child: u32, parent: u32) -> String {
        let marked = args_repr(&self.nodes[&child].args, &|t| {
            if t == parent { "<self>".into() } else { "<ref>".into() }
        });
        format!("{}|{}", self.declared[&child].contains(&parent), marked)
    }

    fn run(&self) -> Result<Plan, CanonError> {
        let mut search = Search::default();
        self.assign_level(0, &mut BTreeMap::new(), &mut search);
        Ok(search.best.map(|(_, p)| p).unwrap_or_default())
    }

    fn level_key(&self, id: u32, assigned: &BTreeMap<u32, u32>) -> String {
        let node = self.nodes[&id];
        let args = args_repr(&node.args, &|t| format!("<resource>-{}", assigned[&t]));
        let mapped = |set: &BTreeSet<u32>| {
            let mut v: Vec<u32> = set.iter().map(|d| assigned[d]).collect();
            v.sort_unstable();
            v
        };
        format!(
            "{}\u{1}{}\u{1}{:?}\u{1}{:?}\u{1}{}",
            node.task.name(),
            args,
            mapped(&self.declared[&id]),
            mapped(&self.effective[&id]),
            self.down[&id]
        )
    }

    fn assign_level(&self, level: usize, assigned: &mut BTreeMap<u32, u32>, search: &mut Search) {
        if search.explored >= MAX_ARRANGEMENTS && search.best.is_some() {
            return;
        }
        if level == self.levels.len() {
            search.explored += 1;
            let plan = self.build(assigned);
            let text = crate::parser::serialize_strict(&plan);
            if search.best.as_ref().is_none_or(|(best, _)| text < *best) {
                search.best = Some((text, plan));
            }
            return;
        }
        let mut keyed: Vec<(String, u32)> =
            self.levels[level].iter().map(|id| (self.level_key(*id, assigned), *id)).collect();
        keyed.sort();
        let mut groups: Vec<Vec<u32>> = Vec::new();
        let mut prev: Option<&str> = None;
        for (key, id) in &keyed {
            if prev == Some(key.as_str()) {
                groups.last_mut().unwrap().push(*id);
            } else {
                groups.push(vec![*id]);
            }
            prev = Some(key.as_str());
        }
        let base = assigned.values().map(|v| v + 1).max().unwrap_or(0);
        let arrangements: Vec<Vec<Vec<u32>>> = groups.iter().map(|g| self.arrangements(g)).collect();
        self.product(&arrangements, 0, base, level, assigned, search);
    }

    fn product(
        &self,
        arrangements: &[Vec<Vec<u32>>],
        group: usize,
        next_id: u32,
        level: usize,
        assigned: &mut BTreeMap<u32, u32>,
        search: &mut Search,
    ) {
        if group == arrangements.len() {
            self.assign_level(level + 1, assigned, search);
            return;
        }
        for order in &arrangements[group] {
            for (offset, id) in order.iter().enumerate() {
                assigned.insert(*id, next_id + offset as u32);
            }
            self.product(arrangements, group + 1, next_id + order.len() as u32, level, assigned, search);
            for id in order {
                assigned.remove(id);
            }
            if search.explored >= MAX_ARRANGEMENTS && search.best.is_some() {
                return;
            }
        }
    }

    /// Distinct orderings of a tie group, treating interchangeable nodes
    /// (identical child views) as indistinguishable.
    fn arrangements(&self, group: &[u32]) -> Vec<Vec<u32>> {
        if group.len() == 1 {
            return vec![group.to_vec()];
        }
        let mut classes: Vec<(&BTreeSet<(u32, String)>, Vec<u32>)> = Vec::new();
        for id in group {
            let views = &self.child_views[id];
            match classes.iter_mut().find(|(v, _)| *v == views) {
                Some((_, members)) => members.push(*id),
                None => classes.push((views, vec![*id])),
            }
        }
        let mut labels: Vec<usize> = classes
            .iter()
            .enumerate()
            .flat_map(|(i, (_, m))| std::iter::repeat_n(i, m.len()))
            .collect();
        let mut out = Vec::new();
        loop {
            let mut cursor = vec![0usize; classes.len()];
            out.push(
                labels
                    .iter()
                    .map(|&c| {
                        let id = classes[c].1[cursor[c]];
                        cursor[c] += 1;
                        id
                    })
                    .collect(),
            );
            if !next_permutation(&mut labels) {
                break;
            }
        }
        out
    }

    fn build(&self, assigned: &BTreeMap<u32, u32>) -> Plan {
        let mut tasks: Vec<TaskNode> = self
            .nodes
            .values()
            .map(|node| {
                let mut dep: Vec<i64> =
                    self.declared[&node.id].iter().map(|d| i64::from(assigned[d])).collect();
                dep.sort_unstable();
                if dep.is_empty() {
                    dep.push(NO_DEP);
                }
                TaskNode {
                    task: node.task,
                    id: assigned[&node.id],
                    dep,
                    args: node
                        .args
                        .iter()
                        .map(|(k, v)| (k.clone(), v.map_refs(&|t| assigned[&t])))
                        .collect(),
                }
            })
            .collect();
        tasks.sort_by_key(|t| t.id);
        Plan::new(tasks)
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn args_repr(args: &BTreeMap<String, ArgValue>, refs: &dyn Fn(u32) -> String) -> String {
    fn conv(v: &ArgValue, refs: &dyn Fn(u32) -> String) -> Value {
        match v {
            ArgValue::Ref(r) => Value::String(refs(r.target)),
            ArgValue::Time(TimeSpec::Resource(r)) => Value::String(format!("t:{}", refs(r.target))),
            ArgValue::Number(n) => number_to_json(*n),
            ArgValue::List(items) => Value::Array(items.iter().map(|i| conv(i, refs)).collect()),
            other => other.to_json(),
        }
    }
    let obj: serde_json::Map<String, Value> =
        args.iter().map(|(k, v)| (k.clone(), conv(v, refs))).collect();
    Value::Object(obj).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{ResourceRef, TaskType};

    #[test]
    fn depth_ordering_relabels_ids() {
        let plan = Plan::new(vec![
            TaskNode::new(TaskType::Recommendation, 3),
            TaskNode::new(TaskType::TimeSeriesPrediction, 7)
                .with_dep(vec![3])
                .with_arg("location_gps_list", ArgValue::Ref(ResourceRef::new(3))),
        ]);
        let c = canonicalize(&plan).unwrap();
        assert_eq!(c.tasks[0].task, TaskType::Recommendation);
        assert_eq!(c.tasks[0].id, 0);
        assert_eq!(c.tasks[1].id, 1);
        assert_eq!(c.tasks[1].dep, vec![0]);
        assert_eq!(c.tasks[1].args["location_gps_list"], ArgValue::Ref(ResourceRef::new(0)));
    }

    #[test]
    fn dangling_declared_dep_is_dropped() {
        let plan = Plan::new(vec![TaskNode::new(TaskType::EventPrediction, 0).with_dep(vec![1])]);
        let c = canonicalize(&plan).unwrap();
        assert_eq!(c.tasks[0].dep, vec![NO_DEP]);
    }

    #[test]
    fn cyclic_plan_is_rejected() {
        let plan = Plan::new(vec![
            TaskNode::new(TaskType::MapMapping, 0).with_dep(vec![1]),
            TaskNode::new(TaskType::MapMapping, 1).with_dep(vec![0]),
        ]);
        assert!(matches!(canonicalize(&plan), Err(CanonError::Cycle(_))));
    }

    #[test]
    fn mirrored_chains_meet() {
        // Two identical roots, each feeding a child with different args: the
        // roots tie on every local key and only their children tell them apart.
        let mk = |a: u32, b: u32, c: u32, d: u32| {
            Plan::new(vec![
                TaskNode::new(TaskType::MapMapping, a),
                TaskNode::new(TaskType::MapMapping, b),
                TaskNode::new(TaskType::Recommendation, c)
                    .with_dep(vec![a.into()])
                    .with_arg("task_specific", ArgValue::Text("gym".into())),
                TaskNode::new(TaskType::Recommendation, d)
                    .with_dep(vec![b.into()])
                    .with_arg("task_specific", ArgValue::Text("cafe".into())),
            ])
        };
        let x = canonicalize(&mk(0, 1, 2, 3)).unwrap();
        let y = canonicalize(&mk(1, 0, 3, 2)).unwrap();
        let z = canonicalize(&mk(3, 2, 1, 0)).unwrap();
        assert_eq!(x, y);
        assert_eq!(x, z);
    }

    #[test]
    fn multiset_permutations() {
        let mut v = vec![0, 0, 1];
        let mut all = vec![v.clone()];
        while next_permutation(&mut v) {
            all.push(v.clone());
        }
        assert_eq!(all, vec![vec![0, 0, 1], vec![0, 1, 0], vec![1, 0, 0]]);
    }
}
