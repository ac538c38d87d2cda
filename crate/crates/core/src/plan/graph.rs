use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::Plan;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("cycle among tasks {}", fmt_ids(.cycle))]
pub struct CycleError {
    /// Ids along one cycle, in dependency order.
    pub cycle: Vec<u32>,
}

fn fmt_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" -> ")
}

/// Dependency order over the effective graph; among ready tasks the lowest id
/// runs first.
pub fn topo_order(plan: &Plan) -> Result<Vec<u32>, CycleError> {
    kahn(&plan.effective_deps())
}

pub(crate) fn kahn(deps: &BTreeMap<u32, BTreeSet<u32>>) -> Result<Vec<u32>, CycleError> {
    let mut indegree: BTreeMap<u32, usize> = deps.iter().map(|(id, d)| (*id, d.len())).collect();
    let mut dependents: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (id, ds) in deps {
        for d in ds {
            dependents.entry(*d).or_default().push(*id);
        }
    }
    let mut ready: BTreeSet<u32> =
        indegree.iter().filter(|(_, n)| **n == 0).map(|(id, _)| *id).collect();
    let mut order = Vec::with_capacity(deps.len());
    while let Some(next) = ready.pop_first() {
        order.push(next);
        for child in dependents.get(&next).into_iter().flatten() {
            let n = indegree.get_mut(child).expect("dependent is a plan task");
            *n -= 1;
            if *n == 0 {
                ready.insert(*child);
            }
        }
    }
    if order.len() == deps.len() {
        return Ok(order);
    }
    let done: BTreeSet<u32> = order.into_iter().collect();
    Err(CycleError { cycle: find_cycle(deps, &done) })
}

/// Walks dependency edges from an unfinished node until a node repeats.
fn find_cycle(deps: &BTreeMap<u32, BTreeSet<u32>>, done: &BTreeSet<u32>) -> Vec<u32> {
    let start = *deps.keys().find(|id| !done.contains(id)).expect("some node is on a cycle");
    let mut path = vec![start];
    let mut seen = BTreeMap::from([(start, 0usize)]);
    let mut cur = start;
    loop {
        // Every unfinished node keeps at least one unfinished dependency.
        let next = *deps[&cur].iter().find(|d| !done.contains(d)).expect("unfinished dependency");
        if let Some(&pos) = seen.get(&next) {
            let mut cycle = path[pos..].to_vec();
            cycle.reverse();
            return cycle;
        }
        seen.insert(next, path.len());
        path.push(next);
        cur = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{TaskNode, TaskType};

    fn chain(edges: &[(u32, i64)], n: u32) -> Plan {
        Plan::new(
            (0..n)
                .map(|id| {
                    let deps: Vec<i64> =
                        edges.iter().filter(|(c, _)| *c == id).map(|(_, p)| *p).collect();
                    let t = TaskNode::new(TaskType::MapMapping, id);
                    if deps.is_empty() { t } else { t.with_dep(deps) }
                })
                .collect(),
        )
    }

    #[test]
    fn single_task() {
        assert_eq!(topo_order(&chain(&[], 1)).unwrap(), vec![0]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let plan = chain(&[(0, 3), (1, 3)], 4);
        assert_eq!(topo_order(&plan).unwrap(), vec![2, 3, 0, 1]);
    }

    #[test]
    fn two_cycle_is_named() {
        let err = topo_order(&chain(&[(0, 1), (1, 0)], 2)).unwrap_err();
        let mut ids = err.cycle.clone();
        ids.sort();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn cycle_report_excludes_downstream_nodes() {
        // 2 depends on the 0<->1 cycle but is not part of it.
        let err = topo_order(&chain(&[(0, 1), (1, 0), (2, 0)], 3)).unwrap_err();
        assert!(!err.cycle.contains(&2));
        assert_eq!(err.cycle.len(), 2);
    }
}
