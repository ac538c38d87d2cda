//! Random generators and brute-force oracles for tests.
//!
//! Nothing here calls into the code paths it is used to check: the oracles
//! recompute metrics, isomorphism, distances and interpolation from first
//! principles.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::plan::{ArgValue, Plan, ResourceRef, TaskNode, TaskType, TimeSpec, TimeUnit, NO_DEP};

const TEXT_ALPHABET: &[char] = &[
    'a', 'b', 'z', 'Q', ' ', '_', '-', '.', '\'', '"', '\\', '/', ':', ',', '[', ']', '{', '}', '<', '>',
    '0', '7', 'é', '😀', '\n', '\t', '#', '@',
];

pub fn random_text(rng: &mut impl Rng) -> String {
    loop {
        let len = rng.random_range(0..12);
        let s: String = (0..len).map(|_| TEXT_ALPHABET[rng.random_range(0..TEXT_ALPHABET.len())]).collect();
        if ResourceRef::parse(&s).is_none() {
            return s;
        }
    }
}

pub fn random_number(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => f64::from(rng.random_range(-1000i32..1000)),
        1 => rng.random::<f64>() * 1.0e6 - 5.0e5,
        2 => f64::from(rng.random_range(0u8..20)) * 1.0e17,
        _ => f64::from(rng.random_range(1u16..500)) / 8.0,
    }
}

pub fn random_time(rng: &mut impl Rng, refs: &[u32]) -> TimeSpec {
    match rng.random_range(0..4) {
        0 => TimeSpec::Now,
        1 => TimeSpec::Relative {
            magnitude: rng.random_range(1..100),
            unit: [TimeUnit::Minute, TimeUnit::Hour, TimeUnit::Day, TimeUnit::Week][rng.random_range(0..4)],
        },
        2 => TimeSpec::Clock {
            hour: rng.random_range(1..=12),
            minute: [0, 15, 30][rng.random_range(0..3)],
            meridiem: if rng.random() { crate::plan::Meridiem::AM } else { crate::plan::Meridiem::PM },
        },
        _ if !refs.is_empty() => TimeSpec::Resource(ResourceRef::new(refs[rng.random_range(0..refs.len())])),
        _ => TimeSpec::Now,
    }
}

/// A value already in the form the parser produces (text-only lists are
/// `TextList`, mixed lists hold at least one non-text element).
pub fn random_value(rng: &mut impl Rng, refs: &[u32], depth: usize) -> ArgValue {
    let choice = rng.random_range(0..if depth > 1 { 4 } else { 5 });
    match choice {
        0 => ArgValue::Text(random_text(rng)),
        1 => ArgValue::Number(random_number(rng)),
        2 => ArgValue::TextList((0..rng.random_range(0..4)).map(|_| random_text(rng)).collect()),
        3 if !refs.is_empty() => ArgValue::Ref(ResourceRef::new(refs[rng.random_range(0..refs.len())])),
        3 => ArgValue::Number(random_number(rng)),
        _ => {
            let mut items: Vec<ArgValue> =
                (0..rng.random_range(0..4)).map(|_| random_value(rng, refs, depth + 1)).collect();
            items.push(ArgValue::Number(random_number(rng)));
            items.shuffle(rng);
            ArgValue::List(items)
        }
    }
}

const ARG_KEYS: &[&str] = &[
    "location_gps_list",
    "location_name_list",
    "input",
    "domain",
    "task_specific",
    "bus_stop",
    "service_no",
    "time",
    "extra_hint",
];

/// Random valid (acyclic, unique-id) plan with up to `max_tasks` tasks.
///
/// Ids are a random injection into `0..3n`; each task may declare deps on
/// earlier-created tasks and reference them (sometimes without declaring).
pub fn random_plan(rng: &mut impl Rng, max_tasks: usize) -> Plan {
    let n = rng.random_range(1..=max_tasks.max(1));
    let mut pool: Vec<u32> = (0..(3 * n as u32)).collect();
    pool.shuffle(rng);
    let ids: Vec<u32> = pool[..n].to_vec();
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let task = TaskType::ALL[rng.random_range(0..13)];
        let earlier = &ids[..i];
        let mut declared: Vec<u32> = earlier.iter().copied().filter(|_| rng.random_bool(0.35)).collect();
        declared.shuffle(rng);
        let mut refs: Vec<u32> = declared.clone();
        if let Some(extra) = earlier.iter().copied().find(|_| rng.random_bool(0.1)) {
            refs.push(extra);
        }
        let mut node = TaskNode::new(task, ids[i]);
        if !declared.is_empty() {
            node.dep = declared.iter().map(|&d| i64::from(d)).collect();
        }
        let n_args = rng.random_range(0..4);
        for _ in 0..n_args {
            let key = ARG_KEYS[rng.random_range(0..ARG_KEYS.len())];
            let value = if key == "time" {
                ArgValue::Time(random_time(rng, &refs))
            } else {
                random_value(rng, &refs, 0)
            };
            node.args.insert(key.to_string(), value);
        }
        // Make sure undeclared references actually appear somewhere.
        for r in &refs {
            if !node.ref_targets().contains(r) && !declared.contains(r) {
                node.args.insert("location_gps_list".into(), ArgValue::Ref(ResourceRef::new(*r)));
            }
        }
        tasks.push(node);
    }
    tasks.shuffle(rng);
    Plan::new(tasks)
}

/// Proptest strategy over [`random_plan`], shrinking toward smaller plans.
pub fn plan_strategy(max_tasks: usize) -> impl Strategy<Value = Plan> {
    (1..=max_tasks.max(1), any::<u64>()).prop_map(|(n, seed)| random_plan(&mut ChaCha8Rng::seed_from_u64(seed), n))
}

/// Random DAG of `1..=max_tasks` tasks with ids `0..n` and refs in
/// `location_gps_list` for every edge; task types are arbitrary.
pub fn random_dag(rng: &mut impl Rng, max_tasks: usize) -> Plan {
    let n = rng.random_range(1..=max_tasks.max(1)) as u32;
    let mut perm: Vec<u32> = (0..n).collect();
    perm.shuffle(rng);
    // perm[i] is the id of the i-th node in creation (topological) order.
    let mut tasks = Vec::new();
    for i in 0..n as usize {
        let parents: Vec<u32> = perm[..i].iter().copied().filter(|_| rng.random_bool(0.3)).collect();
        let (declared, referenced): (Vec<u32>, Vec<u32>) = parents.iter().partition(|_| rng.random_bool(0.6));
        let mut node = TaskNode::new(TaskType::ALL[rng.random_range(0..13)], perm[i]);
        if !declared.is_empty() {
            node.dep = declared.iter().map(|&d| i64::from(d)).collect();
        }
        if !referenced.is_empty() {
            node.args.insert(
                "input".into(),
                ArgValue::List(referenced.iter().map(|&r| ArgValue::Ref(ResourceRef::new(r))).collect()),
            );
        }
        tasks.push(node);
    }
    tasks.sort_by_key(|t| t.id);
    Plan::new(tasks)
}

const DANGLING_SHIFT: i64 = 100_000;

/// Applies an id bijection to a plan (deps and refs included) and shuffles
/// task order. Dangling entries are moved clear of the new id range so they
/// stay dangling.
pub fn permute_ids(plan: &Plan, rng: &mut impl Rng) -> Plan {
    let ids: Vec<u32> = plan.tasks.iter().map(|t| t.id).collect();
    let mut targets: Vec<u32> = (0..(ids.len() as u32 * 2 + 1)).collect();
    targets.shuffle(rng);
    let map: BTreeMap<u32, u32> = ids.iter().copied().zip(targets).collect();
    let mut tasks: Vec<TaskNode> = plan
        .tasks
        .iter()
        .map(|t| TaskNode {
            task: t.task,
            id: map[&t.id],
            dep: t
                .dep
                .iter()
                .map(|&d| if d == NO_DEP { d } else { u32::try_from(d).ok().and_then(|d| map.get(&d)).map_or(d + DANGLING_SHIFT, |&m| i64::from(m)) })
                .collect(),
            args: t.args.iter().map(|(k, v)| (k.clone(), v.map_refs(&|r| map.get(&r).copied().unwrap_or(r + DANGLING_SHIFT as u32)))).collect(),
        })
        .collect();
    tasks.shuffle(rng);
    Plan::new(tasks)
}

/// Precision/recall/F1 over task-type multisets by explicit pairing: each
/// predicted task claims one unclaimed gold task of the same type.
pub fn prf_oracle(predicted: &[TaskType], gold: &[TaskType]) -> (f64, f64, f64) {
    if predicted.is_empty() && gold.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if predicted.is_empty() || gold.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut claimed = vec![false; gold.len()];
    let mut tp = 0usize;
    for p in predicted {
        if let Some(slot) = (0..gold.len()).find(|&j| !claimed[j] && gold[j] == *p) {
            claimed[slot] = true;
            tp += 1;
        }
    }
    let precision = tp as f64 / predicted.len() as f64;
    let recall = tp as f64 / gold.len() as f64;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

/// Effective edges and labels, recomputed without `Plan::effective_deps`.
fn labeled_graph(plan: &Plan) -> (Vec<u32>, BTreeMap<u32, TaskType>, BTreeSet<(u32, u32)>) {
    let ids: Vec<u32> = plan.tasks.iter().map(|t| t.id).collect();
    let present: BTreeSet<u32> = ids.iter().copied().collect();
    let labels = plan.tasks.iter().map(|t| (t.id, t.task)).collect();
    let mut edges = BTreeSet::new();
    for t in &plan.tasks {
        for d in &t.dep {
            if let Ok(d) = u32::try_from(*d) {
                if present.contains(&d) {
                    edges.insert((d, t.id));
                }
            }
        }
        fn walk(v: &ArgValue, out: &mut Vec<u32>) {
            match v {
                ArgValue::Ref(r) | ArgValue::Time(TimeSpec::Resource(r)) => out.push(r.target),
                ArgValue::List(items) => items.iter().for_each(|i| walk(i, out)),
                _ => {}
            }
        }
        let mut refs = Vec::new();
        t.args.values().for_each(|v| walk(v, &mut refs));
        for r in refs {
            if present.contains(&r) {
                edges.insert((r, t.id));
            }
        }
    }
    (ids, labels, edges)
}

/// Exhaustive labeled-graph isomorphism over all id bijections. Intended for
/// plans of at most about eight tasks.
pub fn isomorphic_oracle(a: &Plan, b: &Plan) -> bool {
    let (ids_a, la, ea) = labeled_graph(a);
    let (ids_b, lb, eb) = labeled_graph(b);
    if ids_a.len() != ids_b.len() || ea.len() != eb.len() {
        return false;
    }
    let n = ids_a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let map: BTreeMap<u32, u32> = (0..n).map(|i| (ids_a[i], ids_b[perm[i]])).collect();
        let labels_ok = ids_a.iter().all(|id| la[id] == lb[&map[id]]);
        if labels_ok && ea.iter().all(|(x, y)| eb.contains(&(map[x], map[y]))) {
            return true;
        }
        // Lexicographic next permutation.
        let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else { return false };
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
        perm.swap(i - 1, j);
        perm[i..].reverse();
    }
}

/// True iff the effective graph has a directed cycle, by transitive closure.
pub fn has_cycle_oracle(plan: &Plan) -> bool {
    let (ids, _, edges) = labeled_graph(plan);
    let idx: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let n = ids.len();
    let mut reach = vec![vec![false; n]; n];
    for (x, y) in &edges {
        reach[idx[x]][idx[y]] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    (0..n).any(|i| reach[i][i])
}

/// Checks that `order` lists every task once and respects every effective edge.
pub fn is_topological_oracle(plan: &Plan, order: &[u32]) -> bool {
    let (ids, _, edges) = labeled_graph(plan);
    let pos: BTreeMap<u32, usize> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    pos.len() == ids.len()
        && order.len() == ids.len()
        && ids.iter().all(|id| pos.contains_key(id))
        && edges.iter().all(|(x, y)| pos[x] < pos[y])
}

/// Great-circle distance from the chord between unit vectors; numerically a
/// different route from the haversine formula.
pub fn chord_distance_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    const R: f64 = 6_371_000.0;
    let v = |(lat, lon): (f64, f64)| {
        let (la, lo) = (lat.to_radians(), lon.to_radians());
        (la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin())
    };
    let (x1, y1, z1) = v(a);
    let (x2, y2, z2) = v(b);
    let chord = ((x1 - x2).powi(2) + (y1 - y2).powi(2) + (z1 - z2).powi(2)).sqrt();
    2.0 * R * (chord / 2.0).min(1.0).asin()
}

/// Linear interpolation between known neighbors, scanning outward from each
/// gap; edges copy the nearest known value.
pub fn interpolation_oracle(values: &[Option<f64>]) -> Option<Vec<f64>> {
    if values.iter().all(Option::is_none) {
        return None;
    }
    Some(
        (0..values.len())
            .map(|i| {
                if let Some(v) = values[i] {
                    return v;
                }
                let left = (0..i).rev().find(|&j| values[j].is_some());
                let right = (i + 1..values.len()).find(|&j| values[j].is_some());
                match (left, right) {
                    (Some(l), Some(r)) => {
                        let (vl, vr) = (values[l].unwrap(), values[r].unwrap());
                        let w = (i - l) as f64 / (r - l) as f64;
                        vl * (1.0 - w) + vr * w
                    }
                    (Some(l), None) => values[l].unwrap(),
                    (None, Some(r)) => values[r].unwrap(),
                    (None, None) => unreachable!(),
                }
            })
            .collect(),
    )
}

/// Indices flagged by a trailing-window z-score (population std); a window
/// with zero spread flags any deviation.
pub fn zscore_flags_oracle(values: &[f64], window: usize, threshold: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for t in window..values.len() {
        let w = &values[t - window..t];
        let mean = w.iter().sum::<f64>() / window as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / window as f64;
        let std = var.sqrt();
        let flagged = if std == 0.0 { values[t] != mean } else { ((values[t] - mean) / std).abs() > threshold };
        if flagged {
            out.push(t);
        }
    }
    out
}

/// Random byte-level mutation of a plan text: deletions, duplications,
/// swaps and insertions of dialect punctuation.
pub fn mutate_text(text: &str, rng: &mut impl Rng) -> String {
    const NOISE: &[&str] = &["[", "]", "{", "}", ",", ":", "'", "\"", "\\", " ", "-1", "<resource>-", "\u{0}", "é", "9e9999", "time"];
    let mut chars: Vec<char> = text.chars().collect();
    for _ in 0..rng.random_range(1..6) {
        if chars.is_empty() {
            chars.extend(NOISE[rng.random_range(0..NOISE.len())].chars());
            continue;
        }
        let at = rng.random_range(0..chars.len());
        match rng.random_range(0..5) {
            0 => {
                chars.remove(at);
            }
            1 => {
                let end = (at + rng.random_range(1..8)).min(chars.len());
                chars.drain(at..end);
            }
            2 => {
                let end = (at + rng.random_range(1..20)).min(chars.len());
                let dup: Vec<char> = chars[at..end].to_vec();
                let to = rng.random_range(0..=chars.len());
                chars.splice(to..to, dup);
            }
            3 => {
                let other = rng.random_range(0..chars.len());
                chars.swap(at, other);
            }
            _ => {
                let noise = NOISE[rng.random_range(0..NOISE.len())];
                chars.splice(at..at, noise.chars());
            }
        }
    }
    chars.into_iter().collect()
}

/// Offline stand-in for a generating model: answers a corpus-generation
/// prompt with a renamed copy of its first example. Every seventh request
/// gets a reply with an unknown task type.
pub struct VariantBackend;

impl crate::gateway::ChatBackend for VariantBackend {
    fn call(&self, request: &crate::gateway::ChatRequest) -> Result<String, crate::gateway::CallError> {
        let prompt = &request.messages.last().expect("one message").content;
        let body = prompt.split("Example 1:").nth(1).unwrap_or("");
        let field = |name: &str| body.lines().find_map(|l| l.strip_prefix(name)).unwrap_or("").trim().to_string();
        let attempt: usize = prompt
            .split("This is request ")
            .nth(1)
            .and_then(|t| t.split(|c: char| !c.is_ascii_digit()).next())
            .and_then(|n| n.parse().ok())
            .unwrap_or(0);
        let query = field("Query:");
        if attempt % 7 == 3 {
            return Ok(format!("Query: {query} (draft {attempt})\nPlan: [{{task: teleportation, id: 0, dep: [-1]}}]"));
        }
        Ok(format!("Query: {query} (variant {attempt})\nPlan: {}", field("Plan:")))
    }
}

/// Replay store covering a [`crate::dataset::generate`] run with these
/// inputs, recorded from [`VariantBackend`].
pub fn forge_replay(
    seeds: &[crate::dataset::SeedExample],
    count: usize,
    opts: &crate::dataset::ForgeOptions,
) -> crate::gateway::ReplayStore {
    use crate::gateway::{Gateway, RecordingBackend};
    let recorder = std::sync::Arc::new(RecordingBackend::new(VariantBackend));
    let mut g = Gateway::default();
    g.register_shared(opts.backend.clone(), recorder.clone());
    crate::dataset::generate(seeds, count, &g, opts).expect("variant backend satisfies the quota");
    recorder.store()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_prf_example() {
        let p = [TaskType::TimeSeriesPrediction, TaskType::MapMapping];
        let g = [TaskType::TimeSeriesPrediction, TaskType::Recommendation];
        assert_eq!(prf_oracle(&p, &g), (0.5, 0.5, 0.5));
    }

    #[test]
    fn generated_plans_are_acyclic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!(!has_cycle_oracle(&random_plan(&mut rng, 8)));
            assert!(!has_cycle_oracle(&random_dag(&mut rng, 12)));
        }
    }
}
