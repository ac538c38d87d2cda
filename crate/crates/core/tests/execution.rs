//! Executor behaviour over the golden corpus and random DAGs.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbanplan::executor::{execute, AdapterCall, AdapterError, AdapterSet, ExecMode, ExecOptions, OutputValue, TaskStatus, Timestamp};
use urbanplan::golden::golden_corpus;
use urbanplan::registry::{match_all_fallback, ModelCard, Registry};
use urbanplan::testkit::random_dag;
use urbanplan::{Plan, TaskType};

fn clock() -> Timestamp {
    chrono::DateTime::parse_from_rfc3339("2024-05-20T17:00:00+08:00").unwrap()
}

fn opts(mode: ExecMode, workers: Option<usize>) -> ExecOptions {
    ExecOptions { mode, workers, clock: clock() }
}

#[test]
fn golden_corpus_runs_on_stubs_identically_in_both_modes() {
    let registry = Registry::builtin();
    let adapters = AdapterSet::stubs();
    for item in golden_corpus() {
        let plan = item.plan();
        let matched = match_all_fallback(&plan, &registry).unwrap();
        let serial = execute(&plan, &matched, &registry, &adapters, &opts(ExecMode::Serial, None)).unwrap();
        let parallel = execute(&plan, &matched, &registry, &adapters, &opts(ExecMode::Parallel, Some(3))).unwrap();
        for t in &serial.tasks {
            assert_eq!(t.status, TaskStatus::Ok, "item {} task {}: {:?}", item.index, t.task_id, t.error);
        }
        assert_eq!(serial.outputs(), parallel.outputs(), "item {}", item.index);
        assert_eq!(serial.topo_order, parallel.topo_order);
    }
}

fn counting_registry() -> Registry {
    let cards = TaskType::ALL
        .iter()
        .enumerate()
        .map(|(i, t)| ModelCard {
            model_id: i as u32 + 1,
            model_name: t.name().into(),
            data_domain: vec!["test".into()],
            description: "test".into(),
            task_types: [*t].into_iter().collect(),
            adapter_binding: format!("probe:{}", t.name()),
        })
        .collect();
    Registry::new(cards).unwrap()
}

/// Records peak concurrency; fails map_mapping tasks.
struct Probe {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl urbanplan::executor::Adapter for Probe {
    fn invoke(&self, call: &AdapterCall<'_>) -> Result<OutputValue, AdapterError> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(std::time::Duration::from_millis(2));
        self.live.fetch_sub(1, Ordering::SeqCst);
        if call.task == TaskType::MapMapping {
            return Err(AdapterError::Other("probe failure".into()));
        }
        Ok(OutputValue::Text { text: format!("{}", call.task_id) })
    }
}

#[test]
fn failures_skip_exactly_the_downstream_closure() {
    let registry = counting_registry();
    let probe = Arc::new(Probe { live: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
    let mut adapters = AdapterSet::new();
    adapters.register_shared("probe", probe.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let plan = random_dag(&mut rng, 10);
        let matched = match_all_fallback(&plan, &registry).unwrap();
        let mode = if rng.random_bool(0.5) { ExecMode::Serial } else { ExecMode::Parallel };
        let trace = execute(&plan, &matched, &registry, &adapters, &opts(mode, Some(4))).unwrap();
        let failed: BTreeSet<u32> = plan.tasks.iter().filter(|t| t.task == TaskType::MapMapping).map(|t| t.id).collect();
        let downstream = closure(&plan, &failed);
        for t in &trace.tasks {
            let want = if downstream.contains(&t.task_id) {
                TaskStatus::Skipped
            } else if failed.contains(&t.task_id) {
                TaskStatus::Failed
            } else {
                TaskStatus::Ok
            };
            assert_eq!(t.status, want, "task {} in {}", t.task_id, urbanplan::serialize_strict(&plan));
        }
    }
    assert!(probe.peak.load(Ordering::SeqCst) <= 4);
}

/// Tasks with a failing or skipped task upstream.
fn closure(plan: &Plan, roots: &BTreeSet<u32>) -> BTreeSet<u32> {
    let deps = plan.effective_deps();
    let mut out = BTreeSet::new();
    loop {
        let before = out.len();
        for (id, ds) in &deps {
            if ds.iter().any(|d| roots.contains(d) || out.contains(d)) {
                out.insert(*id);
            }
        }
        if out.len() == before {
            return out;
        }
    }
}

#[test]
fn parallel_mode_overlaps_independent_tasks() {
    let registry = counting_registry();
    let probe = Arc::new(Probe { live: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
    let mut adapters = AdapterSet::new();
    adapters.register_shared("probe", probe.clone());
    let text = (0..6).map(|i| format!("{{task: recommendation, id: {i}, dep: [-1]}}")).collect::<Vec<_>>().join(", ");
    let plan = urbanplan::parse_relaxed(&format!("[{text}]")).unwrap();
    let matched = match_all_fallback(&plan, &registry).unwrap();
    execute(&plan, &matched, &registry, &adapters, &opts(ExecMode::Parallel, Some(3))).unwrap();
    assert!(probe.peak.load(Ordering::SeqCst) >= 2);
    assert!(probe.peak.load(Ordering::SeqCst) <= 3);
}
