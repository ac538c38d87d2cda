//! Evaluator, dataset forge and pipeline over files.

use std::fs;
use std::sync::Arc;

use serde_json::json;
use urbanplan::config::Config;
use urbanplan::dataset::{self, generate, split_and_stratify, ForgeOptions};
use urbanplan::evaluator::{evaluate, load_pairs, EvalError, Stratum};
use urbanplan::gateway::{Gateway, ReplayBackend};
use urbanplan::golden::{golden_corpus, golden_item};
use urbanplan::pipeline::{persist_run, FailureKind, Pipeline, Stage, CARPARK_QUERY};
use urbanplan::testkit::forge_replay;

fn write_lines(path: &std::path::Path, lines: impl IntoIterator<Item = String>) {
    fs::write(path, lines.into_iter().collect::<Vec<_>>().join("\n")).unwrap();
}

#[test]
fn eval_files_with_a_broken_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    let pred = dir.path().join("pred.jsonl");
    write_lines(&gold, golden_corpus().iter().map(|g| json!({ "query": g.query, "answer": g.answer }).to_string()));
    write_lines(
        &pred,
        golden_corpus().iter().map(|g| {
            let plan = if g.index == 3 { "[{task: oops".to_string() } else { urbanplan::serialize_strict(&g.plan()) };
            json!({ "query": g.query, "plan": plan }).to_string()
        }),
    );
    let report = evaluate(&load_pairs(&pred, &gold).unwrap(), false).unwrap();
    assert_eq!(report.overall.n, 34);
    assert_eq!(report.overall.accuracy, 33.0 / 34.0);
    let row = &report.examples[2];
    assert!(!row.parsed && row.parse_error.is_some());
    assert_eq!((row.precision, row.recall, row.f1), (0.0, 0.0, 0.0));
    let simple = report.strata[&Stratum::Simple].n;
    let complex = report.strata[&Stratum::Complex].n;
    assert_eq!(simple + complex, 34);
    assert_eq!(simple, golden_corpus().iter().filter(|g| g.plan().len() == 1).count());
}

#[test]
fn eval_rejects_mismatched_and_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.jsonl");
    let two = dir.path().join("two.jsonl");
    let empty = dir.path().join("empty.jsonl");
    let line = |i: usize| json!({ "query": golden_item(i).query, "plan": golden_item(i).answer }).to_string();
    write_lines(&one, [line(1)]);
    write_lines(&two, [line(1), line(2)]);
    fs::write(&empty, "").unwrap();
    assert!(matches!(load_pairs(&one, &two), Err(EvalError::LengthMismatch { gold: 2, pred: 1 })));
    assert!(matches!(evaluate(&load_pairs(&empty, &empty).unwrap(), false), Err(EvalError::EmptyDataset)));
}

#[test]
fn strict_args_separates_argument_changes() {
    let gold = golden_item(1).plan();
    let mut pred = gold.clone();
    pred.tasks[1].args.insert("location_name_list".into(), urbanplan::ArgValue::TextList(vec!["Bedok".into()]));
    let ex = vec![urbanplan::evaluator::EvalExample::new("q", gold, urbanplan::evaluator::Prediction::Parsed(pred))];
    assert_eq!(evaluate(&ex, false).unwrap().overall.accuracy, 1.0);
    assert_eq!(evaluate(&ex, true).unwrap().overall.accuracy, 0.0);
}

#[test]
fn forge_is_reproducible_and_parallel_safe() {
    let seeds = dataset::builtin_seeds();
    let opts = ForgeOptions { rng_seed: 5, ..ForgeOptions::default() };
    let store = forge_replay(&seeds, 30, &opts);
    let run = |parallelism: usize| {
        let mut g = Gateway::default();
        g.register("planner", ReplayBackend::new(store.clone()));
        generate(&seeds, 30, &g, &ForgeOptions { parallelism, ..opts.clone() }).unwrap()
    };
    let a = run(1);
    assert_eq!(dataset::to_jsonl(&a), dataset::to_jsonl(&run(1)));
    assert_eq!(dataset::to_jsonl(&a), dataset::to_jsonl(&run(4)));
    assert_eq!(a.iter().filter(|e| e.accepted()).count(), 30);
    let rejected: Vec<_> = a.iter().filter(|e| !e.accepted()).collect();
    assert!(!rejected.is_empty());
    assert!(rejected.iter().all(|e| e.raw.is_some() && e.provenance.rejection_reason.is_some()));

    let split = split_and_stratify(&a, 0.9, 5);
    assert_eq!(split.train.len() + split.eval.len(), 30);
    assert!(split.train.iter().chain(&split.eval).all(|e| e.accepted()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.jsonl");
    dataset::write_jsonl(&path, &a).unwrap();
    assert_eq!(dataset::load_examples(&path).unwrap(), a);
}

#[test]
fn seeds_file_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seeds.jsonl");
    write_lines(&path, [json!({ "query": "q", "plan": "[{task: map_mapping, id: 0, dep: [0]}]", "index": 1 }).to_string()]);
    assert!(matches!(dataset::load_seeds(&path), Err(dataset::ForgeError::BadLine { line: 1, .. })));
    write_lines(&path, [json!({ "query": "q", "plan": golden_item(4).answer, "index": 4 }).to_string()]);
    assert_eq!(dataset::load_seeds(&path).unwrap().len(), 1);
}

#[test]
fn persisted_run_reruns_to_the_same_answer() {
    let pipeline = Pipeline::from_config(&Config::default()).unwrap();
    let run = pipeline.run_query(CARPARK_QUERY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = persist_run(dir.path(), &run).unwrap();
    assert_eq!(path.file_name().unwrap().to_str().unwrap(), format!("{}.json", run.run_id));
    let again = pipeline.rerun(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(again.response, run.response);
    assert_eq!(again.run_id, run.run_id);
}

#[test]
fn pipeline_reports_the_failing_stage() {
    let mut pipeline = Pipeline::from_config(&Config::default()).unwrap();
    let err = pipeline.run_query("   ").unwrap_err();
    assert_eq!((err.stage(), err.kind()), (Stage::Analysis, FailureKind::InvalidInput));

    let err = pipeline.run_query("Where is the nearest unicorn?").unwrap_err();
    assert_eq!((err.stage(), err.kind()), (Stage::Analysis, FailureKind::Backend));

    pipeline.gateway = Arc::new(Gateway::default());
    pipeline.settings.matching = None;
    let plan = urbanplan::parse_relaxed("[{task: map_mapping, id: 0, dep: [-1], args: {location_name_list: ['Atlantis']}}]").unwrap();
    let run = pipeline.run_plan("q", plan, false).unwrap();
    let task = &run.trace.unwrap().tasks[0];
    assert_eq!(task.status, urbanplan::executor::TaskStatus::Failed);
}

#[test]
fn config_file_drives_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let replay = dir.path().join("extra.jsonl");
    let mut store = urbanplan::gateway::ReplayStore::default();
    let templates = urbanplan::prompt::PromptTemplates::builtin();
    let prompt = urbanplan::prompt::build_inference_prompt(&templates, "Custom question?", urbanplan::prompt::ComponentSet::all()).unwrap();
    store.insert_prompt(&prompt, "[{task: map_mapping, id: 0, dep: [-1], args: {location_name_list: ['Jurong East']}}]");
    store.save(&replay).unwrap();
    fs::write(
        dir.path().join("urbanllm.toml"),
        "[backend]\nreplay_files = [\"extra.jsonl\"]\n[execution]\nmode = \"parallel\"\n[matching]\nllm = false\n",
    )
    .unwrap();
    let cfg = Config::load(&dir.path().join("urbanllm.toml")).unwrap();
    let pipeline = Pipeline::from_config(&cfg).unwrap();
    let run = pipeline.run_query("Custom question?").unwrap();
    assert!(run.response.unwrap().contains("Jurong East"));
    assert_eq!(run.trace.unwrap().mode, urbanplan::executor::ExecMode::Parallel);
    assert!(pipeline.run_query(&golden_item(1).query).is_ok(), "built-in replies stay available");
}
