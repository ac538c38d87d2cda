use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use urbanplan::golden::{golden_corpus, golden_item};
use urbanplan::pipeline::CARPARK_QUERY;

fn urbanplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urbanplan")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_gold(dir: &Path, name: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    let lines: Vec<String> = golden_corpus()
        .iter()
        .map(|g| serde_json::json!({ "query": g.query, "plan": g.answer }).to_string())
        .collect();
    fs::write(&path, lines.join("\n")).unwrap();
    path
}

#[test]
fn validate_golden_item_prints_ok() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.txt"), &golden_item(1).answer).unwrap();
    let out = urbanplan(dir.path(), &["validate", "p.txt"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "ok");
}

#[test]
fn validate_cycle_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.json"), "[{task: map_mapping, id: 0, dep: [1]}, {task: map_mapping, id: 1, dep: [0]}]").unwrap();
    let out = urbanplan(dir.path(), &["validate", "p.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("violation"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_two_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = urbanplan(dir.path(), &["eval", "--pred", "x.jsonl", "--gold", "y.jsonl", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--bogus"));
    let out = urbanplan(dir.path(), &["plan"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--query"));
}

#[test]
fn eval_gold_against_gold_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    write_gold(dir.path(), "gold.jsonl");
    let out = urbanplan(dir.path(), &["eval", "--pred", "gold.jsonl", "--gold", "gold.jsonl", "--strict-args", "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    for key in ["accuracy", "macro_precision", "macro_recall", "macro_f1"] {
        assert_eq!(report[key], 1.0, "{key}");
    }
    assert_eq!(report["n"], 34);
    assert_eq!(report["strict_args"], true);
}

#[test]
fn plan_then_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let item = golden_item(5);
    let out = urbanplan(dir.path(), &["plan", "--query", &item.query, "--out", "plan.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let written = fs::read_to_string(dir.path().join("plan.json")).unwrap();
    assert_eq!(written.trim(), urbanplan::serialize_strict(&item.plan()));

    let out = urbanplan(dir.path(), &["run", "plan.json", "--parallel", "--trace", "trace.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let trace: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["mode"], "parallel");
    assert!(trace["tasks"].as_array().unwrap().iter().all(|t| t["status"] == "ok"));
}

#[test]
fn match_uses_the_given_registry() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.json"), "[{task: map_mapping, id: 0, dep: [-1], args: {location_name_list: ['Jurong East']}}]").unwrap();
    let zoo = r#"[{"model_id": 77, "model_name": "OnlyGeo", "data_domain": ["places"], "description": "d",
                   "task_types": ["map_mapping"], "adapter_binding": "stub:map_mapping"}]"#;
    fs::write(dir.path().join("zoo.json"), zoo).unwrap();
    let out = urbanplan(dir.path(), &["match", "p.json", "--registry", "zoo.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let m: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(m["assignments"]["0"]["model_id"], 77);
}

#[test]
fn ask_answers_the_carpark_query_and_records_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = urbanplan(dir.path(), &["ask", CARPARK_QUERY, "--runs-dir", "runs", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let response = body["response"].as_str().unwrap();
    assert!(response.contains("parking forecast"), "{response}");
    let run_id = body["run_id"].as_str().unwrap();
    let record: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("runs").join(format!("{run_id}.json"))).unwrap()).unwrap();
    assert_eq!(record["response"], response);
    let stages: Vec<&str> = record["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["analysis", "matching", "generation"]);
}

#[test]
fn config_file_applies_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("urbanllm.toml"), "[paths]\nfixtures = \"missing-fixtures\"\n").unwrap();
    let out = urbanplan(dir.path(), &["ask", CARPARK_QUERY]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("paths.fixtures"), "{}", stderr(&out));

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/fixtures");
    let out = urbanplan(dir.path(), &["ask", CARPARK_QUERY, "--fixtures", fixtures.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    fs::write(dir.path().join("other.toml"), "[execution]\nclock = \"yesterday\"\n").unwrap();
    let out = urbanplan(dir.path(), &["--config", "other.toml", "ask", CARPARK_QUERY]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("execution.clock"), "{}", stderr(&out));
}

#[test]
fn unknown_query_under_replay_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = urbanplan(dir.path(), &["plan", "--query", "What is the meaning of life?"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("analysis"), "{}", stderr(&out));
}

#[test]
fn replay_build_matches_the_shipped_store() {
    let dir = tempfile::tempdir().unwrap();
    let out = urbanplan(dir.path(), &["replay-build", "--out", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(dir.path().join("r.jsonl")).unwrap(), urbanplan::pipeline::BUILTIN_REPLAY);
}

#[test]
fn dataset_gen_without_replies_reports_the_shortfall() {
    let dir = tempfile::tempdir().unwrap();
    let out = urbanplan(dir.path(), &["dataset", "gen", "--n", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("replay miss") || stderr(&out).contains("stored"), "{}", stderr(&out));
}
