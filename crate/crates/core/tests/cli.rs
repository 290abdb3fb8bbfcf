use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_ehrbench")
}

fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "paths": {"input_dir": "source", "work_dir": "work"},
        "synth": {"n_patients": 60, "seed": 3},
        "encoders": {"selected": [
            {"name": "notes", "modality": "text", "dimension": 32, "kind": "native", "encoder": "hashed_tokens"},
            {"name": "cxr", "modality": "image", "dimension": 16, "kind": "native", "encoder": "reference"}
        ]},
        "evaluation": {"seed": 5, "n_boot": 50}
    });
    merge(&mut cfg, extra);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

fn run(args: &[&str], config: &Path) -> Output {
    Command::new(exe()).args(args).arg("--config").arg(config).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, r#"{"evaluation": {"n_boot": 10}}"#).unwrap();
    let out = run(&["run-all"], &path);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("evaluation.seed"), "{}", stderr(&out));
}

#[test]
fn bad_override_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    let out = run(&["cohort", "--model.max_iter=lots"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.max_iter"), "{}", stderr(&out));
}

#[test]
fn help_documents_config_keys() {
    let out = Command::new(exe()).arg("--help").output().unwrap();
    let text = stdout(&out);
    for key in ["--evaluation.seed", "--evaluation.n_boot", "--model.lambda", "--lvlm.base_url", "--cohort.window_hours"] {
        assert!(text.contains(key), "{key} missing from --help");
    }
}

#[test]
fn run_all_then_rerun_is_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    std::fs::write(&script, r#"{"default_reply": "Yes."}"#).unwrap();
    let cfg = small_config(
        dir.path(),
        json!({"lvlm": {"enabled": true, "mock_script": "script.json", "backoff_ms": 1}}),
    );
    let first = run(&["run-all"], &cfg);
    assert!(first.status.success(), "{}", stderr(&first));
    let work = dir.path().join("work");
    for f in [
        "provenance.json",
        "reports/eval_report.json",
        "reports/summary.md",
        "reports/metrics.csv",
        "reports/lvlm_report.json",
        "reports/lvlm_log.jsonl",
        "feature_map.json",
        "model.json",
    ] {
        assert!(work.join(f).exists(), "{f} not written");
    }
    let lvlm: Value = serde_json::from_str(&std::fs::read_to_string(work.join("reports/lvlm_report.json")).unwrap()).unwrap();
    assert_eq!(lvlm["answerable_pct"], json!(100.0));

    let second = run(&["run-all"], &cfg);
    assert!(second.status.success());
    let lines: Vec<String> = stdout(&second).lines().map(String::from).collect();
    assert_eq!(lines.len(), 9);
    for line in &lines {
        assert!(line.ends_with(": up to date"), "{line}");
    }

    // A changed evaluation setting reruns only evaluate and report.
    let third = run(&["run-all", "--evaluation.n_boot=40"], &cfg);
    let text = stdout(&third);
    assert!(text.contains("train: up to date"), "{text}");
    assert!(text.contains("evaluate: done"), "{text}");
    assert!(text.contains("report: done"), "{text}");
}

#[test]
fn stages_check_predecessors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    let out = run(&["train"], &cfg);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("has not been run"), "{}", stderr(&out));

    for stage in ["synth", "ingest", "cohort"] {
        assert!(run(&[stage], &cfg).status.success());
    }
    let cohort = dir.path().join("work/cohort.json");
    let mut text = std::fs::read_to_string(&cohort).unwrap();
    text.push(' ');
    std::fs::write(&cohort, text).unwrap();
    let out = run(&["featurize"], &cfg);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("work/cohort.json"), "{}", stderr(&out));

    assert!(run(&["cohort"], &cfg).status.success());
    assert!(run(&["featurize"], &cfg).status.success());
}

#[test]
fn external_adapter_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = json!({
        "name": "ext", "modality": "text", "dimension": 24, "kind": "external",
        "command": [exe(), "adapter", "--name", "ext", "--modality", "text", "--dimension", "24", "--encoder", "reference"]
    });
    let cfg = small_config(dir.path(), json!({"encoders": {"selected": [adapter]}}));
    let out = run(&["run-all"], &cfg);
    assert!(out.status.success(), "{}", stderr(&out));
    let map: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("work/feature_map.json")).unwrap()).unwrap();
    let ext = map["blocks"].as_array().unwrap().iter().find(|b| b["name"] == "ext").unwrap();
    assert_eq!(ext["end"].as_u64().unwrap() - ext["start"].as_u64().unwrap(), 24);
}

#[test]
fn adapter_dimension_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = json!({
        "name": "ext", "modality": "text", "dimension": 24, "kind": "external",
        "command": [exe(), "adapter", "--modality", "text", "--dimension", "12"]
    });
    let cfg = small_config(dir.path(), json!({"encoders": {"selected": [adapter]}}));
    let out = run(&["run-all"], &cfg);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn unreachable_endpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let cfg = small_config(
        dir.path(),
        json!({"lvlm": {"enabled": true, "base_url": format!("http://127.0.0.1:{port}/v1"), "backoff_ms": 1, "timeout_ms": 2000}}),
    );
    let out = run(&["run-all"], &cfg);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("unavailable"), "{}", stderr(&out));
}

#[test]
fn encoder_dimension_drift_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    assert!(run(&["run-all"], &cfg).status.success());
    let out = run(
        &[
            "run-all",
            r#"--encoders.selected=[{"name":"notes","modality":"text","dimension":48,"kind":"native","encoder":"hashed_tokens"}]"#,
        ],
        &cfg,
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("notes"), "{}", stderr(&out));
}

#[test]
fn patient_split_keeps_subjects_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"model": {"split_by": "patient"}}));
    let out = run(&["run-all"], &cfg);
    assert!(out.status.success(), "{}", stderr(&out));
    let work = dir.path().join("work");
    let cohort: Value = serde_json::from_str(&std::fs::read_to_string(work.join("cohort.json")).unwrap()).unwrap();
    let split: Value = serde_json::from_str(&std::fs::read_to_string(work.join("split.json")).unwrap()).unwrap();
    let subject_of = |id: &Value| {
        cohort["stays"].as_array().unwrap().iter().find(|s| &s["stay_id"] == id).unwrap()["subject_id"].clone()
    };
    let train: Vec<Value> = split["train_stay_ids"].as_array().unwrap().iter().map(subject_of).collect();
    for id in split["test_stay_ids"].as_array().unwrap() {
        assert!(!train.contains(&subject_of(id)));
    }
    let report = std::fs::read_to_string(work.join("reports/eval_report.json")).unwrap();
    assert!(report.contains("\"split_by\": \"patient\""));
}
