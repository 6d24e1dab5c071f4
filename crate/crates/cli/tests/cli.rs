use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn heatkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatkv"))
        .args(args)
        .output()
        .expect("run heatkv")
}

fn ok(args: &[&str]) -> String {
    let out = heatkv(args);
    assert!(
        out.status.success(),
        "heatkv {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth (uniform toy) → calibrate → plan at `budget`; returns the schedule path.
fn toy_schedule(dir: &Path, budget: &str) -> PathBuf {
    let traces = dir.join("traces");
    let scores = dir.join("scores.json");
    let schedule = dir.join(format!("schedule-{budget}.json"));
    ok(&["synth", "--pattern", "uniform", "--config", "toy", "--out", p(&traces)]);
    ok(&["calibrate", p(&traces), "--out", p(&scores)]);
    ok(&["plan", p(&scores), "--budget", budget, "--out", p(&schedule)]);
    schedule
}

#[test]
fn toy_schedule_has_single_early_eviction() {
    let dir = tempfile::tempdir().unwrap();
    let schedule: Value = serde_json::from_slice(&fs::read(toy_schedule(dir.path(), "0.5")).unwrap()).unwrap();
    let k3 = &schedule["scales"][2];
    assert_eq!(k3["k"], 3);
    assert_eq!(k3["absent"], serde_json::json!([[2, 1]]));
    assert_eq!(k3["evict_after_layer"]["1"], serde_json::json!([[1, 1], [1, 2]]));
    assert_eq!(schedule["budget"]["token_cap"], 14);
    assert_eq!(schedule["scores_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn full_budget_schedule_is_empty_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = toy_schedule(dir.path(), "1");
    let doc: Value = serde_json::from_slice(&fs::read(&schedule).unwrap()).unwrap();
    for scale in doc["scales"].as_array().unwrap() {
        assert_eq!(scale["absent"], serde_json::json!([]));
        assert_eq!(scale["evict_after_layer"], serde_json::json!({}));
    }
    let report: Value = serde_json::from_str(&ok(&["simulate", p(&schedule)])).unwrap();
    assert_eq!(report["violations"], serde_json::json!([]));
    let verify: Value = serde_json::from_str(&ok(&["verify", p(&schedule)])).unwrap();
    assert_eq!(verify["passed"], true);
    for s in verify["scales"].as_array().unwrap() {
        assert_eq!(s["oracle"], 0);
    }
}

#[test]
fn csv_has_one_row_per_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = toy_schedule(dir.path(), "0.5");
    let csv = ok(&["simulate", p(&schedule), "--format", "csv"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scale,layer,tokens,bytes,cap,ok");
    // (K-1)·L + 1 with K = 4, L = 2
    assert_eq!(lines.len() - 1, 3 * 2 + 1);
    assert!(lines.contains(&"3,1,10,5120,14,true"));
}

#[test]
fn tampered_schedule_exits_one_with_one_violation() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = toy_schedule(dir.path(), "0.5");
    let mut doc: Value = serde_json::from_slice(&fs::read(&schedule).unwrap()).unwrap();
    // move (2,1) from E_3 into the regular after-layer evictions
    doc["scales"][2]["absent"] = serde_json::json!([]);
    doc["scales"][2]["evict_after_layer"]["2"] = serde_json::json!([[2, 1]]);
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let out = heatkv(&["simulate", p(&tampered), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(1));
    let csv = String::from_utf8(out.stdout).unwrap();
    let bad: Vec<&str> = csv.lines().filter(|l| l.ends_with(",false")).collect();
    assert_eq!(bad, vec!["3,1,16,8192,14,false"]);

    assert_eq!(heatkv(&["verify", p(&tampered)]).status.code(), Some(1));
}

#[test]
fn malformed_schedule_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"mode\": \"binary\",\n  oops\n}\n").unwrap();
    let out = heatkv(&["simulate", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bad.json") && err.contains("line 3"), "{err}");
}

#[test]
fn usage_and_validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    assert_eq!(heatkv(&["synth", "--pattern", "spiral", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(heatkv(&["simulate"]).status.code(), Some(2));
    assert_eq!(heatkv(&["frobnicate"]).status.code(), Some(2));

    let schedule = toy_schedule(dir.path(), "0.5");
    let scores = dir.path().join("scores.json");
    let infeasible = heatkv(&["plan", p(&scores), "--budget", "0.1"]);
    assert_eq!(infeasible.status.code(), Some(2));
    assert!(String::from_utf8(infeasible.stderr).unwrap().contains("minimum feasible fraction is 0.14285714285714285"));

    // mixed configs are refused
    assert_eq!(heatkv(&["simulate", p(&schedule), "--config", "infinity"]).status.code(), Some(2));
    assert_eq!(heatkv(&["plan", p(&scores), "--budget", "0.5", "--sinks", "2"]).status.code(), Some(2));
    assert_eq!(heatkv(&["heatmap", p(&schedule), "--scale", "4"]).status.code(), Some(2));
}

#[test]
fn heatmap_marks_documented_instance() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = toy_schedule(dir.path(), "0.5");
    assert_eq!(ok(&["heatmap", p(&schedule), "--scale", "3"]), "layer,1,2\n1,1,1\n2,2,0\n");
    assert_eq!(ok(&["heatmap", p(&schedule), "--scale", "1"]), "layer,1,2\n1,0,0\n2,0,0\n");
    assert_eq!(ok(&["heatmap", p(&schedule), "--scale", "3", "--set", "early"]), "layer,1,2\n1,0,0\n2,2,0\n");
}

#[test]
fn budget_sweep_matches_single_plans() {
    let dir = tempfile::tempdir().unwrap();
    toy_schedule(dir.path(), "0.5");
    let scores = dir.path().join("scores.json");
    let sweep = dir.path().join("sweep");
    ok(&["plan", p(&scores), "--budget", "1,0.5,0.3", "--mode", "scale", "--out", p(&sweep)]);
    for b in ["1", "0.5", "0.3"] {
        let single = ok(&["plan", p(&scores), "--budget", b, "--mode", "scale"]);
        let swept = fs::read_to_string(sweep.join(format!("schedule-b{b}.json"))).unwrap();
        assert_eq!(single, swept);
    }
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let d = dir.path().join(tag);
        let traces = d.join("traces");
        let scores = d.join("scores.json");
        let schedule = d.join("schedule.json");
        let report = d.join("report.json");
        ok(&["synth", "--pattern", "random", "--seed", "11", "--samples", "3", "--out", p(&traces)]);
        ok(&["calibrate", p(&traces), "--out", p(&scores)]);
        ok(&["plan", p(&scores), "--budget", "0.4", "--accounting", "tight", "--out", p(&schedule)]);
        ok(&["simulate", p(&schedule), "--out", p(&report)]);
        let mut files = vec![
            fs::read(traces.join("manifest.json")).unwrap(),
            fs::read(traces.join("sample-0002.bin")).unwrap(),
        ];
        for f in [&scores, &schedule, &report] {
            files.push(fs::read(f).unwrap());
        }
        files
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn strict_self_traces_score_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t");
    ok(&["synth", "--pattern", "strict_self", "--level", "beta", "--samples", "2", "--out", p(&traces)]);
    let scores: Value = serde_json::from_str(&ok(&["calibrate", p(&traces)])).unwrap();
    assert_eq!(scores["calibration_samples"], 2);
    for row in scores["cas"].as_array().unwrap() {
        for v in row.as_array().unwrap() {
            assert!(v.as_f64().unwrap() < 0.01);
        }
    }
}
