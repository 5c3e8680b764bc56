//! End-to-end command tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn stdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stdet"))
        .args(args)
        .output()
        .expect("spawn stdet")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");

    ok(&stdet(&[
        "synth", "--out", &s(&data), "--count", "3", "--seed", "7",
        "--width", "64", "--height", "64",
    ]));
    assert!(data.join("manifest.json").exists());
    assert!(data.join("gt.jsonl").exists());
    assert!(data.join("images/scene_00000.png").exists());

    let stdout = ok(&stdet(&[
        "train", "--data", &s(&data), "--out", &s(&model), "--epochs", "1", "--seed", "1",
    ]));
    assert!(stdout.contains("epoch   0"), "missing epoch line: {stdout}");
    assert!(model.join("params.bin").exists());
    assert!(model.join("model.json").exists());

    let det = dir.path().join("det.jsonl");
    let svg = dir.path().join("overlay.svg");
    ok(&stdet(&[
        "infer", "--model", &s(&model),
        "--image", &s(&data.join("images/scene_00001.png")),
        "--out", &s(&det), "--overlay", &s(&svg),
    ]));
    assert!(det.exists());
    let svg_text = std::fs::read_to_string(&svg).unwrap();
    assert!(svg_text.starts_with("<svg") || svg_text.starts_with("<?xml"));

    let report = ok(&stdet(&[
        "eval", "--model", &s(&model), "--data", &s(&data), "--json",
    ]));
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(parsed.get("f1").is_some());
}

#[test]
fn unknown_flag_exits_2() {
    let out = stdet(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_model_exits_1() {
    let out = stdet(&["infer", "--model", "/nonexistent", "--image", "/nonexistent.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn noise_is_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&stdet(&[
        "synth", "--out", &s(&data), "--count", "1", "--seed", "3",
        "--width", "64", "--height", "64",
    ]));
    let img = data.join("images/scene_00000.png");
    let n1 = dir.path().join("n1.png");
    let n2 = dir.path().join("n2.png");
    ok(&stdet(&["noise", "--image", &s(&img), "--out", &s(&n1), "--prob", "0.1", "--seed", "5"]));
    ok(&stdet(&["noise", "--image", &s(&img), "--out", &s(&n2), "--prob", "0.1", "--seed", "5"]));
    assert_eq!(std::fs::read(&n1).unwrap(), std::fs::read(&n2).unwrap());

    let out = stdet(&["noise", "--image", &s(&img), "--out", &s(&n1), "--prob", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_every_op_passing() {
    let stdout = ok(&stdet(&["gradcheck", "--json"]));
    let results: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let ops = results.as_array().unwrap();
    assert!(ops.len() >= 10);
    for op in ops {
        assert_eq!(op["pass"], true, "failing op: {op}");
    }
}

#[test]
fn arch_report_orders_depth_presets() {
    let stdout = ok(&stdet(&["arch-report", "--all", "--json"]));
    let rows: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let params: Vec<(String, u64)> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["version"].as_str().unwrap().to_string(),
                r["params"].as_u64().unwrap(),
            )
        })
        .collect();
    let get = |v: &str| params.iter().find(|(n, _)| n == v).unwrap().1;
    assert!(get("V3") < get("V1"));

    let table = ok(&stdet(&["arch-report", "--version", "v2", "--width", "24", "--stem", "16", "--size", "128"]));
    assert!(table.contains("stem.0"));
    assert!(table.contains("shuffle"));
}

#[test]
fn train_rejects_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&stdet(&["synth", "--out", &s(&data), "--count", "0"]));
    let out = stdet(&["train", "--data", &s(&data), "--out", &s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}
