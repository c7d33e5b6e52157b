use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rgmps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgmps")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rgmps(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(args: &[&str]) -> String {
    let out = rgmps(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is one JSON object");
    err["error"]["kind"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

const TINY: &str = r#"{"model": {"channels": 8, "head_channels": 4}, "train": {"epochs": 1, "batch_size": 4}}"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.json"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn gen_data_writes_a_manifest() {
    let ws = Workspace::new();
    let data = ws.path("data");
    let out: Value = serde_json::from_str(&ok(&["gen-data", "--n", "3", "--out", s(&data), "--seed", "5"])).unwrap();
    assert_eq!(out["written"], 3);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["version"], 1);
    assert_eq!(manifest["image_size"], json!([64, 64]));
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 3);
    assert!(data.join("images/000002.ppm").exists());
}

#[test]
fn failures_are_reported_as_json() {
    let ws = Workspace::new();
    assert_eq!(error_kind(&["eval", "--ckpt", s(&ws.path("nope.ckpt")), "--data", s(&ws.path("nope"))]), "io");
    assert_eq!(error_kind(&["gen-data", "--out", s(&ws.path("x"))]), "usage");
    assert_eq!(error_kind(&["gen-data", "--n", "0", "--out", s(&ws.path("x"))]), "input");
    assert_eq!(error_kind(&["train", "--data", "d", "--out", "o", "--model", "transformer"]), "usage");
    std::fs::write(ws.path("bad.json"), "{not json").unwrap();
    assert_eq!(
        error_kind(&["select-skill", "--scene", s(&ws.path("bad.json")), "--instruction", "hi"]),
        "json"
    );
    assert_eq!(error_kind(&["sweep", "--ns", "20,10", "--seeds", "0", "--out", s(&ws.path("c.csv"))]), "config");
}

#[test]
fn help_exits_cleanly() {
    let out = rgmps(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("select-skill"));
}

#[test]
fn select_skill_plans_a_delivery() {
    let plan: Value = serde_json::from_str(&ok(&[
        "select-skill",
        "--scene",
        s(&fixture("desk_scene.json")),
        "--instruction",
        "I want Fanta",
    ]))
    .unwrap();
    let skills: Vec<&str> = plan["steps"].as_array().unwrap().iter().map(|s| s["skill"].as_str().unwrap()).collect();
    assert_eq!(skills, ["SideGrasp", "Delivery"]);
    let kind = error_kind(&[
        "select-skill",
        "--scene",
        s(&fixture("desk_scene.json")),
        "--instruction",
        "I want the boxed tea",
    ]);
    assert_eq!(kind, "no_feasible_skill");
}

#[test]
fn select_skill_reports_an_unreachable_interpreter() {
    let kind = error_kind(&[
        "select-skill",
        "--scene",
        s(&fixture("desk_scene.json")),
        "--instruction",
        "I want Fanta",
        "--endpoint",
        "http://127.0.0.1:9/locate",
    ]);
    assert_eq!(kind, "interpreter_unavailable");
}

/// Trains a tiny policy, fits the mixture and lays out a skill registry and
/// a scene whose image is the first demonstration.
fn skill_library(ws: &Workspace) -> (PathBuf, PathBuf) {
    let data = ws.path("data");
    let ckpt = ws.path("policy.ckpt");
    let gmm = ws.path("gmm.json");
    ok(&["gen-data", "--n", "8", "--out", s(&data), "--seed", "11"]);
    ok(&["train", "--data", s(&data), "--config", s(&ws.path("tiny.json")), "--out", s(&ckpt), "--seed", "3"]);
    ok(&["fit-gmm", "--data", s(&data), "--k", "3", "--out", s(&gmm)]);
    std::fs::copy(data.join("images/000000.ppm"), ws.path("scene.ppm")).unwrap();
    let mut scene: Value = serde_json::from_str(&std::fs::read_to_string(fixture("desk_scene.json")).unwrap()).unwrap();
    scene["image"] = json!("scene.ppm");
    std::fs::write(ws.path("scene.json"), scene.to_string()).unwrap();
    let registry = json!({
        "version": 1,
        "skills": {"SideGrasp": "policy.ckpt", "Delivery": "policy.ckpt"},
        "gmm": {"SideGrasp": "gmm.json"},
    });
    std::fs::write(ws.path("skills.json"), registry.to_string()).unwrap();
    (ws.path("scene.json"), ws.path("skills.json"))
}

#[test]
fn train_eval_and_infer_are_reproducible() {
    let ws = Workspace::new();
    let (scene, skills) = skill_library(&ws);
    let data = ws.path("data");

    let again = ws.path("again.ckpt");
    let log = ok(&["train", "--data", s(&data), "--config", s(&ws.path("tiny.json")), "--out", s(&again), "--seed", "3"]);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);
    assert!(first["train_loss"].as_f64().unwrap().is_finite());
    assert_eq!(std::fs::read(ws.path("policy.ckpt")).unwrap(), std::fs::read(&again).unwrap());

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--ckpt", s(&again), "--data", s(&data)];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let plain: Value = serde_json::from_str(&eval(&[])).unwrap();
    let rate = plain["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert_eq!(plain["episodes"].as_array().unwrap().len(), 8);
    assert_eq!(eval(&[]), eval(&[]));
    let gmm_path = ws.path("gmm.json");
    let refined: Value = serde_json::from_str(&eval(&["--gmm", s(&gmm_path), "--eps", "0.1"])).unwrap();
    assert_eq!(refined["refined"], true);
    assert_eq!(refined["eps"], 0.1);

    let infer = || ok(&["infer", "--instruction", "I want Fanta", "--scene", s(&scene), "--skills", s(&skills)]);
    let a = infer();
    assert_eq!(a, infer());
    let trace: Value = serde_json::from_str(&a).unwrap();
    let steps = trace["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 2);
    assert!(steps[0]["min_distance"].is_number());
    assert!(steps[1]["min_distance"].is_null());
    assert_eq!(steps[1]["a_in"], steps[1]["a_star"]);
}

#[test]
fn infer_matches_the_golden_trace() {
    let ws = Workspace::new();
    let (scene, skills) = skill_library(&ws);
    let trace = ok(&["infer", "--instruction", "I want Fanta", "--scene", s(&scene), "--skills", s(&skills)]);
    let golden = fixture("golden_trace.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &trace).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).expect("golden trace exists; run with UPDATE_GOLDEN=1 to record it");
    assert_eq!(trace, expected);
}

#[test]
fn infer_without_a_registered_skill_fails() {
    let ws = Workspace::new();
    let (scene, _) = skill_library(&ws);
    std::fs::write(ws.path("partial.json"), json!({"version": 1, "skills": {"SideGrasp": "policy.ckpt"}}).to_string()).unwrap();
    let kind = error_kind(&[
        "infer",
        "--instruction",
        "I want Fanta",
        "--scene",
        s(&scene),
        "--skills",
        s(&ws.path("partial.json")),
    ]);
    assert_eq!(kind, "skill_model_missing");
}

#[test]
fn sweep_emits_one_row_per_model() {
    let ws = Workspace::new();
    let cfg = json!({
        "test_size": 4,
        "model": {"channels": 8, "head_channels": 4},
        "sample_budget": 1,
        "min_epochs": 1,
        "max_epochs": 1,
    });
    std::fs::write(ws.path("sweep.json"), cfg.to_string()).unwrap();
    let csv = ws.path("curve.csv");
    let log = ok(&["sweep", "--ns", "10", "--seeds", "0", "--out", s(&csv), "--config", s(&ws.path("sweep.json"))]);
    assert_eq!(log.lines().count(), 2);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,n,seed,success_rate,mean_err,wall_seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("rasnet,10,0,") && lines[2].starts_with("cnn,10,0,"));
}
