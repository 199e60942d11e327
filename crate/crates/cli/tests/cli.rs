use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mulot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mulot"))
        .args(args)
        .output()
        .expect("spawn mulot")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path) -> String {
    let out = mulot(&[
        "gen-synth", "--out", s(dir), "--n-per-class", "12", "--dims", "5,4,3", "--rule", "unimodal",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    json(&out)["manifest"].as_str().unwrap().to_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{"model": {"heads": 3, "inner": 2, "l_uni": 4, "d_uni": 3},
            "train": {"batch_size": 6, "epochs": 2, "warmup_steps": 2, "eval_every": 3}}"#,
    )
    .unwrap();
    s(&path).to_owned()
}

#[test]
fn gen_synth_reports_counts_and_a_stable_digest() {
    let dir = tempfile::tempdir().unwrap();
    let a = mulot(&["gen-synth", "--out", s(&dir.path().join("a"))]);
    let b = mulot(&["gen-synth", "--out", s(&dir.path().join("b"))]);
    let (a, b) = (json(&a), json(&b));
    assert_eq!(a["records"]["train"], 160);
    assert_eq!(a["records"]["dev"], 20);
    assert_eq!(a["records"]["test"], 20);
    assert_eq!(a["digest"], b["digest"]);
}

#[test]
fn gen_synth_rejects_negative_noise() {
    let dir = tempfile::tempdir().unwrap();
    let out = mulot(&["gen-synth", "--out", s(dir.path()), "--noise", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("noise"));
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(mulot(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn ot_solve_prints_plan_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("cost.csv");
    fs::write(&cost, "0, 1\n1, 0\n").unwrap();
    let out = mulot(&["ot-solve", "--cost", s(&cost), "--eps", "0.05", "--oracle"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&out);
    let e = (-1.0f64 / 0.05).exp();
    let diag = 0.5 / (1.0 + e);
    assert!((v["coupling"][0][0].as_f64().unwrap() - diag).abs() < 1e-12);
    assert_eq!(v["exact"]["cost"], 0.0);
    assert_eq!(v["exact"]["permutation"], serde_json::json!([0, 1]));
    assert!(stderr(&out).contains("exact cost 0.0"));
}

#[test]
fn ot_solve_validates_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("cost.csv");
    fs::write(&cost, "0,1,2\n1,0,2\n").unwrap();
    let c = s(&cost);
    assert_eq!(mulot(&["ot-solve", "--cost", c, "--eps", "0"]).status.code(), Some(2));
    assert_eq!(mulot(&["ot-solve", "--cost", c, "--oracle"]).status.code(), Some(2));
    assert!(mulot(&["ot-solve", "--cost", c]).status.success());
    fs::write(&cost, "0,x\n").unwrap();
    assert_eq!(mulot(&["ot-solve", "--cost", c]).status.code(), Some(2));
}

#[test]
fn train_then_eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&dir.path().join("data"));
    let config = small_config(dir.path());
    let run = dir.path().join("run");
    let out = mulot(&["train", "--config", &config, "--data", &manifest, "--out", s(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&out);
    assert_eq!(v["done"], true);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,loss,accuracy,macro_f1\n"));

    let ckpt = run.join("checkpoint.mlck");
    // The manifest path is stored in the config, so --data may be omitted.
    let out = mulot(&["eval", "--checkpoint", s(&ckpt), "--split", "dev"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = json(&out);
    let c = &m["confusion"];
    let total = ["tp", "fn", "fp", "tn"].iter().map(|k| c[k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(total, 2);

    let out = mulot(&["inspect-attention", "--checkpoint", s(&ckpt), "--sample-id", "test-00000-1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&out);
    let w = &v["maf_weights"];
    let sum: f64 = ["visual", "language", "acoustic"].iter().map(|m| w[m].as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-12);
    assert_eq!(v["attention"]["visual"].as_array().unwrap().len(), 3);

    let out = mulot(&["inspect-attention", "--checkpoint", s(&ckpt), "--sample-id", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_manifest_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let out = mulot(&["train", "--data", s(&missing), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.jsonl"));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&dir.path().join("data"));
    let config = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(mulot(&["train", "--config", &config, "--data", &manifest, "--out", s(&run)])
        .status
        .success());
    let ckpt = run.join("checkpoint.mlck");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&ckpt, &bytes).unwrap();
    let out = mulot(&["eval", "--checkpoint", s(&ckpt), "--data", &manifest]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn grad_check_passes_and_catches_a_fault() {
    let out = mulot(&["grad-check", "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(json(&out)["pass"], true);
    let out = mulot(&["grad-check", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["pass"], false);
}
