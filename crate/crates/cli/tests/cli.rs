use std::path::Path;
use std::process::{Command, Output};

fn vicatda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vicatda"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn vicatda")
}

fn ok(args: &[&str]) -> String {
    let out = vicatda(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn moons(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("moons.csv");
    ok(&["generate-data", "--n", "60", "--seed", "3", "--out", s(&data)]);
    data
}

#[test]
fn generate_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["generate-data", "--n", "40", "--seed", "7", "--out", s(&a)]);
    ok(&["generate-data", "--n", "40", "--seed", "7", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 81);
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    let out = dir.path().join("run");
    let stdout = ok(&["train", "--method", "vicatda", "--epochs", "3", "--data", s(&data), "--out-dir", s(&out)]);
    assert!(stdout.contains("target accuracy"));
    for f in ["metrics.csv", "confusion.csv", "features.csv", "consistency.csv", "model.ckpt", "config.json", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn checkpoint_round_trips_through_eval_and_tdsr() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--method", "catda", "--epochs", "3", "--data", s(&data), "--out-dir", s(&run)]);
    let ckpt = run.join("model.ckpt");
    let eval_dir = dir.path().join("eval");
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out-dir", s(&eval_dir)]);
    let ev: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(ev["target_acc"], summary["evaluation"]["target_acc"]);
    let tdsr_dir = dir.path().join("tdsr");
    ok(&["tdsr", "--checkpoint", s(&ckpt), "--data", s(&data), "--epochs", "2", "--out-dir", s(&tdsr_dir)]);
    assert_eq!(std::fs::read_to_string(tdsr_dir.join("tdsr.csv")).unwrap().lines().count(), 3);
    assert!(tdsr_dir.join("model.ckpt").is_file());
}

#[test]
fn ablate_restricted_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    let out = dir.path().join("grid");
    let stdout = ok(&[
        "ablate", "--epochs", "2", "--data", s(&data), "--seeds", "0,1", "--only", "no_adapt,catda", "--out-dir", s(&out),
    ]);
    assert!(stdout.contains("catda"));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("variant,mean,std,median"));
}

#[test]
fn beta_sweep_emits_one_row_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    let out = dir.path().join("sweep");
    ok(&["ablate", "--beta-sweep", "--betas", "0.2,1.0", "--epochs", "2", "--data", s(&data), "--seeds", "0", "--out-dir", s(&out)]);
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(table.contains("beta=0.2") && table.contains("beta=1"));
}

#[test]
fn check_passes_and_detached_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["check", "--configs", "50", "--beta-draws", "20000", "--out-dir", s(dir.path())]);
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("verify.json").is_file());
    let control = vicatda(&["check", "--configs", "50", "--beta-draws", "20000", "--detached"]);
    assert!(!control.status.success());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!vicatda(&["train", "--data", s(&dir.path().join("missing.csv")), "--out-dir", s(dir.path())]).status.success());
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"method":"dann","switches":{"tdsr":true}}"#).unwrap();
    assert!(!vicatda(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]).status.success());
    assert!(!vicatda(&["ablate", "--only", "nonsense", "--epochs", "1", "--out-dir", s(dir.path())]).status.success());
}
