use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use psi_manifold::cli::SUMMARY_HEADER;
use psi_manifold::experiments::CSV_HEADER;

fn psi(args: &[&str], log: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_psi"));
    cmd.args(args).env_remove("PSI_LOG_LEVEL");
    if let Some(level) = log {
        cmd.env("PSI_LOG_LEVEL", level);
    }
    cmd.output().expect("spawn psi")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_config(kind: &str, lr_w: f64) -> String {
    format!(
        r#"{{"data": {{"kind": "toy_regression", "n_samples": 128, "hidden": 16, "mu_seed": 1, "data_seed": 2, "init_seed": 3}},
            "optimizer": {{"kind": "{kind}", "lr_w": {lr_w}, "lr_g": 0.01}},
            "epochs": 2, "batch_size": 32, "log_every": 2, "shuffle_seed": 4}}"#
    )
}

#[test]
fn train_writes_metadata_then_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("nested/run.csv");
    fs::write(&cfg, toy_config("psi_sgd", 1.0)).unwrap();
    let o = psi(&["train", "-c", s(&cfg), "-o", s(&out)], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let meta: serde_json::Value = serde_json::from_str(lines.next().unwrap().strip_prefix("# ").unwrap()).unwrap();
    assert_eq!(meta["shuffle_seed"], 4);
    assert_eq!(lines.next(), Some(CSV_HEADER));
    // Steps 0, 2, 4, 6 and the final step 8.
    assert_eq!(lines.count(), 5);
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let o = psi(&["train", "-c", "/no/such/config.json", "-o", "/tmp/unused.csv"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/config.json"));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"data": {"kind": "toy_regression"}}"#).unwrap();
    let o = psi(&["train", "-c", s(&cfg)], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.json");
    fs::write(&cfg, toy_config("sgd", 0.1).replace("\"lr_g\": 0.01", "\"lr_g\": 1e200")).unwrap();
    let o = psi(&["train", "-c", s(&cfg), "-o", s(&dir.path().join("hot.csv"))], None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn empty_sweep_writes_header_only_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (cfgs, outs) = (dir.path().join("cfgs"), dir.path().join("outs"));
    fs::create_dir(&cfgs).unwrap();
    let o = psi(&["sweep", "-d", s(&cfgs), "-o", s(&outs)], None);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(outs.join("summary.csv")).unwrap(), format!("{SUMMARY_HEADER}\n"));
}

#[test]
fn sweep_runs_every_config_and_flags_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (cfgs, outs) = (dir.path().join("cfgs"), dir.path().join("outs"));
    fs::create_dir(&cfgs).unwrap();
    for (kind, lr) in [("psi_sgd", 1.0), ("psi_sgdm", 0.1), ("sgd", 0.1), ("sgdm", 0.1), ("adam", 0.001)] {
        fs::write(cfgs.join(format!("{kind}.json")), toy_config(kind, lr)).unwrap();
    }
    fs::write(cfgs.join("notes.txt"), "ignored").unwrap();
    let o = psi(&["sweep", "-d", s(&cfgs), "-o", s(&outs), "-j", "2"], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(outs.join("summary.csv")).unwrap();
    let runs: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(runs, ["adam", "psi_sgd", "psi_sgdm", "sgd", "sgdm"]);
    assert!(summary.lines().skip(1).all(|l| l.split(',').nth(1) == Some("ok")));

    fs::write(cfgs.join("broken.json"), "{").unwrap();
    let o = psi(&["sweep", "-d", s(&cfgs), "-o", s(&outs)], None);
    assert_eq!(o.status.code(), Some(4));
    let summary = fs::read_to_string(outs.join("summary.csv")).unwrap();
    assert!(summary.contains("broken,error,,"));
}

#[test]
fn verify_catches_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    let o = psi(&["verify", "--seed", "1", "-o", s(&report), "--inject-bn-fault"], None);
    assert_eq!(o.status.code(), Some(3));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().any(|l| l.starts_with("gradient_fd_rel_err") && l.ends_with("FAIL")));
}

#[test]
fn log_level_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, toy_config("psi_sgdm", 0.1)).unwrap();
    let mut outputs = Vec::new();
    for level in [None, Some("error"), Some("info"), Some("debug")] {
        let out = dir.path().join(format!("{level:?}.csv"));
        let o = psi(&["train", "-c", s(&cfg), "-o", s(&out)], level);
        assert_eq!(o.status.code(), Some(0));
        outputs.push(fs::read(&out).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}
