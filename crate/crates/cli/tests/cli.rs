use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedml"));
    c.env("FEDML_DATA_DIR", data_dir());
    c
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a CSV, skipping the manifest comment and the header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const SYN: &str = r#"{"dataset": {"synthetic": {"alpha_tilde": 0.5, "beta_tilde": 0.5}}, "fed": {"T": 40, "T0": 5}}"#;

#[test]
fn generate_is_reproducible_and_reports_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SYN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["generate", "--config", &cfg, "--out", s(&a)]);
    ok(&["generate", "--config", &cfg, "--out", s(&b)]);
    let fa = std::fs::read(a.join("federation.json")).unwrap();
    assert_eq!(fa, std::fs::read(b.join("federation.json")).unwrap());
    // nodes, samples, mean, stdev
    let stats: Vec<&str> = stdout.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(stats[0], "50");
    let mean: f64 = stats[2].parse().unwrap();
    let sd: f64 = stats[3].parse().unwrap();
    assert!((mean - 17.0).abs() <= 0.2 * 17.0, "mean {mean}");
    assert!((sd - 5.0).abs() <= 0.2 * 5.0, "stdev {sd}");
    let v: Value = serde_json::from_slice(&fa).unwrap();
    assert_eq!(v["manifest"]["seed"], 1);
}

#[test]
fn mnist_nodes_hold_exactly_two_digits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.json", r#"{"dataset": {"mnist": {}}}"#);
    let stdout = ok(&["generate", "--config", &cfg, "--out", s(dir.path())]);
    let stats: Vec<&str> = stdout.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(stats[0], "100");
    assert_eq!(stats[4], "2-2");
}

#[test]
fn train_adapt_attack_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.json", SYN);
    ok(&["generate", "--config", &cfg, "--out", s(&d.join("gen"))]);
    let fed = d.join("gen/federation.json");
    ok(&["train", "--dataset", s(&fed), "--iterations", "40", "--local-steps", "5", "--out", s(&d.join("ml"))]);
    ok(&[
        "train", "--dataset", s(&fed), "--iterations", "40", "--local-steps", "5", "--algorithm", "fedavg", "--out",
        s(&d.join("avg")),
    ]);
    let params = |dir: &str| -> Value { serde_json::from_slice(&std::fs::read(d.join(dir).join("params.json")).unwrap()).unwrap() };
    assert_ne!(params("ml")["params"], params("avg")["params"]);
    let log = rows(&d.join("ml/rounds.csv"));
    assert_eq!(log.len(), 9);
    assert_eq!(log[0][0], "0");
    assert_eq!(log[8][0], "40");

    let ml_params = d.join("ml/params.json");
    ok(&["adapt", "--params", s(&ml_params), "--dataset", s(&fed), "--steps", "3", "--out", s(&d.join("ad"))]);
    let adapt = rows(&d.join("ad/adapt.csv"));
    // Step 0 equals direct evaluation, and the train loss never goes up.
    let targets: Vec<&Vec<String>> = adapt.iter().filter(|r| r[0] != "mean").collect();
    assert_eq!(targets.len(), 10 * 4);
    for chunk in targets.chunks(4) {
        let train: Vec<f64> = chunk.iter().map(|r| r[2].parse().unwrap()).collect();
        assert!(train.windows(2).all(|w| w[1] <= w[0]), "{train:?}");
    }

    ok(&["attack", "--params", s(&ml_params), "--dataset", s(&fed), "--xi", "0,0.1,0.2,0.3", "--out", s(&d.join("at"))]);
    let attack = rows(&d.join("at/attack.csv"));
    for r in attack.iter().filter(|r| r[1] == "0.00000000e0") {
        assert_eq!(r[2], r[4], "xi = 0 loss must equal clean loss");
        assert_eq!(r[3], r[5], "xi = 0 accuracy must equal clean accuracy");
    }
    let mean_adv: Vec<f64> = attack.iter().filter(|r| r[0] == "mean").map(|r| r[5].parse().unwrap()).collect();
    assert!(mean_adv.windows(2).all(|w| w[1] <= w[0]), "{mean_adv:?}");
}

#[test]
fn zero_iterations_emit_initial_state_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SYN);
    ok(&["train", "--config", &cfg, "--iterations", "0", "--out", s(dir.path())]);
    let log = rows(&dir.path().join("rounds.csv"));
    assert_eq!(log.len(), 1);
    assert_eq!(&log[0][..2], &["0", "0"]);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn robust_run_writes_extra_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "r.json",
        r#"{"dataset": {"synthetic": {"alpha_tilde": 0.5, "beta_tilde": 0.5, "num_nodes": 10}},
            "algorithm": "robust-fedml", "fed": {"T": 20, "T0": 2},
            "robust": {"lambda": 1, "N0": 3, "R": 2}}"#,
    );
    ok(&["train", "--config", &cfg, "--out", s(dir.path())]);
    let text = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(
        text.lines().nth(1).unwrap(),
        "t,comm_round,global_loss,min_node_loss,max_node_loss,wall_ms,clean_loss,adv_loss,clean_acc,adv_acc,adv_set_size"
    );
    let r = rows(&dir.path().join("rounds.csv"));
    // No adversarial loss before the first generation.
    assert_eq!(r[0][7], "");
    assert_ne!(r.last().unwrap()[10], "0");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| run(args).status.code().unwrap();
    let cfg = write_config(d, "c.json", SYN);
    assert_eq!(code(&["train", "--config", &cfg, "--local-steps", "7", "--out", s(d)]), 2);
    assert_eq!(code(&["train", "--config", s(&d.join("missing.json")), "--out", s(d)]), 4);
    let bad = write_config(d, "bad.json", r#"{"dataset": {"synthetic": {}}}"#);
    assert_eq!(code(&["train", "--config", &bad, "--out", s(d)]), 2);
    let out = run(&["train", "--config", &cfg, "--beta", "1e8", "--out", s(d)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at node"));
    let wrong_k = {
        ok(&["generate", "--config", &cfg, "--out", s(&d.join("g"))]);
        code(&["train", "--dataset", s(&d.join("g/federation.json")), "--k", "3", "--out", s(d)])
    };
    assert_eq!(wrong_k, 2);
}

#[test]
fn analyze_identical_data_reports_zero_dissimilarity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.json", SYN);
    ok(&["generate", "--config", &cfg, "--out", s(d)]);
    let path = d.join("federation.json");
    let mut v: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let first = v["federation"]["sources"][0].clone();
    for node in v["federation"]["sources"].as_array_mut().unwrap() {
        node["train"] = first["train"].clone();
        node["test"] = first["test"].clone();
    }
    std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    let out = run(&["analyze", "--dataset", s(&path), "--iterations", "20", "--local-steps", "5", "--out", s(d)]);
    // Caps may legitimately fail here; the report is written either way.
    assert!(matches!(out.status.code(), Some(0) | Some(2)));
    let report: Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert!(report["delta"].as_f64().unwrap() < 1e-10);
    assert!(report["sigma"].as_f64().unwrap() < 1e-10);
    assert!(report["alpha_prime"].as_f64().unwrap() < 1e-10);
    assert!(report["h_T0"].as_f64().unwrap() < 1e-10);
    if out.status.code() == Some(2) {
        assert!(String::from_utf8_lossy(&out.stderr).contains("learning-rate cap violated"));
    }
}
