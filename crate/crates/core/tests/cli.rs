use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENARIO: &str = r#"{
  "name": "tiny",
  "seed": 4,
  "dataset": {"synthetic": {"num_classes": 4, "dim": 6, "per_class_count": 40, "separation": 4.0}},
  "noise": {"noise_level": 0.4},
  "federated": {"num_clients": 4, "rounds": 3, "hidden_layers": [8], "k": 5, "warmup_rounds": 2}
}"#;

fn fedln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedln"))
        .args(args)
        .env_remove("FEDLN_SEED")
        .output()
        .unwrap()
}

fn write_scenario(dir: &Path, text: &str) -> String {
    let path = dir.join("scenario.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let o = fedln(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&fedln(&["train", "--bogus"])), 2);
    assert_eq!(code(&fedln(&["--help"])), 0);
}

#[test]
fn invalid_scenarios_exit_2_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SCENARIO.replace("\"noise_level\": 0.4", "\"noise_level\": 1.5");
    let o = fedln(&["train", "--config", &write_scenario(dir.path(), &bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/noise/noise_level"), "{}", stderr(&o));

    let typo = SCENARIO.replace("\"rounds\"", "\"roundz\"");
    let o = fedln(&["train", "--config", &write_scenario(dir.path(), &typo)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("roundz"), "{}", stderr(&o));

    let o = fedln(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn malformed_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.flne"), b"FLNE\x01\x00").unwrap();
    fs::write(dir.path().join("test.flne"), b"FLNE\x01\x00").unwrap();
    let text = SCENARIO.replace(
        r#"{"synthetic": {"num_classes": 4, "dim": 6, "per_class_count": 40, "separation": 4.0}}"#,
        r#"{"files": {"train": "train.flne", "test": "test.flne"}}"#,
    );
    let o = fedln(&["train", "--config", &write_scenario(dir.path(), &text)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), SCENARIO);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = fedln(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["rounds.csv", "summary.json", "model.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rounds = fs::read_to_string(a.join("rounds.csv")).unwrap();
    assert!(rounds.starts_with("# scenario: {"));
    assert_eq!(rounds.lines().count(), 2 + 3);
}

#[test]
fn env_seed_overrides_and_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), SCENARIO);
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_fedln"))
        .args(["train", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("FEDLN_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["scenario"]["seed"], 77);
}

#[test]
fn data_pipeline_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), SCENARIO);
    let out = dir.path().join("data");
    let o = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", &cfg, "--out", out.to_str().unwrap()]);
        let r = fedln(&full);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    };
    o(&["gen-data"]);
    o(&["inject-noise"]);
    o(&["estimate", "--method", "knn"]);
    o(&["estimate", "--method", "confidence"]);
    for f in ["train.flne", "test.flne", "train_noisy.flne", "matrices/client_0.csv", "partition.json", "estimation.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let train = fedln::dataset::load_dataset(out.join("train_noisy.flne")).unwrap();
    assert_eq!(train.len(), 160);
    assert!(train.examples.iter().any(|e| e.observed_label != e.true_label));
    let est = fs::read_to_string(out.join("estimation.csv")).unwrap();
    assert!(est.lines().nth(1).unwrap() == "client_id,method,n_hat,sample_count,flagged_count");
    assert_eq!(est.lines().filter(|l| l.contains(",confidence,")).count(), 4);

    // Train from the generated files.
    let files = SCENARIO.replace(
        r#"{"synthetic": {"num_classes": 4, "dim": 6, "per_class_count": 40, "separation": 4.0}}"#,
        r#"{"files": {"train": "data/train.flne", "test": "data/test.flne"}}"#,
    );
    let cfg = write_scenario(dir.path(), &files);
    let r = fedln(&["train", "--config", &cfg, "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
}

#[test]
fn sweep_names_cells_and_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), SCENARIO);
    let seq = dir.path().join("seq");
    let par = dir.path().join("par");
    let sweep = |out: &Path, jobs: &str| {
        let o = fedln(&[
            "sweep", "--config", &cfg, "--out", out.to_str().unwrap(),
            "--grid", "nl=0,0.2,0.4,0.6", "--strategies", "fedavg,fedln", "--jobs", jobs,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    sweep(&seq, "1");
    sweep(&par, "4");
    let mut names: Vec<String> = fs::read_dir(&seq)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".summary.json"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    assert!(names.contains(&"nl0.4_fedln_seed4.summary.json".to_string()), "{names:?}");
    for n in &names {
        assert_eq!(fs::read(seq.join(n)).unwrap(), fs::read(par.join(n)).unwrap(), "{n}");
    }

    // Re-running after deleting one cell reproduces it exactly.
    let victim = seq.join("nl0.2_fedavg_seed4.rounds.csv");
    let before = fs::read(&victim).unwrap();
    fs::remove_file(&victim).unwrap();
    sweep(&seq, "1");
    assert_eq!(fs::read(&victim).unwrap(), before);

    let long = dir.path().join("long.csv");
    let o = fedln(&["report", "--input", seq.to_str().unwrap(), "--out", long.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&long).unwrap();
    assert!(text.starts_with("scenario_id,round,metric,value\n"));
    assert!(text.contains("nl0.6_fedln_seed4,3,test_accuracy,"));
}

#[test]
fn shipped_presets_load() {
    let presets = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut count = 0;
    for entry in fs::read_dir(presets).unwrap() {
        let path = entry.unwrap().path();
        fedln::harness::load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 6);
}
