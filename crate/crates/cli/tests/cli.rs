use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn opstress(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opstress"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = opstress(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_hashes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                Sha256::digest(fs::read(&p).unwrap()).to_vec(),
            )
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "generate-data",
            "--seed",
            "42",
            "--n-train",
            "30",
            "--n-test",
            "5",
            "--out",
            s(d),
        ]);
    }
    let ha = dir_hashes(&a);
    assert!(ha.contains_key("run_config.json") && ha.len() > 1);
    assert_eq!(ha, dir_hashes(&b));

    let c = tmp.path().join("c");
    ok(&[
        "generate-data",
        "--seed",
        "43",
        "--n-train",
        "30",
        "--n-test",
        "5",
        "--out",
        s(&c),
    ]);
    assert_ne!(ha, dir_hashes(&c));
}

#[test]
fn attack_writes_one_file_per_model_and_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let models = tmp.path().join("models");
    let attacks = tmp.path().join("attacks");
    ok(&["generate-data", "--n-train", "30", "--n-test", "4", "--out", s(&data)]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--arch",
        "poddeeponet",
        "--epochs",
        "2",
        "--out",
        s(&models),
    ]);
    let ckpt = models.join("poddeeponet.ckpt");
    assert!(ckpt.exists() && models.join("poddeeponet_report.json").exists());
    ok(&[
        "attack",
        "--data",
        s(&data),
        "--model",
        s(&ckpt),
        "--k",
        "1,3,5,10",
        "--tau",
        "0.1,0.2,0.3,0.4",
        "--samples",
        "2",
        "--max-gen",
        "3",
        "--out",
        s(&attacks),
    ]);
    for k in [1, 3, 5, 10] {
        let text = fs::read_to_string(attacks.join(format!("de_poddeeponet_k{k}.jsonl"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for (id, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["success"].as_array().unwrap().len(), 4);
            assert_eq!((v["k"].as_u64(), v["sample_id"].as_u64()), (Some(k), Some(id as u64)));
        }
    }
    let jsonl = fs::read_dir(&attacks)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "jsonl"));
    assert_eq!(jsonl.count(), 4);

    // Analysis consumes the records without touching them.
    let before = dir_hashes(&attacks);
    let analysis = tmp.path().join("analysis");
    ok(&[
        "analyze",
        "--data",
        s(&data),
        "--model",
        s(&ckpt),
        "--records",
        s(&attacks),
        "--samples",
        "2",
        "--out",
        s(&analysis),
    ]);
    assert_eq!(before, dir_hashes(&attacks));
    let tables = tmp.path().join("tables");
    ok(&[
        "report",
        "--summary",
        s(&analysis.join("summary.json")),
        "--out",
        s(&tables),
    ]);
    let rates = fs::read_to_string(tables.join("success_rates.csv")).unwrap();
    assert!(rates.starts_with("method,tau,model,k=1,k=3,k=5,k=10"), "{rates}");
}

#[test]
fn usage_and_config_errors_exit_two() {
    let out = opstress(&["generate-data", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"samples": 0}"#).unwrap();
    let out = opstress(&["--config", s(&cfg), "generate-data", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(&cfg, "{ not json").unwrap();
    let out = opstress(&["--config", s(&cfg), "generate-data", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn snapshot_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    ok(&[
        "--seed",
        "9",
        "generate-data",
        "--n-train",
        "30",
        "--n-test",
        "5",
        "--out",
        s(&a),
    ]);
    let b = tmp.path().join("b");
    ok(&[
        "--config",
        s(&a.join("run_config.json")),
        "generate-data",
        "--out",
        s(&b),
    ]);
    assert_eq!(dir_hashes(&a), dir_hashes(&b));
}
