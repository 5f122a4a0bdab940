// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[synth]
years = 1

[split]
train_start = "2018-01-01"
val_start = "2018-09-01"
test_start = "2018-11-01"
test_end = "2019-01-01"

[cnn]
filters = 4
embedding_dim = 4

[transformer]
d_model = 8
n_heads = 2
ff_dim = 8
embedding_dim = 4
encoder_blocks = 1

[train]
max_epochs = 2
patience = 1

[attribution]
background_size = 8
permutations = 2
bulk_samples = 4
exact_event_count = 1
exact_background_size = 1
bootstrap_resamples = 2
"#;

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn gridcast(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridcast"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(config: &Path, out: &Path, args: &[&str]) -> Vec<serde_json::Value> {
    let o = gridcast(config, out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn failure(o: &Output) -> (i32, serde_json::Value) {
    assert!(!o.status.success());
    let err = serde_json::from_slice(&o.stderr).expect("stderr is a json error");
    (o.status.code().unwrap(), err)
}

#[test]
fn end_to_end_run_writes_every_stage() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    for args in [&["synth"][..], &["ingest"], &["calibrate"], &["train"], &["fuse"], &["evaluate"], &["explain"]] {
        let lines = ok(&config, &out, args);
        for line in &lines {
            let stage_dir = out.join(line["dir"].as_str().unwrap());
            assert!(stage_dir.join("meta.json").exists());
            for f in line["files"].as_array().unwrap() {
                assert!(stage_dir.join(f.as_str().unwrap()).exists(), "{f}");
            }
        }
        if args == ["train"] {
            assert_eq!(lines.len(), 2);
        }
    }
    for f in ["evaluate/metrics.json", "evaluate/predictions.csv", "explain/attribution.csv", "explain/stability.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let metrics = out.join("evaluate/metrics.csv");
    let before = std::fs::read(&metrics).unwrap();
    ok(&config, &out, &["evaluate"]);
    assert_eq!(before, std::fs::read(&metrics).unwrap());
}

#[test]
fn zero_penalties_from_flags() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    for args in [&["synth"][..], &["ingest"], &["calibrate"]] {
        ok(&config, &out, args);
    }
    ok(&config, &out, &["--lambda1", "0", "--lambda2", "0", "train", "--branch", "cnn"]);
    let mut rdr = csv::Reader::from_path(out.join("train/cnn/history.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let cols: Vec<usize> =
        header.iter().enumerate().filter(|(_, h)| *h == "train_parabolic" || *h == "train_ramp").map(|(i, _)| i).collect();
    assert_eq!(cols.len(), 2);
    for rec in rdr.records() {
        let rec = rec.unwrap();
        for &c in &cols {
            assert_eq!(rec[c].parse::<f64>().unwrap(), 0.0);
        }
    }

    // the penalty weights are part of the training digest
    let o = gridcast(&config, &out, &["train", "--branch", "transformer"]);
    assert!(o.status.success());
    let (code, err) = failure(&gridcast(&config, &out, &["fuse"]));
    assert_eq!(code, 3);
    assert_eq!(err["context"]["kind"], "mismatch");
    assert_eq!(err["context"]["producer"], "gridcast train --branch cnn");
}

#[test]
fn missing_upstream_is_a_dependency_error() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    let (code, err) = failure(&gridcast(&config, &out, &["calibrate"]));
    assert_eq!(code, 3);
    assert_eq!(err["stage"], "calibrate");
    assert_eq!(err["context"]["kind"], "dependency");
    assert_eq!(err["context"]["producer"], "gridcast ingest");
    assert!(err["message"].as_str().unwrap().contains("gridcast ingest"));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[train]\nnot_a_field = 1\n").unwrap();
    let (code, err) = failure(&gridcast(&config, dir.path(), &["synth"]));
    assert_eq!(code, 2);
    assert_eq!(err["context"]["kind"], "config");

    let (code, _) = failure(&gridcast(&dir.path().join("absent.toml"), dir.path(), &["synth"]));
    assert!(code == 2 || code == 4);
}

#[test]
fn unreadable_input_is_a_data_error() {
    let (dir, config) = setup();
    let load = dir.path().join("load.csv");
    std::fs::write(&load, "not,a,load,file\n1,2,3,4\n").unwrap();
    let weather = dir.path().join("weather.csv");
    std::fs::write(&weather, "timestamp\n").unwrap();
    let text = format!("{TINY}\n[paths]\nload = {:?}\nweather = {:?}\n", load, weather);
    std::fs::write(&config, text).unwrap();
    let (code, err) = failure(&gridcast(&config, &dir.path().join("out"), &["ingest"]));
    assert_eq!(code, 1, "{err}");
    assert_eq!(err["stage"], "ingest");
}
