//! End-to-end tests of the fedsim binary: artifacts, determinism, exit
//! codes, and the eval/run cross-check.

use std::path::Path;
use std::process::{Command, Output};

use fedsim_core::data::{load_dataset, save_dataset, Dataset};
use fedsim_core::model::{save_params, InputShape, ModelParams, ModelSpec};

fn fedsim(args: &[&str], dir: &Path, envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedsim"));
    cmd.args(args).current_dir(dir);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const SMOKE_CONFIG: &str = r#"
[dataset]
source = "synthetic"
classes = 3
train_per_class = 16
test_per_class = 8
height = 8
width = 8

[federation]
clients = 4
rounds = 5
batch_size = 8
seed = 11

[output]
dir = "OUTDIR"
"#;

#[test]
fn run_produces_all_four_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "exp.toml", &SMOKE_CONFIG.replace("OUTDIR", "out"));
    let output = fedsim(&["run", "--config", config.to_str().unwrap()], dir.path(), &[]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for artifact in [
        "metrics.csv",
        "clients_final.json",
        "checkpoint.fspm",
        "config_resolved.toml",
    ] {
        assert!(dir.path().join("out").join(artifact).exists(), "missing {artifact}");
    }
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,global_test_loss,global_test_acc");
    assert_eq!(lines.len(), 6, "header plus one row per round");
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3);
        assert!(fields[1].parse::<f64>().unwrap().is_finite());
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
    }
    // The final-round record carries the per-client fields by name.
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/clients_final.json")).unwrap())
            .unwrap();
    for field in [
        "round",
        "sampled_clients",
        "client_train_loss",
        "client_train_acc",
        "global_test_loss",
        "global_test_acc",
    ] {
        assert!(json.get(field).is_some(), "clients_final.json missing {field}");
    }
    assert_eq!(json["round"], 5);
    assert_eq!(json["sampled_clients"].as_array().unwrap().len(), 4);
}

#[test]
fn identical_configs_give_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let c1 = write_config(dir.path(), "a.toml", &SMOKE_CONFIG.replace("OUTDIR", "out_a"));
    let c2 = write_config(dir.path(), "b.toml", &SMOKE_CONFIG.replace("OUTDIR", "out_b"));
    assert!(fedsim(&["run", "--config", c1.to_str().unwrap()], dir.path(), &[]).status.success());
    assert!(fedsim(&["run", "--config", c2.to_str().unwrap()], dir.path(), &[]).status.success());
    let csv_a = std::fs::read(dir.path().join("out_a/metrics.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("out_b/metrics.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let ckpt_a = std::fs::read(dir.path().join("out_a/checkpoint.fspm")).unwrap();
    let ckpt_b = std::fs::read(dir.path().join("out_b/checkpoint.fspm")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn resolved_config_reproduces_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "exp.toml", &SMOKE_CONFIG.replace("OUTDIR", "out"));
    assert!(fedsim(&["run", "--config", config.to_str().unwrap()], dir.path(), &[]).status.success());
    let out = dir.path().join("out");
    let first_csv = std::fs::read(out.join("metrics.csv")).unwrap();
    let first_ckpt = std::fs::read(out.join("checkpoint.fspm")).unwrap();
    let first_snapshot = std::fs::read(out.join("config_resolved.toml")).unwrap();

    let resolved = out.join("config_resolved.toml");
    let rerun = fedsim(&["run", "--config", resolved.to_str().unwrap()], dir.path(), &[]);
    assert!(rerun.status.success(), "{}", String::from_utf8_lossy(&rerun.stderr));
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), first_csv);
    assert_eq!(std::fs::read(out.join("checkpoint.fspm")).unwrap(), first_ckpt);
    assert_eq!(std::fs::read(out.join("config_resolved.toml")).unwrap(), first_snapshot);
}

#[test]
fn gen_synth_round_trips_and_respects_counts() {
    let dir = tempfile::tempdir().unwrap();
    let output = fedsim(
        &[
            "gen-synth",
            "--classes", "3",
            "--per-class", "12",
            "--test-per-class", "5",
            "--size", "8x8",
            "--seed", "21",
            "--out", "data",
        ],
        dir.path(),
        &[],
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let train = load_dataset(&dir.path().join("data/train.fsds")).unwrap();
    let test = load_dataset(&dir.path().join("data/test.fsds")).unwrap();
    assert_eq!(train.len(), 36);
    assert_eq!(test.len(), 15);
    for k in 0..3u16 {
        assert_eq!(train.labels().iter().filter(|&&l| l == k).count(), 12);
        assert_eq!(test.labels().iter().filter(|&&l| l == k).count(), 5);
    }

    // A different seed must change the file contents.
    assert!(fedsim(
        &["gen-synth", "--classes", "3", "--per-class", "12", "--size", "8x8",
          "--seed", "22", "--out", "data2"],
        dir.path(),
        &[],
    )
    .status
    .success());
    let a = std::fs::read(dir.path().join("data/train.fsds")).unwrap();
    let b = std::fs::read(dir.path().join("data2/train.fsds")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn eval_reproduces_the_final_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fedsim(
        &["gen-synth", "--classes", "4", "--per-class", "20", "--test-per-class", "8",
          "--size", "8x8", "--seed", "31", "--out", "data"],
        dir.path(),
        &[],
    )
    .status
    .success());
    let config = write_config(
        dir.path(),
        "exp.toml",
        r#"
[dataset]
source = "file"
train = "data/train.fsds"
test = "data/test.fsds"

[federation]
clients = 4
rounds = 4
batch_size = 16
seed = 3

[output]
dir = "out"
"#,
    );
    assert!(fedsim(&["run", "--config", config.to_str().unwrap()], dir.path(), &[]).status.success());
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let fields: Vec<&str> = last.split(',').collect();
    let (csv_loss, csv_acc): (f64, f64) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());

    let output = fedsim(
        &["eval", "--checkpoint", "out/checkpoint.fspm", "--dataset", "data/test.fsds",
          "--model", "mlp", "--stats-dataset", "data/train.fsds"],
        dir.path(),
        &[],
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let json: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!((json["loss"].as_f64().unwrap() - csv_loss).abs() < 1e-9);
    assert!((json["accuracy"].as_f64().unwrap() - csv_acc).abs() < 1e-9);
}

#[test]
fn eval_uniform_checkpoint_costs_ln_n() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fedsim(
        &["gen-synth", "--classes", "4", "--per-class", "6", "--size", "8x8",
          "--seed", "41", "--out", "data"],
        dir.path(),
        &[],
    )
    .status
    .success());
    let spec = ModelSpec::mlp(
        InputShape::Image { channels: 1, height: 8, width: 8 },
        64,
        4,
    )
    .unwrap();
    let layout = spec.layout();
    let zero = ModelParams { values: vec![0.0; layout.total_len()], layout };
    save_params(&zero, &dir.path().join("zero.fspm")).unwrap();
    let output = fedsim(
        &["eval", "--checkpoint", "zero.fspm", "--dataset", "data/test.fsds", "--model", "mlp"],
        dir.path(),
        &[],
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let json: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!((json["loss"].as_f64().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    // Uniform logits tie-break to class 0 on the balanced split.
    assert!((json["accuracy"].as_f64().unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn eval_rejects_empty_test_file_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = Dataset::new(1, 8, 8, vec![], vec![], vec!["only".into()]).unwrap();
    save_dataset(&empty, &dir.path().join("empty.fsds")).unwrap();
    let spec = ModelSpec::mlp(
        InputShape::Image { channels: 1, height: 8, width: 8 },
        64,
        1,
    )
    .unwrap();
    let layout = spec.layout();
    let zero = ModelParams { values: vec![0.0; layout.total_len()], layout };
    save_params(&zero, &dir.path().join("zero.fspm")).unwrap();
    let output = fedsim(
        &["eval", "--checkpoint", "zero.fspm", "--dataset", "empty.fsds", "--model", "mlp"],
        dir.path(),
        &[],
    );
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn eval_rejects_layout_mismatch_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fedsim(
        &["gen-synth", "--classes", "4", "--per-class", "6", "--size", "8x8",
          "--seed", "41", "--out", "data"],
        dir.path(),
        &[],
    )
    .status
    .success());
    // Checkpoint built for a different input size.
    let spec = ModelSpec::mlp(
        InputShape::Image { channels: 1, height: 16, width: 16 },
        64,
        4,
    )
    .unwrap();
    let layout = spec.layout();
    let zero = ModelParams { values: vec![0.0; layout.total_len()], layout };
    save_params(&zero, &dir.path().join("wrong.fspm")).unwrap();
    let output = fedsim(
        &["eval", "--checkpoint", "wrong.fspm", "--dataset", "data/test.fsds", "--model", "mlp"],
        dir.path(),
        &[],
    );
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn bad_config_exits_2_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.toml", "[dataset]\nsource = \"synthetic\"\nnot_a_field = true\n[output]\ndir = \"o\"\n");
    let output = fedsim(&["run", "--config", config.to_str().unwrap()], dir.path(), &[]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("not_a_field"), "diagnostics name the field: {stderr}");

    let missing = fedsim(&["run", "--config", "nope.toml"], dir.path(), &[]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn shard_partition_runs_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "exp.toml",
        r#"
[dataset]
source = "synthetic"
classes = 4
train_per_class = 16
test_per_class = 4
height = 8
width = 8

[partition]
scheme = "shards"
shards_per_client = 2

[federation]
clients = 4
rounds = 2
batch_size = 8
seed = 5

[output]
dir = "out"
"#,
    );
    let output = fedsim(&["run", "--config", config.to_str().unwrap()], dir.path(), &[]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
}
