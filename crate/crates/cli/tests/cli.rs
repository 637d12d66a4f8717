use std::path::Path;
use std::process::{Command, Output};

const DESK: &str = include_str!("../../core/presets/desk.json");

fn relush(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relush"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn cost_compare_reports_savings() {
    let dir = tempfile::tempdir().unwrap();
    let o = relush(dir.path(), &["cost", "--config", "cifar10", "--variant", "uniform32", "--compare", "original"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("86 -> 86 rounds"), "{text}");
    assert!(dir.path().join("cifar10_uniform32_cost.json").exists());
}

#[test]
fn cost_json_parses() {
    let dir = tempfile::tempdir().unwrap();
    let o = relush(dir.path(), &["cost", "--config", "svhn", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total_rounds"], 26);
}

#[test]
fn count_prints_first_layer_pair() {
    let dir = tempfile::tempdir().unwrap();
    let o = relush(dir.path(), &["count", "--config", "cifar10", "--variant", "uniform3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("(121,121)"));
    let csv = std::fs::read_to_string(dir.path().join("uniform3_counts.csv")).unwrap();
    assert!(csv.starts_with("layer,channels,"));
}

#[test]
fn simulate_passes_both_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = relush(dir.path(), &["simulate", "--config", "desk", "--variant", "uniform4", "--n-images", "2", "--random"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.contains("plaintext equivalence: PASS"));
    assert!(text.contains("ledger reconciliation: PASS"));
    assert!(text.contains("Comm (MB)"));
    let ledger = std::fs::read_to_string(dir.path().join("desk_uniform4_ledger.csv")).unwrap();
    assert!(ledger.starts_with("round,sender,receiver,bytes,tag"));
}

#[test]
fn train_cluster_and_simulate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = relush(d, &["train", "--config", "desk", "--epochs", "1", "--limit", "200", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = d.join("desk_original.rlsh");
    assert!(ckpt.exists() && d.join("desk_original.rlsh.meta.json").exists());
    let ckpt = ckpt.to_str().unwrap();

    let refused = relush(d, &["cluster", "--config", "desk", "--checkpoint", ckpt, "--layer", "relu1", "--k", "4", "--split", "test"]);
    assert_eq!(refused.status.code(), Some(3));

    let o = relush(d, &["cluster", "--config", "desk", "--checkpoint", ckpt, "--variant", "adaptive", "--limit", "200"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("desk_adaptive_relu1.json").exists());
    assert!(d.join("desk_adaptive_relu1_maps").is_dir());

    let groups = d.to_str().unwrap();
    let o = relush(
        d,
        &["train", "--config", "desk", "--variant", "adaptive", "--epochs", "1", "--limit", "200", "--checkpoint", ckpt, "--groups-dir", groups],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let adaptive = d.join("desk_adaptive.rlsh");
    let o = relush(
        d,
        &["simulate", "--config", "desk", "--checkpoint", adaptive.to_str().unwrap(), "--groups-dir", groups, "--limit", "2", "--n-images", "2"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let o = relush(d, &["tv", "--config", "desk", "--checkpoint", ckpt, "--limit", "20"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("depth,layer,tv\n1,relu1,"));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let o = relush(d, &["train", "--config", "desk", "--epochs", "1", "--limit", "100", "--seed", "9"]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["desk_original.rlsh", "desk_original_metrics.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_config_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = relush(dir.path(), &["cost", "--config", "no_such_config.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = DESK.replacen("\"lr\": 0.02", "\"lr\": 1e300", 1);
    assert_ne!(text, DESK);
    let path = dir.path().join("desk_hot.json");
    std::fs::write(&path, text).unwrap();
    let o = relush(dir.path(), &["train", "--config", path.to_str().unwrap(), "--epochs", "2", "--limit", "100"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_csv_splits() {
    let dir = tempfile::tempdir().unwrap();
    let o = relush(dir.path(), &["synth", "--config", "desk"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("desk_train.csv").exists());
    assert!(dir.path().join("desk_test.csv").exists());
}
