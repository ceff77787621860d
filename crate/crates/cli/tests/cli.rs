use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[encoder]\nimage_size = 32\nembed_dim = 32\n\n[trainer]\nepochs = 1\nlearning_rate = 0.003\n\n[data]\nepisodes_per_class = 2\n";

fn semtrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semtrack"))
        .current_dir(dir)
        .env_remove("SEMTRACK_OUT_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&semtrack(dir.path(), &["gen-data", "--out", "data", "--config", "small.toml"]));
    dir
}

#[test]
fn zero_folds_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = semtrack(dir.path(), &["gen-data", "--out", "data", "--folds", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn train_eval_round_trip() {
    let dir = workspace();
    let p = dir.path();
    assert!(p.join("data/folds/fold_2.manifest").is_file());
    let stdout = ok(&semtrack(
        p,
        &["train", "--config", "small.toml", "--fold", "0", "--out-checkpoint", "ck/a.safetensors"],
    ));
    assert!(stdout.contains("frozen parameters:"));
    assert!(stdout.contains("trainable parameters: 2048"));
    let curve = std::fs::read_to_string(p.join("ck/a.loss.csv")).unwrap();
    assert!(curve.starts_with("step,total,bce,dice\n"));

    let stdout = ok(&semtrack(
        p,
        &["eval", "--config", "small.toml", "--fold", "0", "--checkpoint", "ck/a.safetensors", "--prompt", "point", "--out", "ev"],
    ));
    assert!(stdout.contains("mIoU"));
    let csv = std::fs::read_to_string(p.join("ev/per_class_iou.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 1);
    let audit = std::fs::read_to_string(p.join("ev/class_audit.txt")).unwrap();
    let fold = std::fs::read_to_string(p.join("data/folds/fold_0.manifest")).unwrap();
    let test_line = fold.lines().find(|l| l.starts_with("test_classes=")).unwrap();
    for c in audit.lines() {
        assert!(test_line.split('=').nth(1).unwrap().split(',').any(|t| t == c));
    }
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = workspace();
    let p = dir.path();
    ok(&semtrack(p, &["train", "--config", "small.toml", "--fold", "1", "--out-checkpoint", "a.safetensors"]));
    std::fs::write(p.join("wide.toml"), SMALL.replace("embed_dim = 32", "embed_dim = 48")).unwrap();
    let out = semtrack(p, &["eval", "--config", "wide.toml", "--fold", "1", "--checkpoint", "a.safetensors"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn analyze_needs_a_checkpoint_for_comparisons() {
    let dir = workspace();
    let out = semtrack(dir.path(), &["analyze", "--config", "small.toml", "--mode", "probe"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn annotate_writes_one_mask_per_pair() {
    let dir = workspace();
    let p = dir.path();
    let ep = p.join("data/episodes/class_03/episode_000");
    std::fs::create_dir_all(p.join("refs")).unwrap();
    std::fs::create_dir_all(p.join("targets")).unwrap();
    for (name, k) in [("a", 0), ("b", 1)] {
        std::fs::copy(ep.join(format!("sample_{k}.png")), p.join(format!("refs/{name}.png"))).unwrap();
        std::fs::copy(ep.join(format!("sample_{k}_mask.png")), p.join(format!("refs/{name}_mask.png"))).unwrap();
    }
    for k in 2..5 {
        std::fs::copy(ep.join(format!("sample_{k}.png")), p.join(format!("targets/t{k}.png"))).unwrap();
    }
    let stdout = ok(&semtrack(
        p,
        &["annotate", "--config", "small.toml", "--refs", "refs", "--targets", "targets", "--out", "ann", "--cache", "on"],
    ));
    assert!(stdout.contains("images/s"));
    for k in 2..5 {
        for r in ["a", "b"] {
            assert!(p.join(format!("ann/t{k}__{r}.png")).is_file());
        }
    }
}

#[test]
fn output_root_variable_relocates_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_semtrack"))
        .current_dir(dir.path())
        .env("SEMTRACK_OUT_ROOT", &root)
        .args(["gen-data", "--out", "data", "--config", "small.toml"])
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("data/folds/fold_0.manifest").is_file());
    assert!(!dir.path().join("data").exists());
}
