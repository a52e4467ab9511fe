use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seglora::checkpoint::{Checkpoint, CheckpointKind};

fn seglora(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seglora"))
        .args(args)
        .env("SEGLORA_OUT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = seglora(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

/// Eight 64px vessel pairs under `<root>/data/vessel`.
fn small_pool(root: &Path) -> PathBuf {
    ok(root, &["generate", "--task", "vessel", "--n", "8", "--size", "64", "--seed", "3"]);
    root.join("data/vessel")
}

#[test]
fn generate_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    for out in ["a", "b"] {
        let dir = r.join(out);
        ok(r, &["generate", "--task", "disc", "--n", "64", "--seed", "7", "--size", "64", "--out", dir.to_str().unwrap()]);
    }
    for sub in ["images", "masks"] {
        let a = files(&r.join("a").join(sub));
        assert_eq!(a.len(), 64);
        assert_eq!(a, files(&r.join("b").join(sub)));
    }
    assert!(r.join("a/config.toml").is_file());
    let mask = image::open(r.join("a/masks/00000.png")).unwrap().to_luma8();
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
}

#[test]
fn usage_and_input_errors() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    // Missing required flag is a usage error.
    assert_eq!(seglora(r, &["generate"]).status.code(), Some(2));

    small_pool(r);
    let again = seglora(r, &["generate", "--task", "vessel", "--n", "8", "--size", "64"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("not empty"));
    ok(r, &["generate", "--task", "vessel", "--n", "8", "--size", "64", "--force"]);

    let cfg = r.join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = seglora(r, &["train", "--config", cfg.to_str().unwrap(), "--data", "x", "--desk", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let missing = seglora(r, &["eval", "--data", "nowhere", "--checkpoint", "nope.sl2l"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn train_eval_merge_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let data = small_pool(r);
    let data = data.to_str().unwrap();

    let stdout = ok(r, &["train", "--data", data, "--desk", "4", "--rank", "8"]);
    let last = stdout.lines().last().unwrap();
    let frac: f64 = last.strip_prefix("trainable_fraction=").unwrap().parse().unwrap();
    assert!(frac > 0.0 && frac < 0.05, "{last}");
    let run = r.join("train-vessel-r8-abl-0");
    for f in ["adapter.sl2l", "steps.csv", "config.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("steps.csv")).unwrap().lines().count(), 5);

    let ckpt = run.join("adapter.sl2l");
    ok(r, &["eval", "--data", data, "--checkpoint", ckpt.to_str().unwrap(), "--dump-overlays"]);
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 8);
    // Two held-out samples, each evaluated under all seven modes.
    assert_eq!(fs::read_dir(run.join("overlays")).unwrap().count(), 14);

    let merged = r.join("merged.sl2l");
    let stdout = ok(r, &["merge", "--checkpoint", ckpt.to_str().unwrap(), "--out", merged.to_str().unwrap()]);
    assert!(stdout.starts_with("merged "));
    let full = Checkpoint::load(&merged).unwrap();
    assert_eq!(full.kind, CheckpointKind::Full);
    assert!(full.meta.lora.is_none());
}

#[test]
fn decoder_only_training_saves_decoder_tensors() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let data = small_pool(r);
    ok(r, &["train", "--data", data.to_str().unwrap(), "--desk", "2", "--rank", "4", "--ablation", "abl-5"]);
    let ckpt = Checkpoint::load(&r.join("train-vessel-r4-abl-5/adapter.sl2l")).unwrap();
    assert_eq!(ckpt.meta.note, "abl-5");
    assert!(!ckpt.tensors.is_empty());
    assert!(ckpt.tensors.iter().all(|(name, _, _)| name.starts_with("decoder.")));
}

#[test]
fn sweep_is_reproducible_and_reuses_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let data = small_pool(r);
    let args = [
        "sweep", "--data", data.to_str().unwrap(), "--desk", "2",
        "--ranks", "2,4", "--ablations", "abl-0,abl-5", "--modes", "eval-0,eval-5",
    ];
    assert_eq!(seglora(r, &args).status.code(), Some(1));

    let mut train = args.to_vec();
    train.push("--train-missing");
    ok(r, &train);
    let first = fs::read_to_string(r.join("sweep-vessel.csv")).unwrap();
    assert_eq!(first.lines().count(), 9);
    assert_eq!(fs::read_dir(r.join("checkpoints/vessel")).unwrap().count(), 4);
    assert!(r.join("sweep-vessel.toml").is_file());

    ok(r, &args);
    assert_eq!(fs::read_to_string(r.join("sweep-vessel.csv")).unwrap(), first);
}
