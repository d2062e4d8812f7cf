use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use inclg_core::data::{load_landmarks, FileList};
use tempfile::tempdir;

fn inclg(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_inclg")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "inclg {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_resume_test_pipeline() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    inclg(&["synth", "--out", p(&data), "--images", "6", "--masks", "3"]);
    let cfg = data.join("config.txt");
    let run = dir.path().join("run");
    let set_out = format!("output_dir={}", run.display());
    inclg(&["train", "--config", p(&cfg), "--set", "max_iterations=2", "--set", "checkpoint_interval=1", "--set", &set_out]);
    for f in ["iter_000001.ckpt", "iter_000002.ckpt", "final.ckpt", "train_log.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    inclg(&["train", "--config", p(&cfg), "--set", "max_iterations=3", "--set", &set_out, "--resume", p(&run.join("iter_000002.ckpt"))]);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("3,"));

    let out = dir.path().join("test_out");
    let stdout = inclg(&["test", "--config", p(&cfg), "--checkpoint", p(&run.join("final.ckpt")), "--out", p(&out)]).stdout;
    let summary: serde_json::Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(summary["written"], 6);
    assert_eq!(summary["skipped"], 0);
    let pngs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
    assert_eq!(pngs, 6);
    load_landmarks(&out.join("00000.txt")).unwrap();
}

#[test]
fn tune_writes_trials_and_best_config() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    inclg(&["synth", "--out", p(&data), "--images", "4", "--masks", "2"]);
    let run = dir.path().join("tune");
    let set_out = format!("output_dir={}", run.display());
    inclg(&[
        "tune", "--config", p(&data.join("config.txt")), "--trials", "2", "--trial-iterations", "1",
        "--set", "search_batch_size=4", "--set", &set_out,
    ]);
    let trials: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("trials.json")).unwrap()).unwrap();
    assert_eq!(trials.as_array().unwrap().len(), 2);
    let best = fs::read_to_string(run.join("best_config.txt")).unwrap();
    assert!(best.contains("landmark_weight"));
}

#[test]
fn flist_and_split_masks() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    inclg(&["synth", "--out", p(&data), "--images", "4", "--masks", "30"]);
    let list = dir.path().join("masks.flist");
    let stdout = String::from_utf8(inclg(&["flist", "--root", p(&data.join("masks")), "--out", p(&list)]).stdout).unwrap();
    assert!(stdout.starts_with("30 files"));
    assert_eq!(FileList::read(&list, None).unwrap().len(), 30);

    let split = dir.path().join("split");
    let out = Command::new(env!("CARGO_BIN_EXE_inclg"))
        .args(["split-masks", "--masks", p(&list), "--out", p(&split), "--train", "1000", "--val", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("need 1001"));

    inclg(&["split-masks", "--masks", p(&list), "--out", p(&split), "--train", "1", "--val", "1", "--seed", "4"]);
    assert_eq!(FileList::read(&split.join("train.flist"), None).unwrap().len(), 3);
    assert_eq!(FileList::read(&split.join("val.flist"), None).unwrap().len(), 3);
    for g in ["G1", "G2", "G3"] {
        assert_eq!(FileList::read(&split.join(format!("{g}_train.flist")), None).unwrap().len(), 1);
    }
}

#[test]
fn bad_config_is_reported() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "lr: 1e-4\nwarp_speed: 9\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_inclg")).args(["train", "--config", p(&cfg)]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_speed"));
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/face256.txt");
    let c = inclg::commands::load_config(&path, &["batch_size=8".into()]).unwrap();
    assert_eq!(c.batch_size, 8);
    assert_eq!(c.weights.style, 10.0);
    assert_eq!(c.model_config().image_size, 256);
    assert!(c.paths.train_images.unwrap().ends_with("data/train_images.flist"));
}
