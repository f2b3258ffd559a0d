use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn glyphscope(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyphscope"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn glyphscope")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = glyphscope(args, cwd);
    assert!(
        out.status.success(),
        "glyphscope {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], cwd: &Path) -> String {
    let out = glyphscope(args, cwd);
    assert!(!out.status.success(), "glyphscope {args:?} should have failed");
    assert_eq!(out.status.code(), Some(1));
    String::from_utf8(out.stderr).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A tiny synthetic dataset plus a config training it for one epoch.
fn small_run(dir: &Path) {
    ok(&["synth", "--n", "10", "--seed", "4", "--out", "data"], dir);
    fs::write(dir.join("data/Normal/broken.png"), b"not a png").unwrap();
    fs::write(
        dir.join("run.json"),
        r#"{"data": {"root": "data"}, "train": {"epochs": 1, "batch_size": 16}}"#,
    )
    .unwrap();
}

#[test]
fn synth_writes_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--n", "4", "--seed", "1", "--out", "g"], dir.path());
    for class in ["Normal", "Reversed", "Corrected"] {
        let pngs = fs::read_dir(dir.path().join("g").join(class)).unwrap().count();
        assert_eq!(pngs, 4, "{class}");
    }
}

#[test]
fn cv_writes_reports_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    let stdout = ok(
        &[
            "cv", "--config", "run.json", "--folds", "2", "--seed", "5", "--out", "cv",
        ],
        d,
    );
    assert!(stdout.contains("best fold:"));

    let csv = fs::read_to_string(d.join("cv/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fold,precision,recall,f1,accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));

    let metrics = json(&d.join("cv/metrics.json"));
    assert_eq!(metrics["averaging"], "macro");
    assert_eq!(metrics["splits"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["splits"][0]["per_class"].as_array().unwrap().len(), 3);
    assert!(metrics["mean"]["accuracy"].is_number());

    let skipped = json(&d.join("cv/skipped.json"));
    let skipped = skipped.as_array().unwrap();
    assert_eq!(skipped.len(), 1);
    assert!(skipped[0]["path"].as_str().unwrap().ends_with("broken.png"));
    assert!(!skipped[0]["error"].as_str().unwrap().is_empty());

    let manifest = json(&d.join("cv/run_manifest.json"));
    assert_eq!(manifest["command"], "cv");
    assert_eq!(manifest["seeds"]["train"], 5);
    assert_eq!(manifest["seeds"]["augment"], 5);
    assert_eq!(manifest["config"]["train"]["k_folds"], 2);

    for fold in 1..=2 {
        assert!(d.join(format!("cv/folds/fold{fold}/best.ckpt")).is_file());
    }
    let confusion = json(&d.join("cv/confusion.json"));
    let total: u64 = confusion["splits"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|s| {
            s["counts"]
                .as_array()
                .unwrap()
                .iter()
                .flat_map(|r| r.as_array().unwrap().iter())
        })
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 30);
}

#[test]
fn train_eval_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    ok(&["train", "--config", "run.json", "--out", "tr"], d);
    assert!(d.join("tr/best.ckpt").is_file());
    assert!(fs::read_to_string(d.join("tr/metrics.csv"))
        .unwrap()
        .contains("\nholdout,"));

    ok(
        &["eval", "--checkpoint", "tr/best.ckpt", "--data", "data", "--out", "ev"],
        d,
    );
    let report = json(&d.join("ev/metrics.json"));
    assert_eq!(report["report"]["per_class"].as_array().unwrap().len(), 3);
    assert_eq!(json(&d.join("ev/skipped.json")).as_array().unwrap().len(), 1);

    let stdout = ok(
        &[
            "explain",
            "--checkpoint",
            "tr/best.ckpt",
            "--input",
            "data/Reversed",
            "--target",
            "1",
            "--scale",
            "2",
            "--out",
            "cam",
        ],
        d,
    );
    assert!(stdout.contains("10 of 10 images explained"), "{stdout}");
    let side = json(&d.join("cam/00000_cam.json"));
    assert_eq!(side["target_class"], 1);
    let p: f64 = side["probabilities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((p - 1.0).abs() < 1e-5);
    assert!(side["raw_max"].as_f64().unwrap() >= 0.0);
    let png = glyphscope::data::decode_image(&fs::read(d.join("cam/00000_cam.png")).unwrap()).unwrap();
    assert_eq!((png.width, png.height), (64, 64));

    // corrupt inputs are skipped; a directory with nothing readable is an error
    ok(
        &[
            "explain",
            "--checkpoint",
            "tr/best.ckpt",
            "--input",
            "data/Normal",
            "--out",
            "cam2",
        ],
        d,
    );
    assert!(d.join("cam2/00000_cam.png").is_file());
    let empty = d.join("junk");
    fs::create_dir(&empty).unwrap();
    fs::write(empty.join("a.png"), b"junk").unwrap();
    let err = fails(&["explain", "--checkpoint", "tr/best.ckpt", "--input", "junk"], d);
    assert!(err.contains("no readable PNG"), "{err}");
    let err = fails(
        &[
            "explain",
            "--checkpoint",
            "tr/best.ckpt",
            "--input",
            "data",
            "--target",
            "3",
        ],
        d,
    );
    assert!(err.contains("out of range"), "{err}");
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"train": {"lr": "fast"}}"#).unwrap();
    let err = fails(&["cv", "--config", "c.json"], dir.path());
    assert!(err.starts_with("error: config"), "{err}");
    assert!(err.contains("train.lr"), "{err}");
}

#[test]
fn missing_class_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "5", "--out", "data"], d);
    fs::remove_dir_all(d.join("data/Corrected")).unwrap();
    fs::write(d.join("c.json"), r#"{"data": {"root": "data"}}"#).unwrap();
    let err = fails(&["cv", "--config", "c.json"], d);
    assert!(err.contains("Corrected"), "{err}");
}

#[test]
fn wrong_magic_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("x.ckpt"), b"definitely not a checkpoint").unwrap();
    let err = fails(&["explain", "--checkpoint", "x.ckpt", "--input", "x.ckpt"], d);
    assert!(err.contains("checkpoint"), "{err}");
}
