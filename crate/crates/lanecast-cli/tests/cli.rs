//! Integration tests for the pipeline binary: determinism of dataset
//! generation, checkpoint validity without training, evaluation of an exact
//! checkpoint, and flag handling.

use std::path::Path;
use std::process::Command;

use lanecast::dataset::{load_samples, save_samples};
use lanecast::model::Model;

fn run(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lanecast"))
        .args(args)
        .output()
        .expect("spawning the pipeline binary")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "lanecast {:?} failed:\n{}{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Sorted (relative path, contents) pairs for every file under `dir`.
fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_synth_same_seed_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["gen-synth", "--out", &s(&a), "--seed", "5"]);
    run_ok(&["gen-synth", "--out", &s(&b), "--seed", "5"]);
    let (fa, fb) = (dir_contents(&a), dir_contents(&b));
    assert!(!fa.is_empty());
    assert_eq!(
        fa.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        fb.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()
    );
    for ((na, ba), (_, bb)) in fa.iter().zip(&fb) {
        assert_eq!(ba, bb, "{na} differs between identical-seed runs");
    }
}

/// Generates and preprocesses a small dataset, then trains for zero epochs so
/// the checkpoint holds the untouched random initialization.
fn prep_and_init_ckpt(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let raw = dir.join("raw");
    let prep = dir.join("prep");
    let ckpt = dir.join("init.ckpt");
    run_ok(&["gen-synth", "--out", &s(&raw), "--seed", "9"]);
    run_ok(&[
        "preprocess",
        "--in",
        &s(&raw),
        "--out",
        &s(&prep),
        "--no-raster",
        "--rotation-step",
        "90",
        "--rotation-count",
        "4",
        "--turn-upsample",
        "2",
    ]);
    run_ok(&[
        "train",
        "--data",
        &s(&prep),
        "--mode",
        "ar",
        "--map",
        "none",
        "--epochs",
        "0",
        "--out",
        &s(&ckpt),
        "--d-model",
        "16",
        "--n-heads",
        "2",
        "--enc-layers",
        "1",
        "--dec-layers",
        "1",
        "--ff-dim",
        "32",
        "--seed",
        "9",
    ]);
    (prep, ckpt)
}

#[test]
fn train_zero_epochs_writes_valid_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (prep, ckpt) = prep_and_init_ckpt(tmp.path());
    let model = Model::load(&ckpt).expect("untrained checkpoint loads");
    let samples = load_samples(&prep.join("test.samples.json")).unwrap();
    assert!(!samples.is_empty());
    // The freshly initialized model must already produce finite predictions.
    let out = model.predict(&samples[0]).unwrap();
    assert!(out
        .selected_rel()
        .iter()
        .all(|p| p.x.is_finite() && p.y.is_finite()));
}

#[test]
fn eval_reports_zero_error_when_checkpoint_predicts_the_future_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let (prep, ckpt) = prep_and_init_ckpt(tmp.path());
    // Rewrite each test label to the model's own output, making the
    // checkpoint a perfect predictor of this dataset.
    let model = Model::load(&ckpt).unwrap();
    let path = prep.join("test.samples.json");
    let mut samples = load_samples(&path).unwrap();
    for sample in &mut samples {
        sample.future_rel = model.predict(sample).unwrap().selected_rel().to_vec();
    }
    save_samples(&samples, &path).unwrap();

    let report = tmp.path().join("report.csv");
    run_ok(&[
        "eval",
        "--data",
        &s(&prep),
        "--ckpt",
        &s(&ckpt),
        "--report",
        &s(&report),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    let mut cells = 0;
    for line in text.lines().skip(1) {
        for cell in line.split(',').skip(2) {
            assert_eq!(cell, "0.0000", "non-zero error in report line: {line}");
            cells += 1;
        }
    }
    assert_eq!(cells, 12, "expected 6 horizons x 2 rows of metrics");
}

#[test]
fn unknown_flags_are_errors() {
    let out = run(&["gen-synth", "--bogus-flag", "1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--bogus-flag"), "stderr: {err}");
}
