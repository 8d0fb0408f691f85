use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdp_core::imaging::{self, ImageTensor};

fn cdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdp"))
        .args(args)
        .env_remove("CDP_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cdp(args);
    assert!(
        out.status.success(),
        "cdp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, persons: &str, per: &str) {
    ok(&["synth", "--out", s(dir), "--persons", persons, "--per-modality", per, "--seed", "7"]);
}

#[test]
fn synth_writes_images_and_manifests_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "20", "10");
    synth(&b, "20", "10");
    let ta = tree(&a);
    let images = ta.keys().filter(|p| p.extension().is_some_and(|e| e == "ppm" || e == "pgm")).count();
    assert_eq!(images, 400);
    assert!(ta.contains_key(Path::new("train.csv")) && ta.contains_key(Path::new("test.csv")));
    assert_eq!(ta, tree(&b));
    let train = fs::read_to_string(a.join("train.csv")).unwrap();
    let test = fs::read_to_string(a.join("test.csv")).unwrap();
    assert_eq!(train.lines().count() + test.lines().count(), 400);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(cdp(&["synth"]).status.code(), Some(2));
    assert_eq!(cdp(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(cdp(&["eval", "--bogus"]).status.code(), Some(2));
}

#[test]
fn spectra_writes_four_channels_and_a_sheet() {
    let tmp = tempfile::tempdir().unwrap();
    let data: Vec<u8> = (0..6 * 4 * 3).map(|i| (i * 11 % 256) as u8).collect();
    let rgb = ImageTensor::from_u8(6, 4, 3, data).unwrap();
    let input = tmp.path().join("in.ppm");
    imaging::write_pnm(&rgb, &input).unwrap();
    let out = tmp.path().join("out");
    ok(&["spectra", "--input", s(&input), "--out", s(&out)]);
    let files = tree(&out);
    assert_eq!(files.len(), 5);
    let gray = imaging::read_pnm(&out.join("spectrum_X.pgm")).unwrap();
    assert_eq!(gray, imaging::to_gray(&rgb).unwrap());
    let sheet = imaging::read_pnm(&out.join("contact_sheet.pgm")).unwrap();
    assert_eq!((sheet.height(), sheet.width(), sheet.channels()), (6, 16, 1));

    let flat = ImageTensor::filled(5, 3, &[90, 90, 90]).unwrap();
    imaging::write_pnm(&flat, &input).unwrap();
    ok(&["spectra", "--input", s(&input), "--out", s(&out)]);
    let outs: Vec<ImageTensor> = ["R", "G", "B", "X"]
        .iter()
        .map(|n| imaging::read_pnm(&out.join(format!("spectrum_{n}.pgm"))).unwrap())
        .collect();
    assert!(outs.windows(2).all(|w| w[0] == w[1]));

    let missing = cdp(&["spectra", "--input", s(&tmp.path().join("nope.ppm")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
}

fn train_args<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--train-manifest", s(data), "--out", s(out)];
    v.extend_from_slice(&["--epochs", "2", "--p", "2", "--k", "2", "--seed", "3"]);
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    synth(&data_dir, "6", "4");
    let data = data_dir.join("train.csv");
    let run = tmp.path().join("run");
    ok(&train_args(&data, &run, &[]));
    assert!(run.join("final.ckpt").exists());

    let off = tmp.path().join("off");
    ok(&train_args(&data, &off, &["--dhsm", "off"]));
    let log = fs::read_to_string(off.join("train_log.csv")).unwrap();
    for row in log.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[cells.len() - 4..], ["0.25", "0.25", "0.25", "0.25"]);
    }

    let bad = tmp.path().join("bad");
    let out = cdp(&["train", "--train-manifest", s(&data), "--out", s(&bad), "--epochs", "2", "--p", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("P >= 2"));

    let ck = run.join("final.ckpt");
    let test_csv = data_dir.join("test.csv");
    let eval = |out: &Path, extra: &[&str]| {
        let mut v = vec!["eval", "--checkpoint", s(&ck), "--test-manifest", s(&test_csv), "--out", s(out)];
        v.extend_from_slice(extra);
        ok(&v);
        fs::read_to_string(out.join("report.csv")).unwrap()
    };
    let csv = eval(&tmp.path().join("e1"), &["--direction", "both", "--trials", "10", "--gallery-mode", "single-shot"]);
    let lines: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("mean,")).count(), 2);
    assert_eq!(lines.iter().filter(|l| !l.starts_with("mean,")).count(), 20);
    assert!(tmp.path().join("e1/scatter.svg").exists());

    let a = eval(&tmp.path().join("e2"), &["--trials", "1", "--gallery-mode", "all"]);
    let b = eval(&tmp.path().join("e3"), &["--trials", "1", "--gallery-mode", "all"]);
    assert_eq!(a, b);

    let missing = tmp.path().join("missing.ckpt");
    let out = cdp(&["eval", "--checkpoint", s(&missing), "--test-manifest", s(&test_csv), "--out", s(&tmp.path().join("e4"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}

#[test]
fn config_files_are_validated_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    let run = |text: &str| {
        fs::write(&cfg, text).unwrap();
        cdp(&["train", "--train-manifest", "does-not-exist.csv", "--out", s(&tmp.path().join("o")), "--config", s(&cfg)])
    };
    let out = run(r#"{"version": 1, "train": {"epochs": 3, "learning_rate": 1}}"#);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = run(r#"{"version": 9}"#);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 9"));
    let out = run(r#"{"version": 1, "train": {"epochs": 0}}"#);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
    // a valid config gets as far as the missing manifest
    let out = run(r#"{"version": 1, "train": {"epochs": 3}}"#);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does-not-exist.csv"));
    assert!(!tmp.path().join("o").exists());
}
