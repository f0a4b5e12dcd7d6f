use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const BIN: &str = env!("CARGO_BIN_EXE_osgate");

fn osgate(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("OSGATE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "synth",
        "--out",
        s(out),
        "--train-per-class",
        "200",
        "--val-per-class",
        "100",
        "--test-per-class",
        "100",
        "--ood",
        "60",
        "--background",
        "40",
        "--dim",
        "8",
    ];
    args.extend_from_slice(extra);
    osgate(&args)
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.push((entry.strip_prefix(dir).unwrap().display().to_string(), fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn synth_writes_four_splits_deterministically() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    assert!(synth(a.path(), &["--seed", "9"]).status.success());
    assert!(synth(b.path(), &["--seed", "9"]).status.success());
    for split in ["train", "val", "closed_test", "open_test"] {
        assert!(a.path().join(split).join("manifest.json").exists());
    }
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

#[test]
fn negative_counts_are_usage_errors_before_writing() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("bench");
    let r = synth(&out, &["--ood", "-5"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"background_count": -3}"#).unwrap();
    let r = osgate(&["synth", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn full_pipeline_through_subcommands() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, &[]).status.success());
    let art = dir.path().join("art");

    let fit = osgate(&["fit", "--train", s(&data.join("train")), "--k", "2", "--out", s(&art)]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let stdout = String::from_utf8_lossy(&fit.stdout);
    assert!(stdout.contains("class 0") && stdout.contains("class 1"), "{stdout}");
    let models = art.join("models.json");
    let first = fs::read(&models).unwrap();
    assert!(osgate(&["fit", "--train", s(&data.join("train")), "--k", "2", "--out", s(&art)]).status.success());
    assert_eq!(first, fs::read(&models).unwrap());

    let cal = osgate(&["calibrate", "--val", s(&data.join("val")), "--models", s(&models), "--out", s(&art)]);
    assert!(cal.status.success(), "{}", String::from_utf8_lossy(&cal.stderr));
    let stdout = String::from_utf8_lossy(&cal.stdout);
    assert!(stdout.contains("T_model") && stdout.contains("T_gmm"), "{stdout}");

    let rep = dir.path().join("rep");
    let eval = osgate(&[
        "evaluate",
        "--closed-test",
        s(&data.join("closed_test")),
        "--open-test",
        s(&data.join("open_test")),
        "--models",
        s(&models),
        "--calibration",
        s(&art.join("calibration.json")),
        "--out",
        s(&rep),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 28);
    assert!(csv.starts_with("mode,score,auroc,auroc_bd,tpr_at_5,tpr_at_10,tpr_at_20,cs_map,os_map"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["reports"].as_array().unwrap().len(), 28);

    let one = dir.path().join("one");
    let eval = osgate(&[
        "evaluate",
        "--closed-test",
        s(&data.join("closed_test")),
        "--open-test",
        s(&data.join("open_test")),
        "--models",
        s(&models),
        "--calibration",
        s(&art.join("calibration.json")),
        "--modes",
        "raw",
        "--scores",
        "softmax",
        "--out",
        s(&one),
    ]);
    assert!(eval.status.success());
    assert_eq!(fs::read_to_string(one.join("report.csv")).unwrap().lines().count(), 2);
}

#[test]
fn run_is_idempotent() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, &[]).status.success());
    let run = |out: &Path| {
        osgate(&[
            "run",
            "--train",
            s(&data.join("train")),
            "--val",
            s(&data.join("val")),
            "--closed-test",
            s(&data.join("closed_test")),
            "--open-test",
            s(&data.join("open_test")),
            "--out",
            s(out),
        ])
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&a).status.success());
    assert!(run(&b).status.success());
    assert_eq!(read_all(&a), read_all(&b));
}

#[test]
fn leakage_is_flagged() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, &[]).status.success());
    let train = data.join("train");
    assert!(osgate(&["fit", "--train", s(&train), "--out", s(dir.path())]).status.success());
    let r = osgate(&["calibrate", "--val", s(&train), "--models", s(&dir.path().join("models.json")), "--out", s(dir.path())]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("identical to the training split"));
    let cal: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("calibration.json")).unwrap()).unwrap();
    assert_eq!(cal["leakage_warning"], true);
}

#[test]
fn missing_models_file_is_reported() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, &[]).status.success());
    let missing = dir.path().join("nope.json");
    let r = osgate(&["calibrate", "--val", s(&data.join("val")), "--models", s(&missing), "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.json"));
}

#[test]
fn fit_rejects_train_split_missing_a_class() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let r = osgate(&["synth", "--out", s(&data), "--classes", "3", "--train-per-class", "50", "--dim", "8"]);
    assert!(r.status.success());
    // drop every ground-truth row of class 2 by rewriting the container
    let train = data.join("train");
    let gt = fs::read(train.join("groundtruth.bin")).unwrap();
    let (header, rows) = gt.split_at(16);
    let kept: Vec<&[u8]> = rows.chunks_exact(24).filter(|r| i32::from_le_bytes(r[4..8].try_into().unwrap()) != 2).collect();
    let mut out = header[..8].to_vec();
    out.extend_from_slice(&(kept.len() as u64).to_le_bytes());
    kept.iter().for_each(|r| out.extend_from_slice(r));
    fs::write(train.join("groundtruth.bin"), out).unwrap();
    let r = osgate(&["fit", "--train", s(&train), "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("class_2"));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let dir = tempdir().unwrap();
    let r = osgate(&["fit", "--train", s(dir.path()), "--k", "7", "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
    let r = osgate(&["evaluate", "--modes", "sideways"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn inspect_prints_counts() {
    let dir = tempdir().unwrap();
    assert!(synth(dir.path(), &[]).status.success());
    let r = osgate(&["inspect", s(&dir.path().join("open_test"))]);
    assert!(r.status.success());
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["detections"], 200 + 60 + 40);
    assert_eq!(v["ood_ground_truth"], 60);
}
