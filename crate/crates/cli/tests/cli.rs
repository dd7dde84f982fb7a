use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use milboundary_cli::{dispatch, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

const TINY: &str = r#"{
  "corpus": { "size": 4, "scene": { "image_size": 32 } },
  "net": { "input_width": 32, "input_height": 32 },
  "wsbdn": { "optim": { "total_steps": 6 } },
  "student": { "optim": { "total_steps": 6 } },
  "pseudo": { "msf": { "scales": [1.0, 1.25] } },
  "eval": { "thresholds": 19 }
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_milboundary"))
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["milboundary"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["gen", "--out", "/tmp/x", "--bogus"]), EXIT_USAGE);
    assert_eq!(run(&["gen"]), EXIT_USAGE);
    assert_eq!(run(&[]), EXIT_USAGE);
}

#[test]
fn config_errors_exit_3_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"wsbdn": {"lamda": 0.5}}"#).unwrap();
    let out = bin().args(["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: config: key=wsbdn.lamda"), "{err}");

    fs::write(&cfg, r#"{"segments": {"gamma": 0.5}}"#).unwrap();
    let out = bin().args(["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("o2"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8(out.stderr).unwrap().contains("key=segments.gamma"));

    let out = bin()
        .args(["gen", "--out", s(&tmp.path().join("o3"))])
        .env("MILBOUNDARY_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn help_documents_defaults() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"lambda\": 0.25"), "{text}");
    assert!(text.contains("train-wsbdn"));
}

#[test]
fn gen_is_deterministic_and_write_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&["gen", "--config", s(&cfg), "--out", s(&a)]), EXIT_OK);
    assert_eq!(run(&["gen", "--config", s(&cfg), "--out", s(&b), "--threads", "2"]), EXIT_OK);
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("manifest.json").is_file() && a.join("config.json").is_file());
    assert!(a.join("s0003.img.c2.pgm").is_file() && a.join("s0000.cam.c2.pfm").is_file());
    // Existing output is never overwritten.
    assert_eq!(run(&["gen", "--config", s(&cfg), "--out", s(&a)]), EXIT_FAILURE);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let ev = tmp.path().join("ev");
    assert_eq!(run(&["gen", "--config", s(&cfg), "--out", s(&data)]), EXIT_OK);
    assert_eq!(run(&["eval", "--pred", s(&data), "--gt", s(&data), "--tol", "2", "--out", s(&ev)]), EXIT_OK);
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let mean = metrics.lines().find(|l| l.starts_with("mean,")).unwrap();
    assert!(mean.starts_with("mean,1.000000,"), "{metrics}");
    assert!(ev.join("pr_0.csv").is_file() && ev.join("pr_agnostic.svg").is_file());
}

#[test]
fn full_pipeline_on_a_tiny_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = |n: &str| tmp.path().join(n);
    assert_eq!(run(&["gen", "--config", s(&cfg), "--out", s(&d("data"))]), EXIT_OK);
    assert_eq!(run(&["seeds", "--data", s(&d("data")), "--out", s(&d("seeds"))]), EXIT_OK);
    assert_eq!(
        run(&["segments-debug", "--data", s(&d("data")), "--seeds", s(&d("seeds")), "--sample", "s0001", "--out", s(&d("segs"))]),
        EXIT_OK
    );
    let segs = fs::read_to_string(d("segs").join("segments_s0001.csv")).unwrap();
    assert!(segs.lines().count() > 1);
    assert_eq!(run(&["train-wsbdn", "--data", s(&d("data")), "--seeds", s(&d("seeds")), "--out", s(&d("wsbdn"))]), EXIT_OK);
    assert_eq!(fs::read_to_string(d("wsbdn").join("train_log.csv")).unwrap().lines().count(), 7);
    assert_eq!(
        run(&["pseudo", "--data", s(&d("data")), "--model", s(&d("wsbdn").join("wsbdn.ckpt")), "--out", s(&d("pseudo"))]),
        EXIT_OK
    );
    assert!(d("pseudo").join("pseudo_manifest.json").is_file() && d("pseudo").join("s0002.hard.c1.pgm").is_file());
    assert_eq!(run(&["train-student", "--data", s(&d("data")), "--pseudo", s(&d("pseudo")), "--out", s(&d("student"))]), EXIT_OK);
    assert_eq!(
        run(&["eval", "--gt", s(&d("data")), "--model", s(&d("student").join("student.ckpt")), "--out", s(&d("eval"))]),
        EXIT_OK
    );
    assert_eq!(run(&["eval", "--gt", s(&d("data")), "--pred", s(&d("pseudo")), "--maps", "hard", "--out", s(&d("eval_hard"))]), EXIT_OK);
    assert_eq!(run(&["report", s(&d("eval")), s(&d("eval_hard")), "--out", s(&d("report"))]), EXIT_OK);
    let summary = fs::read_to_string(d("report").join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    // A missing pseudo label is reported with the sample's name.
    fs::remove_file(d("pseudo").join("s0002.hard.c1.pgm")).unwrap();
    let out = bin()
        .args(["train-student", "--data", s(&d("data")), "--pseudo", s(&d("pseudo")), "--out", s(&d("student2"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: missing-sample:") && err.contains("s0002"), "{err}");
}

#[test]
fn sweep_grid_and_experiments() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"experiment": "grid", "axes": [{"parameter": "gamma", "values": [4, 6]}, {"parameter": "nms_on", "values": [0, 1]}]}"#).unwrap();
    let out = tmp.path().join("grid");
    assert_eq!(run(&["sweep", "--config", s(&cfg), "--spec", s(&spec), "--out", s(&out)]), EXIT_OK);
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 5);
    assert!(grid.starts_with("gamma,nms_on,soft_MF,hard_MF"));

    fs::write(&spec, r#"{"experiment": "branch"}"#).unwrap();
    let out = tmp.path().join("branch");
    assert_eq!(run(&["sweep", "--config", s(&cfg), "--spec", s(&spec), "--out", s(&out)]), EXIT_OK);
    assert_eq!(fs::read_to_string(out.join("branch.csv")).unwrap().lines().count(), 4);

    fs::write(&spec, r#"{"experiment": "grid", "axes": [{"parameter": "gama", "values": [4]}]}"#).unwrap();
    assert_eq!(run(&["sweep", "--config", s(&cfg), "--spec", s(&spec), "--out", s(&tmp.path().join("bad"))]), EXIT_CONFIG);
}
