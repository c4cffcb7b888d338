//! End-to-end runs of the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_choice-lab"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("CHOICE_LAB_THREADS", t),
        None => cmd.env_remove("CHOICE_LAB_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn verify(cfg: &Path, out: &Path, extra: &[&str], threads: Option<&str>) -> Output {
    let mut args = vec!["verify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args, threads)
}

#[test]
fn verify_is_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("ref_nonid.json");
    let extra = ["--seed", "7", "--draws", "20000", "--checks", "thm10"];
    let mut csvs = Vec::new();
    for (i, t) in [None, Some("1"), Some("3")].into_iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        let o = verify(&cfg, &out, &extra, t);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(fs::read(out.join("verify.csv")).unwrap());
    }
    assert!(!csvs[0].is_empty());
    assert!(csvs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn seed_changes_the_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("nonid_linear.json");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, seed) in [(&a, "1"), (&b, "2")] {
        let o = verify(&cfg, dir, &["--seed", seed, "--draws", "20000", "--checks", "thm10"], None);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_ne!(fs::read(a.join("verify.csv")).unwrap(), fs::read(b.join("verify.csv")).unwrap());
}

#[test]
fn unknown_config_key_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(config("nonid_linear.json")).unwrap()).unwrap();
    v["integration"]["nodes"] = 5.into();
    let path = tmp.path().join("bad.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = verify(&path, &tmp.path().join("out"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("integration.nodes"));
}

#[test]
fn unknown_check_and_bad_thread_count_are_configuration_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("nonid_linear.json");
    let out = tmp.path().join("out");
    assert_eq!(verify(&cfg, &out, &["--checks", "thm99"], None).status.code(), Some(2));
    assert_eq!(verify(&cfg, &out, &[], Some("zero")).status.code(), Some(2));
    assert_eq!(verify(&tmp.path().join("missing.json"), &out, &[], None).status.code(), Some(2));
}

#[test]
fn missing_sub_document_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = verify(&config("nonid_linear.json"), &tmp.path().join("out"), &["--checks", "thm5"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("triangular"));
}

#[test]
fn simulate_writes_a_panel_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let o = run(
        &["simulate", "--config", config("est_panel.json").to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("panel_sample.csv")).unwrap();
    assert!(text.lines().count() > 1000);
}

#[test]
fn report_consolidates_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("all");
    let o = verify(&config("nonid_linear.json"), &out, &["--draws", "20000", "--checks", "thm10"], None);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&["report", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let merged: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("consolidated.json")).unwrap()).unwrap();
    assert_eq!(merged["failed"], 0);
    assert!(merged["total"].as_u64().unwrap() >= 1);
    assert!(out.join("consolidated.txt").exists());

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(run(&["report", empty.to_str().unwrap()], None).status.code(), Some(2));
}
