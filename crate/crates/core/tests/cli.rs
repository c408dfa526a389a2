use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sptrim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sptrim"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> serde_json::Value {
    let out = sptrim(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

/// Runs a failing command and returns `(exit code, error kind)`.
fn fails(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = sptrim(args, cwd);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    (out.status.code().unwrap(), line["error"]["kind"].as_str().unwrap().to_string())
}

#[test]
fn stage_by_stage_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--per-class", "20", "--seed", "2", "--out", "data"], d);
    let data = "data/features.bin";

    let s1 = ok(
        &["stage1", "--data", data, "--method", "rgsm", "--lambda", "0.05", "--beta", "1", "--epochs", "3", "--out", "s1"],
        d,
    );
    assert_eq!(s1["Model"], "RGSM");
    assert_eq!(fs::read_to_string(d.join("s1/report.csv")).unwrap().lines().count(), 4);
    assert!(d.join("s1/mask.json").exists());

    ok(&["stage2", "--data", data, "--checkpoint", "s1/stage1.ckpt", "--epochs", "1", "--out", "s2"], d);
    let s3 = ok(
        &["stage3", "--data", data, "--checkpoint", "s2/stage2.ckpt", "--epochs", "1", "--lr", "0.01", "--out", "s3"],
        d,
    );
    assert_eq!(s3["Model"], "RGSM + Blended BC");

    let eval = ok(&["eval", "--data", data, "--checkpoint", "s3/stage3.ckpt"], d);
    assert_eq!(eval["accuracy"], s3["Accuracy"]);
    assert_eq!(eval["stage"], "III");

    ok(&["report", "--checkpoint", "s3/stage3.ckpt", "--out", "again"], d);
    for f in ["report.csv", "summary.json", "mask.json"] {
        assert_eq!(fs::read(d.join("s3").join(f)).unwrap(), fs::read(d.join("again").join(f)).unwrap());
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.cfg"),
        "# stage one settings\nmethod = gsbc\nlambda = 0.1\nepochs = 3\nper-class = 10\nno_diagnostics = true\n",
    )
    .unwrap();
    let summary = ok(&["stage1", "--config", "run.cfg", "--epochs", "1", "--out", "o"], d);
    assert_eq!(summary["Model"], "GSBC");
    assert_eq!(summary["λ"], 0.1);
    let csv = fs::read_to_string(d.join("o/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().ends_with(",,,"));

    fs::write(d.join("bad.cfg"), "colour = blue\n").unwrap();
    assert_eq!(fails(&["stage1", "--config", "bad.cfg"], d), (1, "config".into()));
}

#[test]
fn failures_print_a_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(fails(&["stage1", "--method", "sgd"], d), (1, "config".into()));
    assert_eq!(fails(&["stage1", "--method", "rgsm", "--beta", "0"], d), (1, "config".into()));
    assert_eq!(fails(&["stage2"], d), (1, "config".into()));
    assert_eq!(fails(&["eval", "--checkpoint", "missing.ckpt"], d), (1, "io".into()));

    fs::write(d.join("junk.bin"), b"NOTSPTRIM-FILE").unwrap();
    assert_eq!(fails(&["eval", "--checkpoint", "junk.bin"], d), (1, "bad_magic".into()));
    fs::write(d.join("empty.bin"), b"").unwrap();
    assert_eq!(fails(&["stage1", "--data", "empty.bin"], d), (1, "truncated".into()));

    assert_eq!(fails(&["stage1", "--no-such-flag"], d), (2, "usage".into()));
}
