use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn switchbox(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_switchbox"))
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run switchbox")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("switchbox-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn stderr_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).trim_end().to_string()
}

#[test]
fn validate_accepts_the_benchmark() {
    let out = scratch("validate");
    let o = switchbox(&["validate", "problems/benchmark"], &out);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("validation.json")).unwrap()).unwrap();
    assert_eq!(v["ok"], true);
    assert_eq!(v["problem"]["hash"], "6badb841f27fdad0");
    assert_eq!(v["run"]["subcommand"], "validate");
    assert!(v["code_version"].is_string());
}

#[test]
fn compare_identical_modes_reports_unit_value() {
    let out = scratch("identical");
    let o = switchbox(&["compare", "problems/identical_modes", "--seed", "7", "--paths", "5000", "--strategy-paths", "10000"], &out);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["schema"], "switchbox.report/1");
    assert_eq!(r["overall_pass"], true);
    for v in r["values"].as_array().unwrap() {
        for key in ["fd", "mc", "oracle"] {
            assert!((v[key].as_f64().unwrap() - 1.0).abs() < 1e-2, "{v}");
        }
    }
    for name in ["value_field.csv", "mc_iterates.csv", "traces.csv", "strategy_summary.json", "oracle.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(out.join("value_field.csv")).unwrap();
    assert!(csv.starts_with("# problem_hash "));
    assert!(std::fs::read_dir(out.join("cache")).unwrap().count() == 1);
}

#[test]
fn solve_fd_reuses_its_cache() {
    let out = scratch("cache");
    let args = ["solve-fd", "problems/benchmark", "--grid", "60", "--steps", "100"];
    assert!(switchbox(&args, &out).status.success());
    let first = std::fs::read(out.join("fd_summary.json")).unwrap();
    assert!(switchbox(&args, &out).status.success());
    assert_eq!(first, std::fs::read(out.join("fd_summary.json")).unwrap());
}

#[test]
fn failures_are_one_line() {
    let out = scratch("fail");
    for (args, prefix, code) in [
        (vec!["solve-fd", "problems/missing"], "error: io:", 2),
        (vec!["solve-fd", "problems/benchmark", "--frobnicate"], "error: usage:", 2),
        (vec!["solve-fd", "problems/benchmark", "--grid", "10,10"], "error: argument:", 2),
        (vec!["launch"], "error: usage:", 2),
    ] {
        let o = switchbox(&args, &out);
        let err = stderr_line(&o);
        assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
        assert!(err.starts_with(prefix) && !err.contains('\n'), "{args:?}: {err}");
    }
}

#[test]
fn malformed_problem_is_rejected() {
    let out = scratch("malformed");
    std::fs::create_dir_all(&out).unwrap();
    let bad = out.join("bad.toml");
    std::fs::write(&bad, "name = \"bad\"\nmodes = 1\n").unwrap();
    let o = switchbox(&["validate", bad.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error: problem:"), "{}", stderr_line(&o));
}

#[test]
fn thread_cap_must_be_positive() {
    let out = scratch("threads");
    let o = Command::new(env!("CARGO_BIN_EXE_switchbox"))
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .env("SWITCHBOX_THREADS", "zero")
        .args(["validate", "problems/benchmark", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).contains("SWITCHBOX_THREADS"));
}

#[test]
fn mc_and_oracle_artifacts() {
    let out = scratch("mc");
    let o = switchbox(&["solve-mc", "problems/deterministic", "--paths", "500", "--steps", "50"], &out);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let csv = std::fs::read_to_string(out.join("mc_iterates.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "iteration,mode,mean,standard_error"));
    let o = switchbox(&["oracle", "problems/benchmark"], &out);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out.join("oracle.txt")).unwrap();
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../golden/benchmark_oracle.txt")).unwrap();
    assert_eq!(text, golden);
}
