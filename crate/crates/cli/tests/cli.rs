use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn urlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urlab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{"agent": {"type": "aixi", "horizon": 3, "samples": 50}, "runs": 2, "cycles": 20}"#;

#[test]
fn run_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let out = tmp.path().join("out");
    let o = urlab(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--parallel", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.csv", "final_window.csv", "trace_0.csv", "trace_1.csv", "posterior_final_0.json", "config.resolved.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("label,t,mean,sd"));
    assert_eq!(summary.lines().count(), 21);
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let out = tmp.path().join("out");
    let o = urlab(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--runs", "1", "--cycles", "7", "--seed", "5"]);
    assert!(o.status.success());
    assert!(!out.join("trace_1.csv").exists());
    let trace = fs::read_to_string(out.join("trace_0.csv")).unwrap();
    assert_eq!(trace.lines().count(), 8);
}

#[test]
fn compare_prints_tests() {
    let tmp = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    for kind in ["aixi", "random"] {
        let body = SMALL.replace("aixi", kind);
        let cfg = write_config(tmp.path(), &format!("{kind}.json"), &body);
        let out = tmp.path().join(kind);
        assert!(urlab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
        summaries.push(out.join("summary.csv").to_string_lossy().into_owned());
    }
    let o = urlab(&["compare", &summaries[0], &summaries[1]]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("a,b,mean_a,mean_b,t,df,p_value"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let unknown = write_config(tmp.path(), "u.json", r#"{"agent": {"type": "aixi"}, "bogus": 1}"#);
    assert_eq!(urlab(&["run", "--config", &unknown, "--out", out]).status.code(), Some(2));
    let bad = write_config(tmp.path(), "b.json", r#"{"agent": {"type": "thompson", "model": "dirichlet"}}"#);
    assert_eq!(urlab(&["run", "--config", &bad, "--out", out]).status.code(), Some(2));
    let ok = write_config(tmp.path(), "ok.json", SMALL);
    assert_eq!(urlab(&["run", "--config", &ok]).status.code(), Some(2));
    assert_eq!(urlab(&["run", "--config", &ok, "--out", out, "--preset", "huge"]).status.code(), Some(2));
    assert_eq!(urlab(&["oracle", "--check", "nope"]).status.code(), Some(2));
}

#[test]
fn missing_config_is_an_error() {
    let o = urlab(&["run", "--config", "/nonexistent/c.json", "--out", "/tmp/x"]);
    assert!(!o.status.success());
}

#[test]
fn oracle_horizon_passes() {
    let o = urlab(&["oracle", "--check", "horizon"]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("PASS horizon"));
}
