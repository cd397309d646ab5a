use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reinforce-lab"));
    c.env_remove("REINFORCE_LAB_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn beta_c_is_infinite_in_one_dimension() {
    let o = run(&["constants", "--d", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "beta_c,inf"), "{text}");

    let o = run(&["constants", "--d", "1", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["beta_c"], "inf");
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let args = ["simulate", "errw", "--lattice", "d=1,n=2", "--steps", "100", "--seed", "7"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    // header plus one line per step
    assert_eq!(stdout(&a).lines().count(), 101);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let base = ["simulate", "vrjp", "--lattice", "d=2,n=1", "--horizon", "3", "--replicas", "40", "--seed", "3"];
    let one = bin().args(base).args(["--threads", "1"]).output().unwrap();
    let four = bin().args(base).env("REINFORCE_LAB_THREADS", "4").output().unwrap();
    assert!(one.status.success() && four.status.success());
    assert_eq!(one.stdout, four.stdout);
}

#[test]
fn verify_rubin_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["verify", "rubin", "--seed", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["suite"], "rubin");
    assert_eq!(report["pass"], true);
    assert!(report["statistics"]["chi_square"]["p_value"].as_f64().unwrap() > 0.01);
}

#[test]
fn statistical_rejection_exits_one() {
    // 200 events cannot pin the stationary occupancy to 1 %
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("suite.json");
    fs::write(&cfg, r#"{"replicas": 2000, "steps": 2, "events": 200, "burn_in": 1000}"#).unwrap();
    let o = run(&["verify", "mixture", "--config", cfg.to_str().unwrap(), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"pass\": false"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "errw", "--steps", "3"]).status.code(), Some(2));
    assert_eq!(run(&["constants", "--d", "0"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "nonsense"]).status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    fs::write(&p, r#"{"seed": 1, "format": "csv", "task": {"constants": {"d": 2, "temperature": 3}}}"#).unwrap();
    let o = run(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("temperature"));

    let s = dir.path().join("suite.json");
    fs::write(&s, r#"{"replicas": 10, "colour": "red"}"#).unwrap();
    let o = run(&["verify", "rubin", "--config", s.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn manifest_reproduces_outputs() {
    let first = tempfile::tempdir().unwrap();
    let o = run(&[
        "sample-density",
        "--lattice",
        "d=1,n=1",
        "--samples",
        "300",
        "--burn-in",
        "300",
        "--seed",
        "11",
        "--out",
        first.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let second = tempfile::tempdir().unwrap();
    let manifest = first.path().join("manifest.json");
    let o = run(&["run", "--config", manifest.to_str().unwrap(), "--out", second.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = read_dir_sorted(first.path());
    let b = read_dir_sorted(second.path());
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
}

#[test]
fn decay_scan_writes_csv() {
    let o = run(&[
        "scan-decay", "--d", "1", "--n", "2", "--beta", "0.5", "--samples", "500", "--burn-in", "500", "--thinning", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "d,n,parameter,distance,estimate,stderr,bound");
    assert_eq!(lines.count(), 3);
}
