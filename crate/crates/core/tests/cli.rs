use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_stratrla");

const CONFIG: &str = r#"{
    "risk_limit": 0.05,
    "strata": [
        {"size": 400, "method": "alpha_ub", "assorter": {"kind": "comparison", "upper_bound_original": 1.0, "reported_mean": 0.55}},
        {"size": 400, "method": "alpha_ub", "assorter": {"kind": "comparison", "upper_bound_original": 1.0, "reported_mean": 0.55}}
    ],
    "grid_size": 100
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["simulate"]).status.code(), Some(2));
    assert_eq!(run(&["california", "--results", "a.csv", "--synthetic"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let o = run(&["measure", "--config", "/definitely/missing.json", "--sample", "x.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
}

#[test]
fn measure_stops_at_the_crossing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let mut rows = String::from("stratum,mvr,cvr\n");
    for i in 0..600 {
        rows.push_str(&format!("{},1,1\n", 1 + i % 2));
    }
    let sample = write(dir.path(), "sample.csv", &rows);
    let o = run(&["measure", "--config", &config, "--sample", &sample]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("P*_F") && out.contains("P*_M"), "{out}");
    assert!(out.contains("Stopped"), "{out}");
    assert!(!out.contains("after 600 of 600"), "{out}");
}

#[test]
fn measure_checks_population_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let sample = write(dir.path(), "sample.csv", "stratum,mvr,cvr\n1,1,1\n");
    let pop = write(dir.path(), "pop.csv", "stratum,value,count\n1,1,400\n2,1,399\n");
    let o = run(&["measure", "--config", &config, "--sample", &sample, "--population", &pop]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("differ"));
}

#[test]
fn interactive_audit_rejects_bad_lines_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let snap = dir.path().join("snap.json");
    let mut child = Command::new(BIN)
        .args(["audit", "--config", &config, "--snapshot"])
        .arg(&snap)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"1,w,w\nnonsense\n3,1,1\n2,1,1\n# comment\n1,0.5,1\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.matches("rejected").count(), 2, "{out}");
    assert!(out.contains("next: stratum"), "{out}");
    let snapshot: serde_json::Value = serde_json::from_slice(&std::fs::read(&snap).unwrap()).unwrap();
    assert_eq!(snapshot["draws"].as_array().unwrap().len(), 3);

    let resumed = Command::new(BIN)
        .args(["audit", "--config", &config, "--snapshot"])
        .arg(&snap)
        .arg("--resume")
        .arg(&snap)
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert!(resumed.status.success());
    let snapshot: serde_json::Value = serde_json::from_slice(&std::fs::read(&snap).unwrap()).unwrap();
    assert_eq!(snapshot["draws"].as_array().unwrap().len(), 3);
}

#[test]
fn simulate_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "simulate", "--reps", "4", "--seed", "7", "--scenarios", "0.1", "--methods", "alpha-ub",
        "--combiners", "intersection", "--selectors", "proportional", "--size", "200", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["workloads.csv", "scores.csv", "stop_curves.csv"] {
        let body = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(body.lines().count() >= 2, "{f}: {body}");
    }
    let again = dir.path().join("again");
    run(&[
        "simulate", "--reps", "4", "--seed", "7", "--scenarios", "0.1", "--methods", "alpha-ub",
        "--combiners", "intersection", "--selectors", "proportional", "--size", "200", "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(out.join("workloads.csv")).unwrap(),
        std::fs::read(again.join("workloads.csv")).unwrap()
    );
}

#[test]
fn kalamazoo_and_california_run_on_stand_in_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["kalamazoo", "--reshuffles", "5", "--seed", "3", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("kalamazoo.csv").exists());

    let o = run(&["california", "--synthetic", "--reps", "2", "--checkpoints", "5580,10580", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(dir.path().join("california.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let o = run(&["california", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
}
