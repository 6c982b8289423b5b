use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dsandpile(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsandpile"))
        .args(args)
        .current_dir(dir)
        .env_remove("DSANDPILE_SEED")
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn single_toppling_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"d":2,"gamma":0.0,"shape":"custom","k":0,"sites":[[0,0],[1,0],[0,1],[1,1]],"heights":[4,0,0,0]}"#;
    std::fs::write(dir.path().join("c.json"), cfg).unwrap();
    let out = dsandpile(dir.path(), &["stabilize", "c.json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["heights"], serde_json::json!([0.0, 1.0, 1.0, 0.0]));
    assert_eq!(v["odometer"], serde_json::json!([1, 0, 0, 0]));
}

#[test]
fn stable_input_is_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"d":3,"gamma":0.5,"shape":"cube","k":1,"heights":[0,1,2,3,4,5,6.4,0.5,1.5,2.5,3.5,4.5,5.5,6,0,0,1,1,2,2,3,3,4,4,5,5,6]}"#;
    std::fs::write(dir.path().join("c.json"), cfg).unwrap();
    let out = dsandpile(dir.path(), &["stabilize", "c.json", "--out", "o.json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o.json")).unwrap()).unwrap();
    let before: Value = serde_json::from_str(cfg).unwrap();
    let as_f64 = |v: &Value| v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>();
    assert_eq!(as_f64(&v["heights"]), as_f64(&before["heights"]));
    assert!(v["odometer"].as_array().unwrap().iter().all(|x| x == 0));
}

#[test]
fn schema_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.json"), r#"{"d":2,"gamma":0,"shape":"cube","k":0,"heights":"x"}"#).unwrap();
    std::fs::write(dir.path().join("b.json"), r#"{"d":2,"gamma":0,"shape":"cube","k":1,"heights":[1,2]}"#).unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"d":4,"gamma":0,"shape":"cube","k":0,"heights":[1]}"#).unwrap();
    for f in ["a.json", "b.json", "c.json", "missing.json"] {
        let out = dsandpile(dir.path(), &["stabilize", f]);
        assert_eq!(out.status.code(), Some(2), "{f}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["oracle", "medium"],
        vec!["frobnicate"],
        vec!["rate", "--gammas", "0.1", "--replicas", "0", "--out", "x.csv"],
        vec!["rate", "--gammas", "-0.1", "--replicas", "5", "--out", "x.csv"],
        vec!["rate", "--k", "1", "--gammas", "0.1", "--event", "site:5,0,0:1", "--replicas", "5", "--out", "x.csv"],
        vec!["couple", "--d", "2", "--k", "0", "--gamma", "0.1"],
        vec!["couple", "--k", "1", "--m", "1", "--gamma", "0.1"],
    ] {
        assert_eq!(dsandpile(dir.path(), &args).status.code(), Some(2), "{args:?}");
    }
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn oracle_levels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsandpile(dir.path(), &["oracle", "quick"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["pass"], true);
    let out = dsandpile(dir.path(), &["oracle", "full"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let count = v["checks"].as_array().unwrap().iter().find(|c| c["name"] == "count_square").unwrap().clone();
    assert_eq!(count["pass"], true);
    assert!(count["detail"].as_str().unwrap().contains("192"));
}

#[test]
fn rate_writes_csv_sidecar_and_script() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsandpile(
        dir.path(),
        &["rate", "--k", "0", "--gammas", "0.5,0.05", "--replicas", "80", "--out", "r.csv", "--emit-gnuplot-script"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "gamma,replicas,fail_rate,fail_se,gap_coupled,gap_coupled_se,gap_indep,gap_se,slope,slope_se,slope_lo,slope_hi"
    );
    assert_eq!(lines.count(), 2);
    let side: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(side["config"]["replicas"], 80);
    assert_eq!(side["config"]["seed"], 1);
    assert!(side["build"].as_str().is_some_and(|b| !b.is_empty()));
    assert_eq!(side["checks"]["height_violations"], 0);
    assert!(std::fs::read_to_string(dir.path().join("r.gp")).unwrap().contains("r.csv"));
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_dsandpile"));
        c.args(args).current_dir(dir.path()).env_remove("DSANDPILE_SEED");
        if let Some(s) = env {
            c.env("DSANDPILE_SEED", s);
        }
        c.output().unwrap().stdout
    };
    let args = ["sample", "wilson", "--k", "1", "--gamma", "0.5", "--samples", "200"];
    let by_env = run(Some("77"), &args);
    let mut with_flag = vec!["--seed", "77"];
    with_flag.extend(args);
    assert_eq!(by_env, run(None, &with_flag));
    assert_ne!(by_env, run(None, &args));
    let mut override_env = vec!["--seed", "1"];
    override_env.extend(args);
    assert_eq!(run(Some("77"), &override_env), run(None, &args));
}

#[test]
fn burn_reports_leftover() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"d":2,"gamma":0.0,"shape":"custom","k":0,"sites":[[0,0],[1,0]],"heights":[0,0]}"#;
    std::fs::write(dir.path().join("c.json"), cfg).unwrap();
    let v = json(&dsandpile(dir.path(), &["burn", "c.json"]));
    assert_eq!(v["allowed"], false);
    assert_eq!(v["leftover"].as_array().unwrap().len(), 2);
}
