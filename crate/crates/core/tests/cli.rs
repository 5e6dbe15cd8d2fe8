use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn morseflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morseflow"))
        .args(args)
        .args(["--threads", "1"])
        .env("MORSEFLOW_LOG", "off")
        .output()
        .expect("binary runs")
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

#[test]
fn critical_reports_the_torus_census() {
    let out = morseflow(&["critical", "--scenario", "torus"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["status"], "ok");
    assert_eq!(r["stage"], "critical");
    let indices: Vec<u64> = r["critical_points"].as_array().unwrap().iter().map(|p| p["index"].as_u64().unwrap()).collect();
    assert_eq!(indices, vec![2, 1, 1, 0]);
    assert_eq!(r["critical_points"][0]["id"], "c0_0");
}

#[test]
fn betti_on_the_peanut() {
    let out = morseflow(&["betti", "--scenario", "peanut"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&out)["complex"]["betti"], serde_json::json!([1, 0, 1]));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let a = morseflow(&["complex", "--scenario", "torus", "--seed", "3"]);
    let b = morseflow(&["complex", "--scenario", "torus", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn out_directory_holds_report_and_pair_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = morseflow(&["connections", "--scenario", "torus", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let pairs = r["connections"].as_array().unwrap();
    assert_eq!(pairs.len(), 4);
    for pair in pairs {
        let text = std::fs::read_to_string(dir.path().join(pair["csv"].as_str().unwrap())).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("trajectory,s,x1,x2,h"));
        let trajectories: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(trajectories.len() as u64, pair["count"].as_u64().unwrap());
    }
}

#[test]
fn unknown_function_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/torus.json"))
        .unwrap()
        .replace("cos_sum", "no_such_function");
    std::fs::write(&path, text).unwrap();
    let out = morseflow(&["critical", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let r = report(&out);
    assert_eq!(r["status"], "validation_failed");
    assert_eq!(r["errors"][0]["kind"], "InvalidScenario");
}

#[test]
fn wrong_form_degree_is_a_validation_failure() {
    let out = morseflow(&["integrate", "--scenario", "torus", "--form", "area", "--degree", "1", "--quadrature", "16"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(report(&out)["status"], "validation_failed");
}

#[test]
fn missing_scenario_is_a_validation_failure() {
    let out = morseflow(&["critical"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn upright_torus_is_flagged_non_transversal() {
    let out = morseflow(&["connections", "--scenario", "upright_torus"]);
    assert_eq!(out.status.code(), Some(3));
    let r = report(&out);
    assert_eq!(r["status"], "assertion_failed");
    assert_eq!(r["errors"][0]["kind"], "NonTransversalSuspected");
}

#[test]
fn perturb_demo_certifies_transversality() {
    let out = morseflow(&["perturb-demo", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    let passed: Vec<bool> = r["assertions"].as_array().unwrap().iter().map(|a| a["passed"].as_bool().unwrap()).collect();
    assert!(!passed.is_empty() && passed.iter().all(|p| *p), "{r}");
}
