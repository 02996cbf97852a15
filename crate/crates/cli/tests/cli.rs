use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FIXTURE_INFEASIBLE: &str = r#"{
    "subsystems": [
        {"a": [[0.5]], "b": [[1.0]], "f": [[0.1]], "c": [[1.0]]},
        {"a": [[1.5]], "b": [[0.0]], "f": [[0.1]], "c": [[1.0]]}
    ],
    "edges": [{"from": 1, "to": 2, "weight": 0.1}, {"from": 2, "to": 1, "weight": 0.1}]
}"#;

fn passivnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_passivnet"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .env_remove("PASSIVNET_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// CSV body without `#` comment lines, and the manifest JSON from the first.
fn split_csv(text: &str) -> (Value, Vec<String>) {
    let mut lines = text.lines();
    let first = lines.next().expect("non-empty output");
    let manifest = serde_json::from_str(first.strip_prefix("# manifest ").expect("manifest comment")).unwrap();
    (manifest, lines.map(str::to_string).collect())
}

#[test]
fn synthesize_then_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let certs = dir.path().join("certs.json");
    let out = passivnet(&["synthesize", "--cost", "b", "--samples", "500", "--out", path_str(&certs)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&certs).unwrap()).unwrap();
    assert_eq!(doc["certificates"]["cost"], "b");
    assert_eq!(doc["certificates"]["certificates"].as_array().unwrap().len(), 6);
    assert_eq!(doc["manifest"]["command"], "synthesize");
    assert_eq!(doc["manifest"]["timestamp"], 0);
    let checks = doc["verification"]["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"] == true));

    let report = dir.path().join("report.json");
    let out = passivnet(&["verify", "--certs", path_str(&certs), "--samples", "500", "--out", path_str(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["passed"], true);
}

#[test]
fn tampered_gain_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let certs = dir.path().join("certs.json");
    let out = passivnet(&["synthesize", "--samples", "200", "--out", path_str(&certs)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&certs).unwrap()).unwrap();
    let k = &mut doc["certificates"]["certificates"][2]["k"][0][0];
    *k = Value::from(k.as_f64().unwrap() + 50.0);
    std::fs::write(&certs, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = passivnet(&["verify", "--certs", path_str(&certs), "--samples", "200"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("FAIL"));
}

#[test]
fn synthesis_is_byte_for_byte_deterministic() {
    let run = || passivnet(&["synthesize", "--cost", "c", "--samples", "200"]).stdout;
    assert_eq!(run(), run());
}

#[test]
fn malformed_config_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sampling_time": 1e-5, "dgus": [{"v_in": 100}], "lines": []}"#).unwrap();
    let out = passivnet(&["synthesize", "--config", path_str(&bad)]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("dgus[0]"), "{}", stderr(&out));

    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&passivnet(&["synthesize", "--config", path_str(&bad)])), 4);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&passivnet(&["synthesize", "--config", path_str(&missing)])), 4);
}

#[test]
fn infeasible_subsystem_exits_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net.json");
    std::fs::write(&net, FIXTURE_INFEASIBLE).unwrap();
    let out = passivnet(&["synthesize", "--config", path_str(&net)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("subsystem 2"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_four() {
    assert_eq!(code(&passivnet(&["no-such-command"])), 4);
    assert_eq!(code(&passivnet(&["synthesize", "--cost", "z"])), 4);
    assert_eq!(code(&passivnet(&["synthesize", "--eps0", "-1"])), 4);
    let out = Command::new(env!("CARGO_BIN_EXE_passivnet"))
        .args(["simulate", "--steps", "10"])
        .env("PASSIVNET_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 4);
    assert_eq!(code(&passivnet(&["--help"])), 0);
}

#[test]
fn compare_discretizations_table() {
    let out = passivnet(&["compare-discretizations", "--horizon", "200"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (manifest, rows) = split_csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(manifest["parameters"]["horizon"], 200);
    assert!(rows[0].starts_with("input,"));
    let header: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(rows.len(), 4);
    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), header.len());
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap() >= 0.0));
    }
}

#[test]
fn single_point_sweep() {
    let out = passivnet(&["sweep-eps0", "--values", "1e-3", "--costs", "a", "--horizon", "300"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (_, rows) = split_csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("eps0,feasible_a,overshoot_percent"));
    assert!(rows[1].starts_with("1e-3,true,") || rows[1].starts_with("0.001,true,"), "{}", rows[1]);
}

#[test]
fn unsorted_sweep_is_rejected() {
    assert_eq!(code(&passivnet(&["sweep-eps0", "--values", "1e-2,1e-3", "--costs", "a", "--horizon", "10"])), 4);
}

#[test]
fn montecarlo_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("mc.json");
    let out = passivnet(&["montecarlo", "--runs", "3", "--horizon", "300", "--json", path_str(&json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (_, rows) = split_csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows[0], "cost,mu_J,sigma_J,lambda_min,runs,failures");
    assert_eq!(rows.len(), 4);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(doc["report"]["runs"].as_array().unwrap().len(), 3);
    assert_eq!(doc["manifest"]["command"], "montecarlo");
}

#[test]
fn simulate_trajectory_csv() {
    let out = passivnet(&["simulate", "--controller", "lqr", "--steps", "100", "--stride", "10"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (_, rows) = split_csv(&String::from_utf8(out.stdout).unwrap());
    assert!(rows[0].starts_with("step,time,V_1"));
    assert_eq!(rows.len(), 1 + 11);
    let last: Vec<f64> = rows[11].split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(last[0], 100.0);
}

#[test]
fn generic_network_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net.json");
    std::fs::write(&net, FIXTURE_INFEASIBLE.replace("[[1.5]], \"b\": [[0.0]]", "[[1.1]], \"b\": [[1.0]]")).unwrap();
    for cost in ["a", "b", "c"] {
        let out = passivnet(&["synthesize", "--config", path_str(&net), "--cost", cost, "--samples", "200"]);
        assert_eq!(code(&out), 0, "cost {cost}: {}", stderr(&out));
    }
    let out = passivnet(&["simulate", "--config", path_str(&net)]);
    assert_eq!(code(&out), 4);
}
