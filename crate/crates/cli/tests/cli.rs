//! End-to-end tests of the binary: exit codes, JSON output, determinism.

use std::process::{Command, Output};

use tensionlab::problems::gallery_entry;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tensionlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn eval_reports_the_cylinder_tension() {
    let out = run(&[
        "eval",
        "--gallery",
        "cylinder-f-biharmonic",
        "--op",
        "tension",
        "--point",
        "0,0",
        "--format",
        "json",
    ]);
    let json = stdout_json(&out);
    let row = json["values"][0].as_array().unwrap();
    let values: Vec<f64> = row.iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((values[0] + 1.0).abs() < 1e-12);
    assert!(values[1].abs() < 1e-12);
    assert!(values[2].abs() < 1e-12);
    assert_eq!(json["op"], "tension");
}

#[test]
fn verify_exit_code_tracks_the_verdict() {
    let pass = run(&[
        "verify",
        "--gallery",
        "inversion-bi-f-harmonic-m3",
        "--identity",
        "THM1",
        "--samples",
        "15",
        "--format",
        "json",
    ]);
    let json = stdout_json(&pass);
    assert_eq!(json["verdict"], "pass");
    assert_eq!(json["identity"], "THM1");

    // The same check cannot meet an impossible tolerance: the run completes
    // but the verdict is a failure, reported through exit code 1.
    let fail = run(&[
        "verify",
        "--gallery",
        "inversion-bi-f-harmonic-m3",
        "--identity",
        "THM1",
        "--samples",
        "15",
        "--tol",
        "1e-16",
    ]);
    assert_eq!(exit_code(&fail), 1);
    let text = String::from_utf8_lossy(&fail.stdout);
    assert!(text.contains("FAIL"), "got: {text}");
}

#[test]
fn usage_and_load_errors_exit_with_code_2() {
    let unknown_entry = run(&["eval", "--gallery", "no-such-entry", "--op", "tension", "--point", "0"]);
    assert_eq!(exit_code(&unknown_entry), 2);
    assert!(String::from_utf8_lossy(&unknown_entry.stderr).contains("unknown gallery entry"));

    let unknown_identity = run(&[
        "verify",
        "--gallery",
        "cylinder-f-biharmonic",
        "--identity",
        "NOT-A-KEY",
    ]);
    assert_eq!(exit_code(&unknown_identity), 2);

    // A structurally inapplicable check is a usage error, not a failure.
    let inapplicable = run(&[
        "verify",
        "--gallery",
        "cylinder-f-biharmonic",
        "--identity",
        "THM1",
    ]);
    assert_eq!(exit_code(&inapplicable), 2);
    assert!(String::from_utf8_lossy(&inapplicable.stderr).contains("2-dimensional"));

    let bad_region = run(&[
        "energy",
        "--gallery",
        "cylinder-f-biharmonic",
        "--functional",
        "E",
        "--region",
        "disk:0,0:1",
    ]);
    assert_eq!(exit_code(&bad_region), 2);

    let no_source = run(&["eval", "--op", "tension", "--point", "0,0"]);
    assert_eq!(exit_code(&no_source), 2);
}

#[test]
fn file_problems_need_explicit_trait_flags_for_inequalities() {
    let entry = gallery_entry("hyperbolic-target-harmonic").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("problem.txt");
    std::fs::write(&path, entry.source).unwrap();
    let path = path.to_str().unwrap();

    // Loaded from a file, nothing is known about the target curvature.
    let undeclared = run(&[
        "verify", "--problem", path, "--identity", "NPC-INEQ", "--samples", "10",
    ]);
    assert_eq!(exit_code(&undeclared), 2);

    let declared = run(&[
        "verify",
        "--problem",
        path,
        "--identity",
        "NPC-INEQ",
        "--samples",
        "10",
        "--npc-target",
    ]);
    assert_eq!(exit_code(&declared), 0);
}

#[test]
fn suite_is_deterministic_and_green() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for path in [&a, &b] {
        let out = run(&[
            "suite",
            "--samples",
            "12",
            "--format",
            "json",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(
            exit_code(&out),
            0,
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert_eq!(bytes_a, bytes_b, "suite output must be byte-identical");

    let json: serde_json::Value = serde_json::from_slice(&bytes_a).unwrap();
    assert_eq!(json["passed"], true);
    assert!(json["identity_checks"].as_array().unwrap().len() >= 100);
    assert!(!json["fixtures"].as_array().unwrap().is_empty());
    // Stripped timing keeps reports comparable across runs.
    assert!(json["identity_checks"][0].get("wall_time_ms").is_none());
}

#[test]
fn energy_recovers_the_cylinder_area(){
    let out = run(&[
        "energy",
        "--gallery",
        "cylinder-f-biharmonic",
        "--functional",
        "E",
        "--region",
        "box:0..6.283185307179586,0..1",
        "--resolution",
        "64",
        "--format",
        "json",
    ]);
    let json = stdout_json(&out);
    let value = json["value"].as_f64().unwrap();
    assert!((value - std::f64::consts::TAU).abs() < 1e-9, "E = {value}");
}

#[test]
fn growth_profile_lists_one_row_per_radius() {
    let out = run(&[
        "growth",
        "--gallery",
        "cylinder-f-biharmonic",
        "--radii",
        "1,2",
        "--resolution",
        "33",
        "--format",
        "json",
    ]);
    let json = stdout_json(&out);
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0]["sup_weight"].as_f64().unwrap() > 2.7);

    let empty = run(&["growth", "--gallery", "cylinder-f-biharmonic", "--radii", ""]);
    assert_eq!(exit_code(&empty), 2);
}

#[test]
fn gallery_names_resolve_and_describe() {
    let list = run(&["gallery", "--format", "json"]);
    let json = stdout_json(&list);
    let items = json.as_array().unwrap();
    assert_eq!(items.len(), 15);

    let one = run(&["gallery", "inversion-bi-f-harmonic-m4", "--format", "json"]);
    let json = stdout_json(&one);
    assert_eq!(json["bi_f_harmonic"], true);
    let ids: Vec<&str> = json["applicable_identities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(ids.contains(&"THM1"));
    assert!(ids.contains(&"GD31-INEQ"));
}
