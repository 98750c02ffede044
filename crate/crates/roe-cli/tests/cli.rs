//! End-to-end checks of the `roekit` binary: exit codes, output files,
//! manifest writing, and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../roe-core/tests/fixtures")
        .join(name)
}

fn roekit(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roekit"))
        .args(args)
        .arg("--out")
        .arg(out_dir)
        .output()
        .expect("binary runs")
}

#[test]
fn compute_writes_envelopes_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let net = fixture("two_bus.json");
    let out = roekit(
        &[
            "compute",
            "--net",
            net.to_str().unwrap(),
            "--no-q-opt",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let env_text = std::fs::read_to_string(dir.path().join("envelopes.json")).unwrap();
    let env: serde_json::Value = serde_json::from_str(&env_text).unwrap();
    let c1 = &env["customers"][0];
    assert_eq!(c1["id"], "c1");
    let export = c1["export_kw"].as_f64().unwrap();
    let import = c1["import_kw"].as_f64().unwrap();
    assert!((export - -3.915).abs() < 0.05, "export {export}");
    assert!((import - 1.970).abs() < 0.05, "import {import}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "compute");
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["timings_ms"]["total"].is_number());
}

#[test]
fn compute_is_byte_deterministic() {
    let net = fixture("two_bus.json");
    let mut texts = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = roekit(
            &["compute", "--net", net.to_str().unwrap(), "--seed", "1"],
            dir.path(),
        );
        assert!(out.status.success());
        texts.push(std::fs::read(dir.path().join("envelopes.json")).unwrap());
    }
    assert_eq!(
        texts[0], texts[1],
        "envelopes.json must be byte-identical across reruns"
    );
}

#[test]
fn compute_rejects_malformed_network() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("empty.json");
    std::fs::write(&bad, "{}").unwrap();
    let out = roekit(&["compute", "--net", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("empty.json"),
        "diagnostic should name the file: {err}"
    );
}

#[test]
fn fr_emits_polygon_matching_vertex_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let net = fixture("two_bus.json");
    let out = roekit(
        &["fr", "--net", net.to_str().unwrap(), "--q", "0,0"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let fr_text = std::fs::read_to_string(dir.path().join("fr.json")).unwrap();
    let poly = roe_core::polytope::Polyhedron::parse(&fr_text).unwrap();
    let verts = roe_core::polytope::enumerate_vertices(&poly).unwrap();

    let csv = std::fs::read_to_string(dir.path().join("fr_polygon.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "p1_kw,p2_kw");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    // closed ring: first row repeated at the end
    assert_eq!(rows.first(), rows.last());
    assert_eq!(rows.len(), verts.len() + 1);
    for v in &verts {
        assert!(
            rows.iter()
                .any(|r| (r[0] - v[0]).abs() < 1e-5 && (r[1] - v[1]).abs() < 1e-5),
            "vertex {v} missing from polygon csv"
        );
    }
    // counterclockwise orientation: positive signed area
    let area: f64 = rows
        .windows(2)
        .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
        .sum::<f64>()
        / 2.0;
    assert!(
        area > 0.0,
        "polygon must be counterclockwise, signed area {area}"
    );
}

#[test]
fn validate_gates_on_violations() {
    let dir = tempfile::tempdir().unwrap();
    let net = fixture("two_bus.json");
    // proposed envelopes: clean run, exit 0
    let out = roekit(
        &[
            "compute",
            "--net",
            net.to_str().unwrap(),
            "--no-q-opt",
            "--seed",
            "3",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let env_path = dir.path().join("envelopes.json");
    let out = roekit(
        &[
            "validate",
            "--net",
            net.to_str().unwrap(),
            "--envelopes",
            env_path.to_str().unwrap(),
            "--scenarios",
            "40",
            "--seed",
            "9",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("validation.csv").exists());
    let csv = std::fs::read_to_string(dir.path().join("validation.csv")).unwrap();
    assert!(csv.starts_with("k,min_v,max_v,violations"));

    // single-point baseline limits: violating scenarios, exit 3
    let statuses = dir.path().join("statuses.json");
    std::fs::write(&statuses, r#"{"c1": "importing", "c3": "importing"}"#).unwrap();
    let out = roekit(
        &[
            "baseline",
            "--net",
            net.to_str().unwrap(),
            "--statuses",
            statuses.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = roekit(
        &[
            "validate",
            "--net",
            net.to_str().unwrap(),
            "--envelopes",
            dir.path().join("baseline_envelopes.json").to_str().unwrap(),
            "--scenarios",
            "100",
            "--seed",
            "9",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn compute_reports_infeasible_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // a band entirely above the source voltage cannot be met on every phase
    let text = std::fs::read_to_string(fixture("two_bus.json"))
        .unwrap()
        .replace("\"vmin_pu\": 0.95", "\"vmin_pu\": 1.2")
        .replace("\"vmax_pu\": 1.05", "\"vmax_pu\": 1.3");
    let tight = dir.path().join("tight.json");
    std::fs::write(&tight, text).unwrap();
    let out = roekit(&["compute", "--net", tight.to_str().unwrap()], dir.path());
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn validate_rejects_zero_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let net = fixture("two_bus.json");
    let envs = dir.path().join("whatever.json");
    std::fs::write(&envs, "{}").unwrap();
    let out = roekit(
        &[
            "validate",
            "--net",
            net.to_str().unwrap(),
            "--envelopes",
            envs.to_str().unwrap(),
            "--scenarios",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_vertices_counts_square() {
    let dir = tempfile::tempdir().unwrap();
    let square = dir.path().join("square.json");
    std::fs::write(
        &square,
        r#"{"G": [[1,0],[-1,0],[0,1],[0,-1]], "g": [1,1,1,1], "var_names": ["x","y"]}"#,
    )
    .unwrap();
    let out = roekit(
        &["oracle", "vertices", "--poly", square.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 vertices"));
    let csv = std::fs::read_to_string(dir.path().join("vertices.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5); // header + 4 rows
}

#[test]
fn oracle_exact_dfr_on_fixture_region() {
    let dir = tempfile::tempdir().unwrap();
    let fr = fixture("example1_fr.json");
    let out = roekit(
        &["oracle", "exact-dfr", "--fr", fr.to_str().unwrap()],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("exact_dfr.json")).unwrap())
            .unwrap();
    assert!(doc["volume"].as_f64().unwrap() > 0.0);
    assert_eq!(doc["bounds"].as_array().unwrap().len(), 2);
}

#[test]
fn oracle_boundary_traces_two_customer_network() {
    let dir = tempfile::tempdir().unwrap();
    let net = fixture("two_bus.json");
    let out = roekit(
        &[
            "oracle",
            "boundary",
            "--net",
            net.to_str().unwrap(),
            "--points",
            "7",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("boundary.csv")).unwrap();
    assert!(csv.starts_with("sweep_kw,min_kw,max_kw"));
    assert_eq!(csv.lines().count(), 8);
}
