use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FIXTURE: &str = "tests/fixtures/ten_rows.csv";

fn ecoinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecoinfer"))
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Structural equality with a relative tolerance on numbers; output paths
/// are ignored.
fn assert_json_close(got: &Value, want: &Value, path: &str) {
    match (got, want) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!(close(a, b), "{path}: {a} vs {b}");
        }
        (Value::Array(a), Value::Array(b)) => {
            assert_eq!(a.len(), b.len(), "{path}: length");
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_json_close(x, y, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            let mut ka: Vec<_> = a.keys().collect();
            let mut kb: Vec<_> = b.keys().collect();
            ka.sort();
            kb.sort();
            assert_eq!(ka, kb, "{path}: keys");
            for k in ka {
                if path == ".config" && k == "outputs" {
                    continue;
                }
                assert_json_close(&a[k], &b[k], &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(got, want, "{path}"),
    }
}

fn golden(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn fit_args() -> Vec<&'static str> {
    vec![
        "fit", "-i", FIXTURE, "--outcome", "y", "--shares", "white,black", "--covariates", "income", "--size", "pop",
        "--id", "id", "--bounds", "0", "1",
    ]
}

#[test]
fn fit_matches_golden_report() {
    let out = ecoinfer(&fit_args());
    assert!(out.status.success(), "{}", stderr(&out));
    let got: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_json_close(&got, &golden("fit_golden.json"), "");
    let beta = got["estimate"]["beta"].as_array().unwrap();
    assert_eq!(beta.len(), 2);
}

#[test]
fn sensitivity_contrast_matches_golden_report() {
    let out = ecoinfer(&[
        "sensitivity", "-i", FIXTURE, "--outcome", "y", "--shares", "white,black", "--covariates", "income", "--id",
        "id", "--contrast", "1,-1", "--grid", "2x2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let got: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_json_close(&got, &golden("sensitivity_golden.json"), "");
    assert_eq!(got["contour"]["rows"].as_array().unwrap().len(), 4);
    assert!(got["sensitivity"]["nu_hat"].as_f64().unwrap() > 0.0);
}

#[test]
fn local_csv_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("local.csv");
    let report = dir.path().join("local.json");
    let out = ecoinfer(&[
        "local", "-i", FIXTURE, "--outcome", "y", "--shares", "white,black", "--covariates", "income", "--id", "id",
        "--bounds", "0", "1", "--local-csv", csv.to_str().unwrap(), "-o", report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let got = std::fs::read_to_string(&csv).unwrap();
    let want = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/local_golden.csv")).unwrap();
    let (gl, wl): (Vec<_>, Vec<_>) = (got.lines().collect(), want.lines().collect());
    assert_eq!(gl.len(), 11);
    assert_eq!(gl[0], wl[0]);
    for (g, w) in gl.iter().zip(&wl).skip(1) {
        let (g, w): (Vec<_>, Vec<_>) = (g.split(',').collect(), w.split(',').collect());
        assert_eq!(g[0], w[0]);
        for (a, b) in g.iter().zip(&w).skip(1) {
            assert!(close(a.parse().unwrap(), b.parse().unwrap()), "{a} vs {b}");
        }
    }
    // Every B̂' satisfies the accounting identity against the fixture.
    let data = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join(FIXTURE)).unwrap();
    for (row, est) in data.lines().skip(1).zip(gl.iter().skip(1)) {
        let r: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        let e: Vec<f64> = est.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((e[2] * r[1] + e[3] * r[2] - r[0]).abs() < 1e-10);
    }
}

#[test]
fn replaying_an_embedded_config_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.json");
    let copy = dir.path().join("copy.json");
    let mut args = fit_args();
    let path = first.to_str().unwrap().to_string();
    args.extend(["-o", &path]);
    assert!(ecoinfer(&args).status.success());
    std::fs::copy(&first, &copy).unwrap();
    let out = ecoinfer(&["--config", copy.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&copy).unwrap());
}

#[test]
fn missing_share_column_exits_one() {
    let out = ecoinfer(&["fit", "-i", FIXTURE, "--outcome", "y", "--shares", "white,hispanic"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("hispanic"));
}

#[test]
fn outcome_outside_bounds_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "y,a,b\n0.5,0.2,0.8\n1.4,0.6,0.4\n0.3,0.9,0.1\n").unwrap();
    let out = ecoinfer(&["fit", "-i", p.to_str().unwrap(), "--outcome", "y", "--shares", "a,b", "--bounds", "0", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bounds"));
}

#[test]
fn bad_flags_exit_one() {
    assert_eq!(ecoinfer(&["fit", "--nonsense"]).status.code(), Some(1));
    assert_eq!(ecoinfer(&[]).status.code(), Some(1));
    assert_eq!(ecoinfer(&["--help"]).status.code(), Some(0));
}

#[test]
fn rho_zero_gives_zero_bounds() {
    let out = ecoinfer(&[
        "sensitivity", "-i", FIXTURE, "--outcome", "y", "--shares", "white,black", "--group", "white", "--rho", "0",
        "--grid", "3x3", "--no-benchmarks",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let got: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = got["contour"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r["bound"].as_f64().unwrap() == 0.0));
}

#[test]
fn contrast_of_wrong_length_is_rejected() {
    let out = ecoinfer(&[
        "sensitivity", "-i", FIXTURE, "--outcome", "y", "--shares", "white,black", "--contrast", "1,-1,0",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seeded_simulation_and_benchmark_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let data = dir.path().join(format!("d{k}.csv"));
        let truth = dir.path().join(format!("t{k}.csv"));
        let out = ecoinfer(&[
            "simulate", "--m", "50", "--seed", "7", "--data-csv", data.to_str().unwrap(), "--truth-csv",
            truth.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let summary = dir.path().join(format!("s{k}.csv"));
        let raw = dir.path().join(format!("r{k}.csv"));
        let out = ecoinfer(&[
            "benchmark", "--m", "60", "--reps", "1", "--seed", "7", "--summary-csv", summary.to_str().unwrap(),
            "--raw-csv", raw.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        runs.push([data, truth, raw]);
    }
    for (a, b) in runs[0].iter().zip(&runs[1]).take(2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    // The raw results agree except for the wall-time column.
    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(&runs[0][2]), strip(&runs[1][2]));
    let raw = std::fs::read_to_string(&runs[0][2]).unwrap();
    assert!(raw.starts_with("rep,seed,method,group,estimate,std_error,truth,seconds"));
}
