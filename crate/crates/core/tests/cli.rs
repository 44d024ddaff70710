use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_implied-longevity")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn generate_calibrate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let panel = path(dir.path(), "panel.csv");
    let artifact = path(dir.path(), "fit.json");

    ok(&["generate", "--weeks", "30", "--missing", "2", "--ages", "55,65,75", "--guarantees", "0,10", "--output", &panel]);
    assert!(dir.path().join("panel.meta.json").exists());
    let csv = std::fs::read_to_string(&panel).unwrap();
    // 28 weeks, 2 genders, 3 ages, 2 guarantees, plus the header
    assert_eq!(csv.lines().count(), 28 * 12 + 1);

    ok(&["calibrate", "--input", &panel, "--output", &artifact]);
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&artifact).unwrap()).unwrap();
    let m0 = fit["fits"][0]["trend"]["m0"].as_f64().unwrap();
    assert!((m0 - 92.60).abs() < 1e-6, "{m0}");

    let priced = ok(&["price", "--input", &artifact, "--age", "65", "--date", "2004-10", "--gender", "m", "--format", "json"]);
    let table: serde_json::Value = serde_json::from_str(&priced).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 1);

    let isp = ok(&["report", "--kind", "isp", "--input", &artifact, "--date", "September 2004"]);
    assert_eq!(isp.lines().count(), 1 + 2 * 3);
    for line in isp.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    let ft = ok(&["ftest", "--input", &panel, "--gender", "f"]);
    assert!(ft.lines().nth(1).unwrap().contains("true"));
}

#[test]
fn direct_f_test() {
    let out = ok(&["ftest", "--sse-restricted", "2.0", "--sse-full", "1.0", "--n", "1000", "--p", "8", "--g", "6", "--k", "8", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let f = v["rows"][0][7].as_f64().unwrap();
    assert!((f - 992.0 / 2.0).abs() < 1e-9, "{f}");
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let out = run(&["calibrate", "--input", "/definitely/not/here.csv"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("not/here"));
}
