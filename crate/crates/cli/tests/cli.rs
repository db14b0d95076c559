use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const DOUBLING: &str = "u = 1\nd = 1\nE = [[2]]\nC = [[0.7]]\nf = [{ k = [1], cos = [1.0] }]\n";

fn write_system(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(system: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skewcert")).arg("--system").arg(system).args(args).output().unwrap()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn constants_of_the_doubling_solenoid() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_system(dir.path(), "d.toml", DOUBLING);
    let v = json(&run(&sys, &["constants"]));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "constants");
    let k = &v["results"]["constants"];
    assert_eq!(k["n"], 2);
    assert!((k["j"].as_f64().unwrap() - 1.4).abs() < 1e-12);
    assert!((k["theta"].as_f64().unwrap() - 0.35).abs() < 1e-12);
    assert_eq!(v["results"]["in_cde"], true);
    assert_eq!(v["inputs"]["system"]["text"], DOUBLING);
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_system(dir.path(), "bad.toml", "u = 1\nd = 1\nE = [[2]]\nC = [[\"x\"]]\n");
    let o = run(&sys, &["constants"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["line"], 4);
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn word_cap_overrun_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_system(dir.path(), "d.toml", DOUBLING);
    let o = run(&sys, &["tau", "--q", "12", "--p", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&sys, &["--seed", "1", "--sample-cap", "10", "srb-sample", "--count", "11"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sampling_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_system(dir.path(), "d.toml", DOUBLING);
    for args in [
        &["srb-sample", "--count", "100"][..],
        &["main-inequality", "--q", "2"],
        &["generic-check", "--n", "1", "--D", "1", "--x", "0.3"],
    ] {
        let o = run(&sys, args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn tau_scan_on_the_doubling_map_is_exhausted() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_system(dir.path(), "d.toml", DOUBLING);
    let v = json(&run(&sys, &["tau", "--q", "1,2,3,4"]));
    assert_eq!(v["results"]["exhausted"], true);
    assert_eq!(v["results"]["trail"].as_array().unwrap().len(), 4);
}

#[test]
fn out_directory_and_cloud_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_system(dir.path(), "d.toml", DOUBLING);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_skewcert"))
        .arg("--system")
        .arg(&sys)
        .args(["--seed", "3", "srb-sample", "--method", "fiber", "--columns", "8", "--count", "4000", "--dump-cloud"])
        .env("SKEWCERT_OUT", &out)
        .output()
        .unwrap();
    let v = json(&o);
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(out.join("srb-sample.json")).unwrap()).unwrap();
    assert_eq!(v, on_disk);
    assert!(out.join("srb-sample_histogram.csv").exists());
    let cloud = out.join("srb-sample_cloud.csv");
    let text = std::fs::read_to_string(&cloud).unwrap();
    assert!(text.starts_with("x0,y0\n"));
    assert_eq!(text.lines().count(), 4001);
    let s =
        json(&run(&sys, &["seminorm", "--r", "0.1", "--column-width", "0.125", "--cloud", cloud.to_str().unwrap()]));
    let est = &s["results"]["estimates"][0];
    assert_eq!(est["columns"], 8);
    assert!(est["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_system(dir.path(), "d.toml", DOUBLING);
    let args = [
        "--seed",
        "5",
        "main-inequality",
        "--q",
        "3",
        "--p",
        "2",
        "--columns",
        "8",
        "--per-column",
        "500",
        "--levels",
        "2",
    ];
    let a = run(&sys, &args);
    let b = run(&sys, &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn sweep_reads_a_parameter_grid() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_system(
        dir.path(),
        "t.toml",
        "u = 1\nd = 1\nE = [[3]]\nC = [[0.7]]\nf = [{ k = [1], cos = [1.0] }]\n\n[[phi]]\nf = [{ k = [2], sin = [1.0] }]\n",
    );
    let grid = dir.path().join("grid.csv");
    std::fs::write(&grid, "# t\n0.0\n0.1\n").unwrap();
    let v = json(&run(&sys, &["sweep", "--t-grid", grid.to_str().unwrap(), "--q", "2", "--p", "2"]));
    assert_eq!(v["results"]["points"].as_array().unwrap().len(), 2);
    std::fs::write(&grid, "0.0,1.0\n").unwrap();
    assert_eq!(run(&sys, &["sweep", "--t-grid", grid.to_str().unwrap(), "--q", "2"]).status.code(), Some(2));
}

#[test]
fn product_of_two_factors() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_system(dir.path(), "a.toml", DOUBLING);
    let b =
        write_system(dir.path(), "b.toml", "u = 1\nd = 1\nE = [[3]]\nC = [[0.5]]\nf = [{ k = [1], sin = [1.0] }]\n");
    let o = Command::new(env!("CARGO_BIN_EXE_skewcert"))
        .args(["product", "--factor", a.to_str().unwrap(), "--factor", b.to_str().unwrap()])
        .output()
        .unwrap();
    let v = json(&o);
    let k = &v["results"]["constants"];
    assert_eq!(k["u"], 2);
    assert_eq!(k["d"], 2);
    assert_eq!(k["n"], 6);
}
