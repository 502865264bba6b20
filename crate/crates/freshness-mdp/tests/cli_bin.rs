//! End-to-end checks of the installed binary: flag grammar, config loading,
//! CSV artifacts, and the exit-code contract.

use std::path::PathBuf;
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_freshness-mdp"))
}

fn temp_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("freshness-bin-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn sweep_runs_and_writes_the_artifact() {
    let out = temp_dir().join("bin_sweep.csv");
    let config = temp_dir().join("bin_sweep.cfg");
    std::fs::write(&config, "grid = 0.2\ndelta_max = 8\neps_v = 1e-6\neps_lambda = 1e-4\n")
        .unwrap();
    let status = binary()
        .args(["aoii-sweep-alpha", "--config"])
        .arg(&config)
        .args(["--bmax", "1,2", "--T", "400", "--runs", "3", "--seed", "7", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# master_seed = 7"));
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data[0], "alpha,bmax,method,J_exact,J_sim,rate_sim,stderr");
    assert_eq!(data.len(), 4); // header + two token rows + one cmdp row
}

#[test]
fn validation_errors_exit_with_code_2() {
    let config = temp_dir().join("bin_bad.cfg");
    std::fs::write(&config, "q = 1.5\n").unwrap();
    let output = binary()
        .args(["aoi2-sweep-q", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("0 < q < 1"), "stderr: {stderr}");
}

#[test]
fn unknown_flags_exit_with_code_2_and_usage() {
    let output = binary().args(["solve", "--frobnicate", "1"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("usage:"));
}

#[test]
fn solve_reports_metrics_on_stdout() {
    let out = temp_dir().join("bin_solve.csv");
    let config = temp_dir().join("bin_solve.cfg");
    std::fs::write(
        &config,
        "model = aoi2-token\ndelta_max = 6\nbmax = 2\neps_v = 1e-6\n",
    )
    .unwrap();
    let output = binary()
        .args(["solve", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("J = "), "stdout: {stdout}");
    assert!(stdout.contains("c0 = ") && stdout.contains("c1 = "));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().any(|l| l == "b0,b1,delta,r,action"));
}
