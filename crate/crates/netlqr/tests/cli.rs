//! End-to-end tests of the `netlqr` binary: generate -> synthesize ->
//! simulate -> verify, exit codes, artifact hashing, and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn netlqr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netlqr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = netlqr(
        &[
            "generate", "--n", "2", "--dx", "2", "--du", "2", "--t-horizon", "6",
            "--entry-range", "0,4", "--seed", "11", "--out", "model.json",
        ],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = netlqr(
        &["synthesize", "--model", "model.json", "--out", "gains.json"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gains = std::fs::read_to_string(path(d, "gains.json")).unwrap();
    assert!(gains.contains("netlqr-gains/1"));
    // terminal matrices are zero blocks
    let parsed = netlqr::fileio::gains_from_json(&gains).unwrap();
    assert_eq!(parsed.p[7].amax(), 0.0);

    let out = netlqr(
        &[
            "simulate", "--model", "model.json", "--gains", "gains.json", "--episodes", "50",
            "--seed", "3", "--out", "trace.csv", "--trace-episodes", "2",
        ],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(path(d, "trace.csv")).unwrap();
    assert!(csv.starts_with("episode,t,subsystem,gamma"));
    // 2 episodes x 7 steps x 2 subsystems + header
    assert_eq!(csv.lines().count(), 1 + 2 * 7 * 2);
    assert!(path(d, "trace.manifest.json").exists());

    let out = netlqr(&["verify", "--model", "model.json"], d);
    assert!(
        out.status.success(),
        "verify failed: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
}

#[test]
fn rerun_synthesis_is_byte_identical_modulo_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    netlqr(
        &[
            "generate", "--n", "1", "--dx", "2", "--du", "1", "--t-horizon", "4",
            "--entry-range", "0,3", "--seed", "5", "--out", "model.json",
        ],
        d,
    );
    netlqr(&["synthesize", "--model", "model.json", "--out", "g1.json"], d);
    netlqr(&["synthesize", "--model", "model.json", "--out", "g2.json"], d);
    let strip = |name: &str| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path(d, name)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("manifest");
        serde_json::to_string(&v).unwrap()
    };
    assert_eq!(strip("g1.json"), strip("g2.json"));
}

#[test]
#[allow(clippy::needless_range_loop)]
fn invalid_model_exits_2_with_violations_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    netlqr(
        &[
            "generate", "--n", "1", "--dx", "1", "--du", "1", "--t-horizon", "2",
            "--entry-range", "0,3", "--seed", "1", "--out", "model.json",
        ],
        d,
    );
    // zero out the action cost block: R_uu is no longer PD
    let text = std::fs::read_to_string(path(d, "model.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let r = v["costs"]["shared_R"].as_array_mut().unwrap();
    for i in 1..3 {
        for j in 0..3 {
            r[i][j] = serde_json::json!(0.0);
            r[j][i] = serde_json::json!(0.0);
        }
    }
    std::fs::write(path(d, "model.json"), serde_json::to_string(&v).unwrap()).unwrap();

    let out = netlqr(&["synthesize", "--model", "model.json", "--out", "g.json"], d);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("RUU_not_PD"), "{stderr}");
}

#[test]
fn mismatched_gains_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (seed, model, gains) in [("1", "m1.json", "g1.json"), ("2", "m2.json", "g2.json")] {
        netlqr(
            &[
                "generate", "--n", "1", "--dx", "1", "--du", "1", "--t-horizon", "3",
                "--entry-range", "0,3", "--seed", seed, "--out", model,
            ],
            d,
        );
        netlqr(&["synthesize", "--model", model, "--out", gains], d);
    }
    let out = netlqr(
        &[
            "simulate", "--model", "m1.json", "--gains", "g2.json", "--episodes", "1",
            "--seed", "0", "--out", "t.csv",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn verify_catches_an_injected_gain_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = netlqr(&["verify", "--inject-gain-error"], d);
    assert_eq!(out.status.code(), Some(4));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(false));
    let failing: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == serde_json::Value::Bool(false))
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(!failing.is_empty());
    // the corrupted gain must be caught by at least one named optimality check
    assert!(
        failing.iter().any(|n| [
            "value_oracle_identity",
            "monte_carlo_consistency",
            "stationarity",
            "centralized_reduction"
        ]
        .contains(n)),
        "failing checks: {failing:?}"
    );
}

#[test]
fn verify_random_batch_and_default_scalar_pass() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = netlqr(&["verify"], d);
    assert!(out.status.success());

    let out = netlqr(
        &[
            "verify", "--random-n", "2", "--seeds", "2", "--dx", "2", "--du", "2",
            "--t-horizon", "8", "--entry-range", "0,4", "--seed", "7",
        ],
        d,
    );
    assert!(
        out.status.success(),
        "verify failed: {}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn benchmark_smoke_run_emits_timing_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = netlqr(
        &[
            "benchmark", "--n-list", "1", "--dx", "2", "--du", "2", "--t-horizon", "20",
            "--trials", "1", "--seed", "0", "--out", "timings.csv",
        ],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(path(d, "timings.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,mode,trials,mean_seconds");
    assert_eq!(lines.len(), 3); // header + decentralized + centralized
    assert!(lines[1].starts_with("1,decentralized,1,"));
    assert!(lines[2].starts_with("1,centralized,1,"));
    assert!(path(d, "timings.manifest.json").exists());
}

#[test]
fn simulate_single_episode_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    netlqr(
        &[
            "generate", "--n", "1", "--dx", "1", "--du", "1", "--t-horizon", "3",
            "--entry-range", "0,2", "--seed", "9", "--out", "model.json",
        ],
        d,
    );
    netlqr(&["synthesize", "--model", "model.json", "--out", "g.json"], d);
    let run = |out: &str| {
        netlqr(
            &[
                "simulate", "--model", "model.json", "--gains", "g.json", "--episodes", "1",
                "--seed", "42", "--out", out,
            ],
            d,
        );
        std::fs::read_to_string(path(d, out)).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}
