use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ijam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ijam")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_fixed_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = ijam(&[
        "run",
        "--trials",
        "3",
        "--seed",
        "9",
        "--transcript",
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), ijam::harness::RESULTS_HEADER);
    assert_eq!(csv.lines().count(), 4);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["trials"], 3);
    assert_eq!(summary["config"]["seed"], 9);
    let transcript = std::fs::read_to_string(dir.path().join("transcript.json")).unwrap();
    let t: Value = serde_json::from_str(&transcript).unwrap();
    assert_eq!(t["version"], ijam::protocol::TRANSCRIPT_VERSION);
}

#[test]
fn replay_emits_attack_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ijam(&[
        "run",
        "--trials",
        "1",
        "--eve-antennas",
        "4",
        "--transcript",
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success());
    let transcript = dir.path().join("transcript.json");
    let report_path = dir.path().join("report.json");
    for strategy in [
        "divergence",
        "random-guess",
        "single-antenna-nearest",
        "oracle-equalized",
    ] {
        let out = ijam(&[
            "replay",
            path(&transcript),
            "--strategy",
            strategy,
            "--eve-antennas",
            "2",
            "--out",
            path(&report_path),
        ]);
        assert!(
            out.status.success(),
            "{strategy}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        let keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["key_ber", "per_frame_accuracy", "strategy"]);
        assert_eq!(report["strategy"], strategy);
        assert!((0.0..=1.0).contains(&report["key_ber"].as_f64().unwrap()));
    }
    let stdout = ijam(&["replay", path(&transcript)]);
    assert!(stdout.status.success());
    let report: Value = serde_json::from_slice(&stdout.stdout).unwrap();
    assert_eq!(report["per_frame_accuracy"].as_array().unwrap().len(), 5);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 12, "trials": 2, "snr_db": 15, "randomization_on": false}"#,
    )
    .unwrap();
    let out = ijam(&[
        "run",
        "--config",
        path(&cfg),
        "--trials",
        "1",
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success());
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 12);
    assert_eq!(summary["config"]["trials"], 1);
    assert_eq!(summary["config"]["snr_db"], 15.0);
    assert_eq!(summary["config"]["randomization_on"], false);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = ijam(&[
        "sweep",
        "--axis",
        "eve_antennas",
        "--values",
        "1,2,4",
        "--trials",
        "2",
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_axis = ijam(&["sweep", "--axis", "colour", "--values", "1", "--out", path(dir.path())]);
    assert_eq!(unknown_axis.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&unknown_axis.stderr);
    assert!(stderr.contains("eve_antennas") && stderr.contains("snr_db"), "{stderr}");

    assert_eq!(ijam(&["run", "--eve-antennas", "0"]).status.code(), Some(1));
    assert_eq!(ijam(&["run", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(ijam(&["replay", "/nonexistent/transcript.json"]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"version\": 99}").unwrap();
    assert_eq!(ijam(&["replay", path(&bad)]).status.code(), Some(1));

    // The output path is a file, so the directory cannot be created.
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = ijam(&["run", "--trials", "1", "--out", path(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(ijam(&["--help"]).status.code(), Some(0));
}

#[test]
fn selftest_passes() {
    let out = ijam(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
