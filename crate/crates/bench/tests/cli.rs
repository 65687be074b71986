//! End-to-end checks of the `bench` binary: artifacts, exit codes, report
//! aggregation, config-file precedence.

use std::path::Path;
use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn latency_run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let output = bench()
        .args(["latency", "--path", "rtp-udp", "--profile", "wifi", "--duration", "5"])
        .args(["--seed", "11", "--trace"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("rtp-udp over wifi"), "stdout: {stdout}");

    let samples = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert!(samples.starts_with("seq,capture_us,display_us,latency_us\n"));
    assert!(samples.lines().count() > 200);
    let run_json = std::fs::read_to_string(out.join("run.json")).unwrap();
    assert!(run_json.contains("\"path\": \"rtp-udp\""));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("ts_us,event,bytes\n"));
}

#[test]
fn determinism_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let read = |out: &Path| std::fs::read_to_string(out.join("samples.csv")).unwrap();
    for out in [dir.path().join("a"), dir.path().join("b")] {
        let status = bench()
            .args(["latency", "--path", "moq", "--profile", "fiveg", "--duration", "5"])
            .args(["--seed", "4"])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(read(&dir.path().join("a")), read(&dir.path().join("b")));
}

#[test]
fn bad_arguments_exit_nonzero_with_detail() {
    let output = bench()
        .args(["latency", "--path", "webrtc", "--profile", "wifi"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown path"));

    let output = bench()
        .args(["latency", "--path", "dash", "--profile", "lte"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown profile"));

    let output = bench()
        .args(["latency", "--path", "dash", "--profile", "wifi", "--duration", "3"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("at least 5 s"));

    let output = bench()
        .args(["fps", "--ingest", "pipe", "--frames", "10"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("300"));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"path": "rtp-smt", "seed": 42}"#).unwrap();
    let out = dir.path().join("out");
    let output = bench()
        .args(["latency", "--path", "rtp-udp", "--profile", "zero", "--duration", "5"])
        .args(["--seed", "1"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let run_json = std::fs::read_to_string(out.join("run.json")).unwrap();
    assert!(run_json.contains("\"path\": \"rtp-smt\""), "config file must win: {run_json}");
    assert!(run_json.contains("\"seed\": 42"));
}

#[test]
fn report_aggregates_runs_and_fps() {
    let dir = tempfile::tempdir().unwrap();
    let run_out = dir.path().join("r");
    assert!(bench()
        .args(["latency", "--path", "lldash", "--profile", "zero", "--duration", "6"])
        .args(["--seed", "2"])
        .arg("--out")
        .arg(&run_out)
        .status()
        .unwrap()
        .success());
    let fps_out = dir.path().join("f");
    assert!(bench()
        .args(["fps", "--ingest", "inproc", "--res", "640x360", "--frames", "300"])
        .arg("--out")
        .arg(&fps_out)
        .status()
        .unwrap()
        .success());

    let output = bench()
        .args(["report", "--format", "md"])
        .arg(run_out.join("run.json"))
        .arg(fps_out.join("fps-inproc-640x360.json"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let md = String::from_utf8_lossy(&output.stdout);
    assert!(md.contains("Protocol | Latency_avg (ms) | Latency_dev (ms)"), "{md}");
    assert!(md.contains("| lldash |"));
    assert!(md.contains("| inproc | 640x360 |"));

    let output = bench()
        .args(["report", "--format", "json"])
        .arg(run_out.join("run.json"))
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(serde_json::from_slice::<serde_json::Value>(&output.stdout).is_ok());
}

#[test]
fn env_seed_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = bench()
        .args(["latency", "--path", "rtp-udp", "--profile", "zero", "--duration", "5"])
        .env("RRSB_SEED", "977")
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let run_json = std::fs::read_to_string(out.join("run.json")).unwrap();
    assert!(run_json.contains("\"seed\": 977"), "{run_json}");
}
