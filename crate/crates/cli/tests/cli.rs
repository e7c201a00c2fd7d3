use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ivr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivr"))
        .args(args)
        .current_dir(cwd)
        .env_remove("IVR_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

/// Strips the last CSV column (wall clock).
fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn validate_config_rejects_zero_k() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "bad.json", r#"{"ivr": {"K": 0}}"#);
    let o = ivr(&["validate-config", "--config", &cfg], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("K must be ≥ 1"), "{}", stderr(&o));
}

#[test]
fn validate_config_names_unknown_keys() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "typo.json", r#"{"guidance": {"betta": 2}}"#);
    let o = ivr(&["validate-config", "--config", &cfg], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("guidance.betta"), "{}", stderr(&o));
}

#[test]
fn validate_config_prints_effective_defaults() {
    let d = tempfile::tempdir().unwrap();
    let o = ivr(&["validate-config"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ivr"]["K"], 4);
    assert_eq!(v["task"]["vocab_size"], 6);
}

#[test]
fn bad_flags_are_user_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(ivr(&["train", "--no-such-flag"], d.path()).status.code(), Some(1));
    assert_eq!(ivr(&["frobnicate"], d.path()).status.code(), Some(1));
    assert_eq!(ivr(&["--help"], d.path()).status.code(), Some(0));
    let o = ivr(&["sweep", "--betas", "1,0.5", "--output-dir", "o"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn decoding_without_a_trained_value_is_a_user_error() {
    let d = tempfile::tempdir().unwrap();
    let o = ivr(&["sample", "--output-dir", "o"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("value_checkpoint"), "{}", stderr(&o));
}

#[test]
fn unreachable_backend_is_an_internal_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "remote.json",
        r#"{"base": {"kind": "remote", "endpoint": "http://127.0.0.1:9", "timeout_ms": 200, "retry_budget": 0}}"#,
    );
    let o = ivr(&["oracle", "--config", &cfg, "--output-dir", "o"], d.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_then_decode_and_replay() {
    let d = tempfile::tempdir().unwrap();
    let o = ivr(&["train", "--output-dir", "out", "--workers", "2"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let train = d.path().join("out/train");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(train.join("manifest.json")).unwrap()).unwrap();
    let iters = manifest["iterations"].as_array().unwrap();
    assert_eq!(iters.len(), 2);
    for it in iters {
        assert!(train.join(it["checkpoint"].as_str().unwrap()).is_file());
        assert!(train.join(it["trajectory_file"].as_str().unwrap()).is_file());
    }

    // Resuming a finished run is a no-op.
    let o = ivr(&["train", "--output-dir", "out", "--resume"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // Resuming with a different config is refused.
    let o = ivr(&["train", "--output-dir", "out", "--resume", "--seed", "9"], d.path());
    assert_eq!(o.status.code(), Some(1));

    let o = ivr(&["sweep", "--output-dir", "out", "--betas", "0,0.5,1,2,4"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv_path = d.path().join("out/sweep/sweep_toy_seeds0-4.csv");
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beta,mean_reward,std_reward,mean_token_kl,wall_clock_per_token");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,") && lines[1].contains(",0,0,"), "{}", lines[1]);

    // The sweep manifest alone reproduces the sweep.
    let replay = d.path().join("replay.json");
    fs::copy(d.path().join("out/sweep/manifest.json"), &replay).unwrap();
    let o = ivr(&["sweep", "--config", "replay.json", "--output-dir", "again"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let again = fs::read_to_string(d.path().join("again/sweep/sweep_toy_seeds0-4.csv")).unwrap();
    assert_eq!(without_timing(&again), without_timing(&csv));

    let o = ivr(&["beam", "--output-dir", "out"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let beam = fs::read_to_string(d.path().join("out/beam/beam-B4-b2_toy_seeds0-4.csv")).unwrap();
    let variants: Vec<&str> = beam.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["base", "iter1", "iter2"]);

    let o = ivr(&["sample", "--output-dir", "out", "--samples", "2"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let jsonl = fs::read_to_string(d.path().join("out/sample/samples_toy_seed0.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 20);
    assert!(d.path().join("out/sample/manifest.json").is_file());
}

#[test]
fn output_dir_falls_back_to_env() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ivr"))
        .args(["speed", "--block-sizes", "1,2"])
        .current_dir(d.path())
        .env("IVR_OUTPUT_DIR", d.path().join("env-root"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("env-root/speed/speed_toy_seeds0-4.csv")).unwrap();
    assert!(csv.starts_with("block_size,"));
    assert!(d.path().join("env-root/speed/manifest.json").is_file());
}

#[test]
fn oracle_and_ablation_write_reports() {
    let d = tempfile::tempdir().unwrap();
    let o = ivr(&["oracle", "--output-dir", "o", "--beta", "2"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("o/oracle/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["summary"]["converged"], true);
    assert!(m["summary"]["optimal_value"].as_f64().unwrap() > m["summary"]["base_value"].as_f64().unwrap());
    assert!(d.path().join("o/oracle/oracle_toy_beta2.json").is_file());

    let o = ivr(&["ablate", "--output-dir", "o", "--axis", "iterations", "--grid", "1,2"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("o/ablate/ablate-iterations_toy_seeds0-4.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("axis,value,mean_reward,std_reward"));
    assert_eq!(csv.lines().count(), 3);
}
