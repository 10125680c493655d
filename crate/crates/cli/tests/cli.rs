mod common;

use std::fs;
use std::io::Write;
use std::process::{Command, Output, Stdio};

use common::fixture;
use serde_json::Value;

fn senseslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_senseslam"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn replay_writes_metrics_csv_and_results() {
    let out = tempfile::tempdir().unwrap();
    let o = senseslam(&[
        "replay",
        "--cases",
        path(&fixture("cases.jsonl")),
        "--mode",
        "no_kalman",
        "--config",
        path(&fixture("config.json")),
        "--embeddings",
        path(&fixture("embeddings.txt")),
        "--inventory",
        path(&fixture("inventory.txt")),
        "--out",
        path(out.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("metrics.json")).unwrap())
            .unwrap();
    let accuracy = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));
    assert_eq!(metrics["cases"], 3);
    // one case carries a human rating
    assert_eq!(metrics["human_agreement"]["cases"], 1);
    let csv = fs::read_to_string(out.path().join("confidence.csv")).unwrap();
    assert!(csv.starts_with("turn,mean,variance\n"));
    // header, the prior, then one row per other-speaker turn of the longest case
    assert_eq!(csv.lines().count(), 1 + 1 + 3);
    let results = fs::read_to_string(out.path().join("results.jsonl")).unwrap();
    let modes: Vec<String> = results
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["mode"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(modes, vec!["no_kalman"; 3]);
}

#[test]
fn replay_is_reproducible() {
    let run = |dir: &std::path::Path| {
        let o = senseslam(&[
            "replay",
            "--cases",
            path(&fixture("cases.jsonl")),
            "--config",
            path(&fixture("config.json")),
            "--embeddings",
            path(&fixture("embeddings.txt")),
            "--inventory",
            path(&fixture("inventory.txt")),
            "--out",
            path(dir),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.join("results.jsonl")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn synth_twice_with_same_seed_is_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        let o = senseslam(&[
            "synth",
            "--spec",
            path(&fixture("spec.json")),
            "--out",
            path(dir),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["embeddings.txt", "inventory.txt", "cases.jsonl"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    assert_eq!(
        fs::read_to_string(a.path().join("cases.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn synth_output_replays() {
    let corpus = tempfile::tempdir().unwrap();
    let o = senseslam(&[
        "synth",
        "--spec",
        path(&fixture("spec.json")),
        "--out",
        path(corpus.path()),
    ]);
    assert!(o.status.success());
    let out = tempfile::tempdir().unwrap();
    let o = senseslam(&[
        "replay",
        "--cases",
        path(&corpus.path().join("cases.jsonl")),
        "--embeddings",
        path(&corpus.path().join("embeddings.txt")),
        "--inventory",
        path(&corpus.path().join("inventory.txt")),
        "--mode",
        "new_interpretation",
        "--out",
        path(out.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.path().join("metrics.json").exists());
}

#[test]
fn sweep_prints_every_grid_point() {
    let o = senseslam(&[
        "sweep",
        "--grid",
        path(&fixture("grid.json")),
        "--cases",
        path(&fixture("cases.jsonl")),
        "--config",
        path(&fixture("config.json")),
        "--embeddings",
        path(&fixture("embeddings.txt")),
        "--inventory",
        path(&fixture("inventory.txt")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let points: Vec<Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(points.len(), 4);
    let acc: Vec<f64> = points
        .iter()
        .map(|p| p["accuracy"].as_f64().unwrap())
        .collect();
    assert!(acc.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn file_and_parse_failures_exit_nonzero_with_message() {
    let out = tempfile::tempdir().unwrap();
    let missing = senseslam(&[
        "replay",
        "--cases",
        "/nonexistent/cases.jsonl",
        "--embeddings",
        path(&fixture("embeddings.txt")),
        "--out",
        path(out.path()),
    ]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/cases.jsonl"));

    let bad = out.path().join("bad.json");
    fs::write(&bad, "{\"lambda_z\": \"high\"}").unwrap();
    let o = senseslam(&[
        "replay",
        "--cases",
        path(&fixture("cases.jsonl")),
        "--embeddings",
        path(&fixture("embeddings.txt")),
        "--config",
        path(&bad),
        "--out",
        path(out.path()),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json"));

    let o = senseslam(&[
        "replay",
        "--cases",
        "x",
        "--embeddings",
        "y",
        "--out",
        "z",
        "--mode",
        "fastest",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("fastest"));
}

#[test]
fn interactive_session_prints_bars_per_line() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_senseslam"))
        .args([
            "session",
            "--interactive",
            "--embeddings",
            path(&fixture("embeddings.txt")),
            "--inventory",
            path(&fixture("inventory.txt")),
            "--config",
            path(&fixture("config.json")),
            "--target",
            "mac",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"me: i typed laptop\nthem: i ate mac\n\nthem: zzz\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.matches("mac:").count(), 2, "{stdout}");
    assert_eq!(stdout.matches("macbook").count(), 2);
    assert!(stdout.contains("error:"), "{stdout}");
}

#[test]
fn published_schemas_are_current() {
    let dir = tempfile::tempdir().unwrap();
    let o = senseslam(&["schema", "--out", path(dir.path())]);
    assert!(o.status.success());
    let published = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas");
    for (name, _) in senseslam_cli::schemas() {
        assert_eq!(
            fs::read_to_string(dir.path().join(name)).unwrap(),
            fs::read_to_string(published.join(name)).unwrap_or_default(),
            "schemas/{name} is stale; regenerate with `senseslam schema --out crates/cli/schemas`"
        );
    }
}
