use std::path::Path;
use std::process::{Command, Output};

fn drivesql(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drivesql"));
    cmd.current_dir(dir)
        .args(args)
        .env_remove("DRIVESQL_CONFIG")
        .env_remove("DRIVESQL_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = drivesql(dir, args, &[]);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small database in `dir/db.json`.
fn setup(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--curated",
            "--random",
            "10",
            "--seed",
            "2",
            "-o",
            "ann.json",
        ],
    );
    ok(dir, &["build-db", "ann.json", "-o", "db.json"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let missing = drivesql(d, &["build-db", "missing.json", "-o", "x.json"], &[]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("missing.json"));

    std::fs::write(d.join("bad.jsonl"), "{\"pair_id\": 1}\n").unwrap();
    let bad = drivesql(d, &["gt-predictions", "bad.jsonl", "-o", "p.jsonl"], &[]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("bad.jsonl:1"), "{}", stderr(&bad));

    let usage = drivesql(d, &["generate"], &[]);
    assert_eq!(usage.status.code(), Some(1));
    let subtask = drivesql(
        d,
        &[
            "generate",
            "db.json",
            "--subtasks",
            "distance,flying",
            "-o",
            "p.jsonl",
        ],
        &[],
    );
    assert_eq!(subtask.status.code(), Some(1));
    assert!(stderr(&subtask).contains("flying"));
}

#[test]
fn settings_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    std::fs::write(
        d.join("run.conf"),
        "# settings\nseed = 3\nsubtasks = distance\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "--config",
            "run.conf",
            "generate",
            "db.json",
            "-o",
            "file.jsonl",
        ],
    );
    ok(
        d,
        &[
            "generate",
            "db.json",
            "--seed",
            "3",
            "--subtasks",
            "distance",
            "-o",
            "flags.jsonl",
        ],
    );
    let read = |f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    assert_eq!(read("file.jsonl"), read("flags.jsonl"));

    let env = drivesql(
        d,
        &[
            "--config",
            "run.conf",
            "generate",
            "db.json",
            "-o",
            "env.jsonl",
        ],
        &[("DRIVESQL_SEED", "4")],
    );
    assert!(env.status.success());
    ok(
        d,
        &[
            "generate",
            "db.json",
            "--seed",
            "4",
            "--subtasks",
            "distance",
            "-o",
            "seed4.jsonl",
        ],
    );
    assert_eq!(read("env.jsonl"), read("seed4.jsonl"));
    assert_ne!(read("env.jsonl"), read("file.jsonl"));

    std::fs::write(d.join("typo.conf"), "seed = 3\nwindow = 2\n").unwrap();
    let typo = drivesql(
        d,
        &[
            "--config",
            "typo.conf",
            "generate",
            "db.json",
            "-o",
            "x.jsonl",
        ],
        &[],
    );
    assert_eq!(typo.status.code(), Some(1));
    assert!(
        stderr(&typo).contains("typo.conf: line 2"),
        "{}",
        stderr(&typo)
    );
}

#[test]
fn manifests_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["generate", "db.json", "--seed", "8", "-o", "a.jsonl"]);
    let first = std::fs::read(d.join("a.jsonl")).unwrap();
    ok(d, &["generate", "db.json", "--seed", "8", "-o", "a.jsonl"]);
    assert_eq!(first, std::fs::read(d.join("a.jsonl")).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("a.jsonl.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["output_paths"][0], "a.jsonl");
    assert_eq!(
        manifest["input_digests"]["db.json"].as_str().unwrap().len(),
        64
    );
    assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);

    ok(d, &["split", "a.jsonl", "--seed", "1", "-o", "parts"]);
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("parts/split.json")).unwrap())
            .unwrap();
    let total: usize = ["train", "val", "test"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .sum();
    assert_eq!(total, 25);
    assert!(d.join("parts/manifest.json").exists());
}

#[test]
fn eval_reports_undefined_groups() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["generate", "db.json", "-o", "pairs.jsonl"]);
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let out = drivesql(
        d,
        &["eval", "pairs.jsonl", "empty.jsonl", "-o", "report.json"],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("perception_mae"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["groups"]["risk_map"], 0.0);
}
