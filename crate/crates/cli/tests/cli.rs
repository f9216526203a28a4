use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixlab::losses::derive_unified_scale;

fn mixlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlab"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mixlab(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mixlab(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn scale_prints_four_decimals() {
    let table = [
        "--epsilon",
        "1e-2",
        "--classes",
        "370",
        "--negatives",
        "130816",
        "--margin",
        "0.25",
    ];
    assert_eq!(ok(&[&["scale"], &table[..]].concat()), "10.8430 16.3767\n");
    assert_eq!(
        ok(&[
            "scale",
            "--epsilon",
            "0.5",
            "--classes",
            "2",
            "--negatives",
            "1",
            "--margin",
            "0"
        ]),
        "0.0000 0.0000\n"
    );
    let out = ok(&[
        "scale",
        "--epsilon",
        "1e-22",
        "--classes",
        "370",
        "--negatives",
        "130816",
    ]);
    assert_eq!(out.split_whitespace().nth(1), Some("62.4384"));
}

#[test]
fn scale_domain_violation_is_usage_error() {
    assert_eq!(
        code(&["scale", "--epsilon", "0", "--classes", "3", "--negatives", "4"]),
        2
    );
    assert_eq!(
        code(&["scale", "--epsilon", "0.1", "--classes", "1", "--negatives", "4"]),
        2
    );
    assert_eq!(
        code(&[
            "scale",
            "--epsilon",
            "0.1",
            "--classes",
            "3",
            "--negatives",
            "4",
            "--margin",
            "2"
        ]),
        2
    );
}

#[test]
fn gen_writes_manifest_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stdout = ok(&["--output", s(a.path()), "gen"]);
    ok(&["--output", s(b.path()), "gen"]);
    for (q, n) in [("Q1", 10), ("Q2", 1000), ("Q3", 1000), ("Q4", 1000)] {
        assert!(stdout.contains(&format!("{q}: {n} pairs")), "{stdout}");
    }
    let mut names: Vec<String> = fs::read_dir(a.path().join("dataset"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "identities.csv",
            "meta.json",
            "pairs_Q1.csv",
            "pairs_Q2.csv",
            "pairs_Q3.csv",
            "pairs_Q4.csv",
            "samples.csv",
            "train_sets.csv"
        ]
    );
    for f in &names {
        let x = fs::read(a.path().join("dataset").join(f)).unwrap();
        let y = fs::read(b.path().join("dataset").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    ok(&["--output", out, "gen"]);
    ok(&[
        "--output",
        out,
        "train",
        "--train-id",
        "T1",
        "--loss",
        "arcface",
        "--epochs",
        "3",
    ]);
    let run = dir.path().join("train/arcface_T1");
    assert!(run.join("checkpoint.bin").exists());
    let lines = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);

    let ckpt = run.join("checkpoint.bin");
    let report = dir.path().join("report.json");
    let mut reports = Vec::new();
    for _ in 0..2 {
        let stdout = ok(&[
            "--output",
            out,
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--test-id",
            "Q2",
        ]);
        let acc: f64 = stdout.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!((0.5..=1.0).contains(&acc), "{stdout}");
        reports.push(fs::read(&report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let json: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(json["test_id"], "Q2");
    assert_eq!(json["n_pairs"], 1000);
    let roc = json["roc"].as_array().unwrap();
    assert_eq!(roc.first().unwrap(), &serde_json::json!([0.0, 0.0]));
    assert_eq!(roc.last().unwrap(), &serde_json::json!([1.0, 1.0]));
}

#[test]
fn epsilon_scales_land_in_metrics_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    ok(&["--output", out, "gen"]);
    ok(&[
        "--output",
        out,
        "train",
        "--train-id",
        "T1",
        "--loss",
        "mixface",
        "--epsilon",
        "1e-22",
        "--epochs",
        "1",
    ]);
    let text = fs::read_to_string(dir.path().join("train/mixface_T1/metrics.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    // 74 train identities; positive-pair batch of 64 has 64*63/2 - 32 negatives.
    let expected = derive_unified_scale(1e-22, 74, 1984, 0.25).unwrap();
    assert_eq!(header["s1"].as_f64().unwrap(), expected.s1);
    assert_eq!(header["s2"].as_f64().unwrap(), expected.s2);
    assert_eq!(header["epsilon"].as_f64().unwrap(), 1e-22);
}

#[test]
fn unknown_loss_prints_usage() {
    let out = mixlab(&["train", "--train-id", "T1", "--loss", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("Usage"), "{err}");
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(
        code(&[
            "--output",
            out,
            "eval",
            "--checkpoint",
            "/nonexistent.bin",
            "--test-id",
            "Q1"
        ]),
        3
    );
    assert_eq!(code(&["--output", out, "train", "--train-id", "T1"]), 3);
    assert_eq!(code(&["--config", "/nonexistent.toml", "gen"]), 3);
}

#[test]
fn config_file_drives_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        format!(
            "[dataset]\nseed = 4\npair_scaling = 0.005\n\n[trainer]\nepochs = 2\nwarmup_epochs = 1\n\n[loss]\nkind = \"snpair\"\n\n[output]\ndir = \"{}\"\n",
            s(dir.path())
        ),
    )
    .unwrap();
    let stdout = ok(&["--config", s(&cfg), "gen"]);
    assert!(stdout.contains("Q2: 500 pairs"), "{stdout}");
    ok(&["--config", s(&cfg), "train", "--train-id", "T3"]);
    let text = fs::read_to_string(dir.path().join("train/snpair_T3/metrics.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);

    fs::write(&cfg, "[loss]\nkind = \"mixface\"\nepsilon = 0.01\ns1 = 10.0\n").unwrap();
    assert_eq!(
        code(&[
            "--config",
            s(&cfg),
            "--output",
            s(dir.path()),
            "train",
            "--train-id",
            "T1"
        ]),
        2
    );
    fs::write(&cfg, "[trainer]\nepohcs = 2\n").unwrap();
    assert_eq!(code(&["--config", s(&cfg), "gen"]), 2);
}

#[test]
fn grid_writes_one_csv_per_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    ok(&["--output", out, "gen"]);
    let stdout = ok(&[
        "--output",
        out,
        "grid",
        "--losses",
        "arcface,snpair,mixface",
        "--epochs",
        "2",
    ]);
    assert!(stdout.contains("under"), "{stdout}");
    for loss in ["arcface", "snpair", "mixface"] {
        let csv = fs::read_to_string(dir.path().join(format!("grid/heatmap_{loss}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 17);
        for t in ["T1", "T2", "T3", "T4"] {
            assert!(dir.path().join(format!("grid/{loss}_{t}.jsonl")).exists());
        }
    }
    let summary = fs::read_to_string(dir.path().join("grid/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.starts_with("loss,under,balanced,over\narcface,"));
}

#[test]
fn conditions_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "--output",
        s(dir.path()),
        "conditions",
        "--attribute",
        "lux",
        "--values",
        "1,29",
        "--pairs",
        "40",
    ]);
    assert!(stdout.contains("gap"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("conditions/lux_arcface.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
