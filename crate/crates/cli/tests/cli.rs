//! End-to-end tests of the command-line interface: exit codes, file
//! contracts, and byte-for-byte determinism.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cate-forge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_predictions(path: &Path) {
    let mut text = String::from("site_1,site_2,site_3\n");
    for i in 0..200 {
        let t = i as f64 / 200.0;
        text.push_str(&format!("{},{},{}\n", t, 2.0 * t - 0.5, t * t));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn weights_then_aggregate_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.csv");
    write_predictions(&preds);
    let weights = dir.path().join("weights.json");
    let out = run(&[
        "weights",
        "--predictions",
        preds.to_str().unwrap(),
        "--method",
        "regret",
        "--oracle-check",
        "--out",
        weights.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = std::fs::read_to_string(&weights).unwrap();
    assert!(doc.contains("\"method\": \"regret\""), "{doc}");
    assert!(doc.contains("worst_case_regret"), "{doc}");

    let combined = dir.path().join("combined.csv");
    let out = run(&[
        "aggregate",
        "--predictions",
        preds.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        combined.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&combined).unwrap();
    assert!(text.starts_with("tau\n"));
    assert_eq!(text.lines().count(), 201);

    // Evaluating against the site predictions themselves: worst-case
    // regret must match the weights document's report.
    let report = dir.path().join("report.json");
    let out = run(&[
        "evaluate",
        "--ensemble",
        combined.to_str().unwrap(),
        "--truth",
        preds.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.contains("per_site_regret"), "{report_text}");
    assert!(report_text.contains("worst_case_regret"), "{report_text}");
}

#[test]
fn weights_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.csv");
    write_predictions(&preds);
    let w1 = dir.path().join("w1.json");
    let w2 = dir.path().join("w2.json");
    for out_path in [&w1, &w2] {
        let out = run(&[
            "weights",
            "--predictions",
            preds.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&w1).unwrap(), std::fs::read(&w2).unwrap());
}

#[test]
fn simulate_is_deterministic_and_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out_dir in [&out1, &out2] {
        let out = bin()
            .env("CATE_FORGE_THREADS", "2")
            .args([
                "simulate",
                "--setting",
                "a",
                "--sites",
                "3",
                "--n-total",
                "600",
                "--n-target",
                "400",
                "--reps",
                "3",
                "--seed",
                "7",
                "--methods",
                "regret,relative-risk",
                "--site-models",
                "oracle",
                "--out-dir",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["study.csv", "plotdata.csv"] {
        let a = std::fs::read(out1.join(file)).unwrap();
        let b = std::fs::read(out2.join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    let study = std::fs::read_to_string(out1.join("study.csv")).unwrap();
    assert!(study.starts_with("method,n_reps,mean_worst_case_regret,"));
    assert!(study.contains("regret,3,"), "{study}");
    assert!(study.contains("relative_risk,3,"), "{study}");
}

#[test]
fn pooled_weights_follow_site_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.csv");
    write_predictions(&preds);
    let weights = dir.path().join("w.json");
    let out = run(&[
        "weights",
        "--predictions",
        preds.to_str().unwrap(),
        "--method",
        "pooled",
        "--site-sizes",
        "100,300,600",
        "--out",
        weights.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = std::fs::read_to_string(&weights).unwrap();
    assert!(doc.contains("1.0000000000000001e-1"), "{doc}"); // 0.1
    assert!(doc.contains("2.9999999999999999e-1"), "{doc}"); // 0.3
    assert!(doc.contains("5.9999999999999998e-1"), "{doc}"); // 0.6
}

#[test]
fn malformed_csv_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("bad.csv");
    std::fs::write(&preds, "site_1,site_2\n1.0,2.0\n1.0,oops\n").unwrap();
    let out = run(&[
        "weights",
        "--predictions",
        preds.to_str().unwrap(),
        "--out",
        dir.path().join("w.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn wrong_header_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("bad.csv");
    std::fs::write(&preds, "model_a,model_b\n1.0,2.0\n").unwrap();
    let out = run(&[
        "weights",
        "--predictions",
        preds.to_str().unwrap(),
        "--out",
        dir.path().join("w.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("site_1"));
}

#[test]
fn unknown_allocation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--allocation",
        "lopsided",
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn risk_2site_needs_two_sites() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.csv");
    write_predictions(&preds); // three sites
    let out = run(&[
        "weights",
        "--predictions",
        preds.to_str().unwrap(),
        "--method",
        "risk-2site",
        "--sigma-sq",
        "1.0,1.0",
        "--out",
        dir.path().join("w.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn aggregate_rejects_mismatched_weights() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.csv");
    write_predictions(&preds);
    let weights = dir.path().join("w.json");
    std::fs::write(
        &weights,
        "{\"method\": \"regret\", \"weights\": [0.5, 0.5], \"worst_case_regret\": 0.0, \"kkt_residual\": 0.0, \"lambda_min\": 0.0}\n",
    )
    .unwrap();
    let out = run(&[
        "aggregate",
        "--predictions",
        preds.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        dir.path().join("c.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
