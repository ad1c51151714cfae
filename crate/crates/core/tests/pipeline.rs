//! The command-line pipeline end to end on a small synthetic area.

use std::fs;
use std::path::Path;

use floodcast::cli::run_command;
use floodcast::eval::{read_detail, read_report, recompute_from_detail, Averaging, REPORT_DETAIL_FILE, REPORT_FILE};
use floodcast::nas::{normalized_log, read_log, RUN_LOG_FILE, TOP_RUNS_FILE};

const DURATIONS: &str = "8,9,10,8,9,10,8,9,10,8,9,10,8,9,10,8";

fn run(args: &[&str]) -> serde_json::Value {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_command(std::iter::once("floodcast").chain(args.iter().copied()), &mut out, &mut err);
    assert_eq!(code, 0, "{args:?}: {}", String::from_utf8_lossy(&err));
    serde_json::from_slice(&out).expect("summary line is JSON")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("pipeline.json");
    fs::write(
        &path,
        r#"{
            "seed": 42,
            "train": {"batch_size": 256, "max_epochs": 2, "early_stop_patience": 1},
            "nas_segments": 4
        }"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn generate(root: &Path) -> (String, String) {
    let data = root.join("data");
    let data = data.to_str().unwrap().to_string();
    let cfg = write_config(root);
    run(&["gen-data", "--data-dir", &data, "--seed", "42", "--segments", "8", "--gauges", "3", "--events", "16", "--durations", DURATIONS]);
    run(&["prepare", "--data-dir", &data]);
    (data, cfg)
}

#[test]
fn generate_prepare_train_predict() {
    let root = tempfile::tempdir().unwrap();
    let (data, cfg) = generate(root.path());
    for f in ["segments.csv", "gauges.csv", "raw_rain.csv", "tide.csv", "events.csv", "depths.csv", "manifest.json", "weather.csv", "scaler.json"] {
        assert!(Path::new(&data).join(f).exists(), "{f}");
    }
    let before = fs::read(Path::new(&data).join("raw_rain.csv")).unwrap();
    let weather = fs::read(Path::new(&data).join("weather.csv")).unwrap();
    run(&["prepare", "--data-dir", &data]);
    assert_eq!(fs::read(Path::new(&data).join("weather.csv")).unwrap(), weather, "prepare is idempotent");
    assert_eq!(fs::read(Path::new(&data).join("raw_rain.csv")).unwrap(), before, "inputs untouched");

    let model = root.path().join("model.json");
    let m = model.to_str().unwrap();
    let s = run(&["train", "--data-dir", &data, "--config", &cfg, "--holdout-event", "E01", "--out", m]);
    assert_eq!(s["fold"], 0);
    assert!(s["test_mae_m"].as_f64().unwrap().is_finite());

    // E16 is a test event lasting 8 hours.
    let pred = root.path().join("pred.csv");
    let s = run(&["predict", "--data-dir", &data, "--model", m, "--event", "E16", "--out", pred.to_str().unwrap()]);
    assert_eq!(s["rows"], (8 - 4) * 8);
    let text = fs::read_to_string(&pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("segment_id,timestamp,depth_m"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), (8 - 4) * 8);
    assert!(rows.iter().all(|r| r.split(',').nth(2).unwrap().parse::<f64>().unwrap() >= 0.0));

    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_command(["floodcast", "train", "--data-dir", &data, "--config", &cfg, "--holdout-event", "E16", "--out", m], &mut out, &mut err);
    assert_eq!(code, 1);
    let e: serde_json::Value = serde_json::from_slice(&err).unwrap();
    assert_eq!(e["error"], "ConfigInvalid");
}

#[test]
fn nas_logs_one_record_per_config_and_resumes() {
    let root = tempfile::tempdir().unwrap();
    let (data, cfg) = generate(root.path());
    let out = root.path().join("nas");
    let o = out.to_str().unwrap();
    let s = run(&["nas", "--data-dir", &data, "--config", &cfg, "--grid", "tiny", "--out", o, "--max-runs", "1"]);
    assert_eq!(s["logged"], 1);
    let s = run(&["nas", "--data-dir", &data, "--config", &cfg, "--grid", "tiny", "--out", o, "--workers", "2"]);
    assert_eq!(s["configs"], 2);
    assert_eq!(s["logged"], 2);
    assert_eq!(s["folds"], 12);
    let records = read_log(&out.join(RUN_LOG_FILE)).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.folds.len() == 12));
    assert!(out.join(TOP_RUNS_FILE).exists());

    let fresh = root.path().join("nas_fresh");
    run(&["nas", "--data-dir", &data, "--config", &cfg, "--grid", "tiny", "--out", fresh.to_str().unwrap(), "--workers", "1"]);
    assert_eq!(normalized_log(&out.join(RUN_LOG_FILE)).unwrap(), normalized_log(&fresh.join(RUN_LOG_FILE)).unwrap());
}

#[test]
fn evaluate_is_deterministic_and_recomputable() {
    let root = tempfile::tempdir().unwrap();
    let (data, cfg) = generate(root.path());
    let models = root.path().join("models");
    let report_a = root.path().join("report_a");
    let s = run(&[
        "evaluate", "--data-dir", &data, "--config", &cfg, "--models", models.to_str().unwrap(), "--report", report_a.to_str().unwrap(), "--workers", "3",
    ]);
    assert_eq!(s["rows"].as_array().unwrap().len(), 11);

    let lines = read_report(&report_a.join(REPORT_FILE)).unwrap();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines.iter().filter(|l| l.rnn_type == "none").count(), 3);
    let detail = read_detail(&report_a.join(REPORT_DETAIL_FILE)).unwrap();
    let recomputed = recompute_from_detail(&detail, Averaging::EventsThenFolds).unwrap();
    for l in &lines {
        let (mae, rmse) = recomputed[&l.variant];
        assert!((mae - l.mae_m).abs() < 1e-12 && (rmse - l.rmse_m).abs() < 1e-12, "{}", l.variant);
    }
    let corr = fs::read_to_string(report_a.join("correlations.csv")).unwrap();
    assert_eq!(corr.lines().count(), 1 + 9);

    // Reusing the persisted fold models reproduces the report byte for byte.
    let report_b = root.path().join("report_b");
    run(&["evaluate", "--data-dir", &data, "--config", &cfg, "--models", models.to_str().unwrap(), "--report", report_b.to_str().unwrap()]);
    assert_eq!(fs::read(report_a.join(REPORT_FILE)).unwrap(), fs::read(report_b.join(REPORT_FILE)).unwrap());

    // So does retraining from scratch with one worker.
    let report_c = root.path().join("report_c");
    let models_c = root.path().join("models_c");
    run(&[
        "evaluate", "--data-dir", &data, "--config", &cfg, "--models", models_c.to_str().unwrap(), "--report", report_c.to_str().unwrap(), "--workers", "1",
    ]);
    assert_eq!(fs::read(report_a.join(REPORT_FILE)).unwrap(), fs::read(report_c.join(REPORT_FILE)).unwrap());
    assert_eq!(fs::read(report_a.join(REPORT_DETAIL_FILE)).unwrap(), fs::read(report_c.join(REPORT_DETAIL_FILE)).unwrap());
}
