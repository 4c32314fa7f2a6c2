use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phyloprobit::diagnostics::ChainTable;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phyloprobit"))
}

fn toy(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy10").join(file)
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("JSON error line on stderr");
    serde_json::from_str(line).unwrap()
}

fn sample_args(out: &Path) -> Vec<String> {
    vec![
        "sample".into(),
        "--tree".into(),
        toy("tree.nwk").display().to_string(),
        "--traits".into(),
        toy("traits.csv").display().to_string(),
        "--spec".into(),
        toy("spec.json").display().to_string(),
        "--config".into(),
        toy("config.json").display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]
}

#[test]
fn sample_on_toy_data_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let started = std::time::Instant::now();
    let mut args = sample_args(dir.path());
    args.extend(["--highlight".into(), "0.3".into()]);
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(started.elapsed().as_secs() < 60);
    for f in ["chain_1.csv", "chain_2.csv", "summary.json", "tuning.json", "trace.csv", "heatmap.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let table = ChainTable::from_path(&dir.path().join("chain_1.csv")).unwrap();
    assert_eq!(table.len(), 500);
    assert_eq!(table.correlation_dim(), 5);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["chains"], 2);
    assert_eq!(summary["partial_correlations"].as_array().unwrap().len(), 10);
    let heat = std::fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 25);
}

#[test]
fn sample_is_reproducible_for_a_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let mut args = sample_args(d.path());
        args.extend(["--iterations".into(), "100".into(), "--burnin".into(), "50".into(), "--chains".into(), "1".into()]);
        assert!(bin().args(&args).status().unwrap().success());
    }
    let read = |d: &tempfile::TempDir| ChainTable::from_path(&d.path().join("chain_1.csv")).unwrap();
    let (ta, tb) = (read(&a), read(&b));
    let skip = ta.columns.iter().position(|c| c == "seconds").unwrap();
    for (k, (ca, cb)) in ta.values.iter().zip(&tb.values).enumerate() {
        if k != skip {
            assert_eq!(ca, cb, "column {}", ta.columns[k]);
        }
    }
}

#[test]
fn summarize_reads_chain_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin().args(sample_args(dir.path())).status().unwrap().success());
    let report = dir.path().join("report");
    let out = bin()
        .args(["summarize", "--out"])
        .arg(&report)
        .arg(dir.path().join("chain_1.csv"))
        .arg(dir.path().join("chain_2.csv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(report.join("summary.json").is_file());
    let out = bin().arg("summarize").arg(dir.path().join("chain_1.csv")).output().unwrap();
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["chains"], 1);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = sample_args(dir.path());
    args[2] = "does-not-exist.nwk".into();
    let out = bin().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "data");
}

#[test]
fn malformed_trait_table_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "taxon,size,b1,b2,cat\nt1,0.1,2,0,c1\n").unwrap();
    let mut args = sample_args(dir.path());
    args[4] = bad.display().to_string();
    let out = bin().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"lkj": 2}"#).unwrap();
    let mut args = sample_args(dir.path());
    args[8] = cfg.display().to_string();
    let out = bin().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "config");
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().args(["sample", "--help"]).output().unwrap().status.code(), Some(0));
    let out = bin().args(["benchmark", "--target", "orthant256", "--sampler", "lg-nuts"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn orthant_benchmark_writes_rows_and_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let (table, log) = (dir.path().join("bench.csv"), dir.path().join("events.csv"));
    let out = bin()
        .args(["benchmark", "--target", "orthant256", "--sampler", "zigzag", "--dim", "8", "--iters", "300", "--reps", "2", "--out"])
        .arg(&table)
        .arg("--event-log")
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "min_ess"));
    assert_eq!(rdr.records().count(), 2);
    let events = std::fs::read_to_string(&log).unwrap();
    assert_eq!(events.lines().next(), Some("seed,iteration,time,kind,dim"));
    assert!(events.lines().count() > 100);
}

#[test]
fn in_process_entry_point_reports_codes() {
    assert_eq!(phyloprobit::cli::run_from(["phyloprobit", "--version"]), 0);
    assert_eq!(phyloprobit::cli::run_from(["phyloprobit", "summarize", "/nonexistent/chain.csv"]), 2);
}
