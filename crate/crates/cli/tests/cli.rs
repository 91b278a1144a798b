use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use v2g_core::run::EvaluationReport;

const SMALL: &str = r#"{
  "env.fleet_size": 40,
  "train.episodes": 2,
  "train.parallel_envs": 2,
  "train.hidden": [8],
  "eval.year_days": 30
}"#;

fn v2g(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_v2g")).args(args).output().unwrap()
}

fn config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// Every row has as many fields as the header and numbers parse.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let width = r.headers().unwrap().len();
    assert!(width > 0, "{}", path.display());
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            assert_eq!(rec.len(), width, "{}", path.display());
            rec.iter().map(String::from).collect()
        })
        .collect()
}

#[test]
fn gen_fleet_writes_default_fleet_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("a");
    assert_eq!(code(&v2g(&["gen-fleet", "--out", out.to_str().unwrap()])), 0);
    let first = read(&out.join("fleet.csv"));
    assert_eq!(csv_rows(&out.join("fleet.csv")).len(), 509);
    assert_eq!(code(&v2g(&["gen-fleet", "--out", out.to_str().unwrap()])), 0);
    assert_eq!(first, read(&out.join("fleet.csv")));

    let other = dir.path().join("b");
    assert_eq!(code(&v2g(&["gen-fleet", "--seed", "99", "--out", other.to_str().unwrap()])), 0);
    assert_ne!(first, read(&other.join("fleet.csv")));
}

#[test]
fn empty_fleet_is_header_only() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), r#"{"fleet.count": 0}"#);
    let out = dir.path().join("o");
    assert_eq!(code(&v2g(&["gen-fleet", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let text = read(&out.join("fleet.csv"));
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("id,"));
}

#[test]
fn zero_episodes_writes_only_the_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), &SMALL.replace("\"train.episodes\": 2", "\"train.episodes\": 0"));
    let out = dir.path().join("o");
    assert_eq!(code(&v2g(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let state: serde_json::Value = serde_json::from_str(&read(&out.join("checkpoint.json"))).unwrap();
    assert_eq!(state["episode"], 0);
    assert!(csv_rows(&out.join("training_log.csv")).is_empty());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = TempDir::new().unwrap();
    let full_cfg = config(dir.path(), SMALL);
    let full = dir.path().join("full");
    assert_eq!(code(&v2g(&["train", "--config", &full_cfg, "--out", full.to_str().unwrap()])), 0);

    let half = dir.path().join("half");
    std::fs::create_dir_all(&half).unwrap();
    let half_cfg = half.join("one.json");
    std::fs::write(&half_cfg, SMALL.replace("\"train.episodes\": 2", "\"train.episodes\": 1")).unwrap();
    let out = half.to_str().unwrap();
    assert_eq!(code(&v2g(&["train", "--config", half_cfg.to_str().unwrap(), "--out", out])), 0);
    assert_eq!(code(&v2g(&["train", "--config", &full_cfg, "--out", out, "--resume"])), 0);

    for f in ["model.json", "checkpoint.json", "training_log.csv"] {
        assert_eq!(read(&full.join(f)), read(&half.join(f)), "{f}");
    }
}

#[test]
fn evaluate_writes_a_consistent_report_and_parseable_series() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(code(&v2g(&["train", "--config", &cfg, "--out", o])), 0);
    let model = out.join("model.json");
    let ev = out.join("eval");
    let res =
        v2g(&["evaluate", "--config", &cfg, "--checkpoint", model.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let report: EvaluationReport = serde_json::from_str(&read(&ev.join("report.json"))).unwrap();
    report.verify().unwrap();
    assert_eq!(report.source, "macpo");
    assert_eq!(csv_rows(&ev.join("load_profile.csv")).len(), 24);
    assert_eq!(csv_rows(&ev.join("soc_distribution.csv")).len(), 21);
    assert_eq!(csv_rows(&ev.join("ev_power.csv")).len(), 20);
    assert_eq!(csv_rows(&ev.join("dispatch.csv")).len(), 20);
    assert_eq!(csv_rows(&ev.join("trajectory.csv")).len(), 20);

    // the same run twice gives the same bytes
    let again = out.join("again");
    v2g(&["evaluate", "--config", &cfg, "--checkpoint", model.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(read(&ev.join("report.json")), read(&again.join("report.json")));

    // a model trained for another agent count does not fit this configuration
    let three = config(dir.path(), &SMALL.replace("{", "{\n  \"env.n_agents\": 3,"));
    let res = v2g(&["evaluate", "--config", &three, "--checkpoint", model.to_str().unwrap(), "--out", o]);
    assert_eq!(code(&res), 2);
}

#[test]
fn uncontrolled_baseline_never_discharges() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("bl1");
    assert_eq!(code(&v2g(&["evaluate", "--config", &cfg, "--baseline", "bl1", "--out", out.to_str().unwrap()])), 0);
    let report: EvaluationReport = serde_json::from_str(&read(&out.join("report.json"))).unwrap();
    assert!(!report.discharges);
}

#[test]
fn baseline_command_runs_all_four() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("o");
    assert_eq!(code(&v2g(&["baseline", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let var = |k: &str| -> f64 {
        let r: EvaluationReport = serde_json::from_str(&read(&out.join(k).join("report.json"))).unwrap();
        let rows = csv_rows(&out.join(k).join("ev_dispatch.csv"));
        assert_eq!(rows.len(), 40);
        r.one_day_load_variance
    };
    let (v1, v2, v3, _) = (var("bl1"), var("bl2"), var("bl3"), var("bl4"));
    assert!(v3 <= v2 && v2 <= v1, "{v1} {v2} {v3}");
}

#[test]
fn idle_year_keeps_soh_constant() {
    let dir = TempDir::new().unwrap();
    // arrivals already inside the departure band, so nothing is forced
    let text = SMALL.replace(
        "{",
        "{\n  \"fleet.soc_mean\": 0.85, \"fleet.soc_std\": 0.02, \"fleet.soc_low\": 0.82, \"fleet.soc_high\": 0.88,",
    );
    let cfg = config(dir.path(), &text);
    let out = dir.path().join("o");
    assert_eq!(code(&v2g(&["simulate-year", "--config", &cfg, "--idle", "--out", out.to_str().unwrap()])), 0);
    let rows = csv_rows(&out.join("soh_year.csv"));
    assert_eq!(rows.len(), 31);
    let first: f64 = rows[0][1].parse().unwrap();
    assert!((first - 97.46).abs() < 0.01);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() == first));
}

#[test]
fn error_exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad = config(dir.path(), r#"{"fleet.nope": 1}"#);
    assert_eq!(code(&v2g(&["gen-fleet", "--config", &bad])), 2);

    let corrupt = dir.path().join("corrupt.json");
    std::fs::write(&corrupt, "{\"episode\": 3").unwrap();
    let out = dir.path().join("o");
    let res = v2g(&["evaluate", "--checkpoint", corrupt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 2);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&v2g(&["gen-fleet", "--config", missing.to_str().unwrap()])), 4);

    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    assert_eq!(code(&v2g(&["gen-fleet", "--out", file.join("sub").to_str().unwrap()])), 4);

    let cfg = config(dir.path(), r#"{"fleet.count": 10}"#);
    assert_eq!(code(&v2g(&["baseline", "--config", &cfg, "--kind", "bl9"])), 2);
}
