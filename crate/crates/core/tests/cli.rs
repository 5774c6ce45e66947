use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moelab::experiment::{parse_sweep_csv, OUTPUT_DIR_ENV};
use moelab::trainer::parse_metrics_csv;
use serde_json::{json, Value};

fn moelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelab"))
        .args(args)
        .current_dir(dir)
        .env_remove(OUTPUT_DIR_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> PathBuf {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8_lossy(&out.stdout).lines().last().unwrap().trim())
}

/// A small, fast experiment written to `dir/config.json`.
fn small_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "name": "small",
        "output_dir": dir.join("runs"),
        "model": {
            "vocab_size": 32, "model_dim": 8, "num_layers": 2, "experts_per_layer": 4, "top_k": 2,
            "shared_expert": false, "expert_hidden_dim": 8, "attention": false, "max_seq_len": 16,
            "precision": "f32"
        },
        "pretrain": { "steps": 300, "batch_size": 16, "eval_interval": 100, "eval_size": 8, "optimizer": { "lr": 0.01 } },
        "train": { "steps": 12, "batch_size": 6, "update_period": 4, "eval_interval": 5, "eval_size": 8 },
        "sweep": { "n_min": 2, "n_max": 3, "steps_per_domain": 4 }
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = moelab(dir, &["pretrain", "--config", "nope.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    fs::write(dir.join("bad.json"), r#"{"colour": 1}"#).unwrap();
    assert_eq!(moelab(dir, &["pretrain", "--config", "bad.json"]).status.code(), Some(1));

    let cfg = small_config(dir);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(moelab(dir, &["finetune", "--config", cfg, "--policy", "lora"]).status.code(), Some(1));
    assert_eq!(moelab(dir, &["finetune", "--config", cfg, "--policy", "fft"]).status.code(), Some(2));
    fs::create_dir(dir.join("empty")).unwrap();
    assert_eq!(moelab(dir, &["report", "empty"]).status.code(), Some(2));
    assert_eq!(moelab(dir, &["--help"]).status.code(), Some(0));
}

#[test]
fn pretrain_finetune_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let cfg = cfg.to_str().unwrap();
    let pre = ok(&moelab(dir, &["pretrain", "--config", cfg]));
    assert_eq!(pre, dir.join("runs/small/pretrain"));
    for f in ["config-echo.json", "metrics.csv", "events.log", "checkpoint.bin", "summary.json"] {
        assert!(pre.join(f).is_file(), "{f}");
    }
    let first = fs::read(pre.join("checkpoint.bin")).unwrap();
    ok(&moelab(dir, &["pretrain", "--config", cfg]));
    assert_eq!(fs::read(pre.join("checkpoint.bin")).unwrap(), first);

    let mut tables = Vec::new();
    for policy in ["des-moe", "static-esft", "fft"] {
        let run = ok(&moelab(dir, &["finetune", "--config", cfg, "--policy", policy, "--domains", "3"]));
        assert!(run.ends_with(format!("finetune-{policy}")));
        let text = fs::read_to_string(run.join("metrics.csv")).unwrap();
        let rows = parse_metrics_csv(&text).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 5, 10, 12]);
        assert_eq!(rows[0].domain_accuracy.len(), 3);
        tables.push(text);
    }
    assert!(tables[0] != tables[1] && tables[1] != tables[2]);

    let out = moelab(dir, &["eval", "--config", cfg, "--domains", "2"]);
    let eval = ok(&out);
    let scores: Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().next().unwrap()).unwrap();
    let lines = fs::read_to_string(eval.join("predictions.jsonl")).unwrap();
    let general: Vec<Value> = lines
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["suite"] == "general")
        .collect();
    assert_eq!(general.len(), 8);
    let hits = general.iter().filter(|v| v["answer"] == v["prediction"]).count();
    assert_eq!(scores["general"].as_f64().unwrap(), hits as f64 / 8.0);

    let runs = dir.join("runs");
    ok(&moelab(dir, &["report", runs.to_str().unwrap()]));
    let report: Value = serde_json::from_str(&fs::read_to_string(runs.join("report.json")).unwrap()).unwrap();
    let echo: Value = serde_json::from_str(&fs::read_to_string(pre.join("config-echo.json")).unwrap()).unwrap();
    assert_eq!(echo["name"], "small");
    for run in report["runs"].as_array().unwrap() {
        let rows = parse_metrics_csv(&fs::read_to_string(runs.join(run["path"].as_str().unwrap()).join("metrics.csv")).unwrap())
            .unwrap();
        let want = rows.last().unwrap().general_accuracy / rows[0].general_accuracy;
        assert_eq!(run["retention"].as_f64().unwrap(), want);
        assert_eq!(run["config_hash"], report["runs"][0]["config_hash"]);
    }
}

#[test]
fn sweep_covers_every_count_and_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let out = ok(&moelab(dir, &["sweep", "--config", cfg.to_str().unwrap(), "--n-max", "4"]));
    let rows = parse_sweep_csv(&fs::read_to_string(out.join("retention.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3 * 3);
    for policy in ["des-moe", "static-esft", "fft"] {
        assert!(rows.iter().any(|r| r.n == 2 && r.policy.to_string() == policy));
    }
    assert!(out.join("retention.png").is_file());
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["curve"].as_array().unwrap().len(), 9);
}

#[test]
fn output_dir_can_be_overridden() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let elsewhere = dir.join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_moelab"))
        .args(["pretrain", "--config", cfg.to_str().unwrap()])
        .current_dir(dir)
        .env(OUTPUT_DIR_ENV, &elsewhere)
        .output()
        .unwrap();
    assert_eq!(ok(&out), elsewhere.join("small/pretrain"));
    assert!(!dir.join("runs").exists());
}
