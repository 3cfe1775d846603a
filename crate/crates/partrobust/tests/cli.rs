//! End-to-end CLI contract tests against the built binary.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partrobust"))
}

/// A config small enough to train in seconds.
fn tiny_config(out: &Path) -> String {
    format!(
        r#"{{
  "dataset": {{ "classes": 2, "parts": 2, "height": 16, "width": 16,
                "n_train": 64, "n_val": 16, "n_test": 16 }},
  "model": {{ "classes": 2, "parts": 2, "height": 16, "width": 16,
              "head": "downsampled", "pool": 2, "width_base": 4 }},
  "loss": {{ "kind": "pgd_adv", "c_seg": 0.5 }},
  "attack": {{ "epsilon": 0.03137254901960784, "iterations": 2, "restarts": 1 }},
  "train": {{ "lr0": 0.05, "batch_size": 16, "pretrain_epochs": 1, "train_epochs": 1,
              "val_adv_subset": 8 }},
  "eval": {{ "attack": {{ "epsilon": 0.03137254901960784, "iterations": 2, "restarts": 1 }},
             "split": "val", "subset": 16 }},
  "output_dir": "{}"
}}"#,
        out.display()
    )
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn gen_data_writes_manifest_matching_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny_config(&out));
    let status = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("resolved_config.json").exists());
    assert!(out.join("run.log").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("dataset/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["spec"]["classes"], 2);
    assert_eq!(manifest["counts"]["train"], 64);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["dataset"]["classes"], manifest["spec"]["classes"]);
}

#[test]
fn unknown_config_key_exits_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(
        tmp.path(),
        &format!(r#"{{ "output_dir": "{}", "no_such_key": 1 }}"#, out.display()),
    );
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(!out.exists(), "no artifacts on config error");
}

#[test]
fn train_then_eval_reproduces_recorded_val_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny_config(&out));
    let status = bin().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert!(status.success());
    assert!(out.join("checkpoint.ckpt").exists());
    assert!(out.join("history.jsonl").exists());

    // Evaluate on the val split with the training eval attack (iterations
    // and subset in the config match val_adv_subset and eval_attack).
    let status = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--set", "eval.subset=8"])
        .status()
        .unwrap();
    assert!(status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let ckpt_bytes = fs::read(out.join("checkpoint.ckpt")).unwrap();
    // Metadata JSON sits after magic(4) + version(4) + len(8).
    let meta_len = u64::from_le_bytes(ckpt_bytes[8..16].try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(&ckpt_bytes[16..16 + meta_len]).unwrap();
    let recorded = meta["val_adv_acc"].as_f64().unwrap();
    let evaluated = metrics["adv_acc"].as_f64().unwrap();
    assert_eq!(recorded, evaluated, "reload+eval must reproduce val metrics");
    assert!(out.join("outcomes.jsonl").exists());
}

#[test]
fn repeated_command_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny_config(&out));
    for _ in 0..2 {
        assert!(bin().args(["train", "--config"]).arg(&cfg).status().unwrap().success());
    }
    let first = fs::read(out.join("checkpoint.ckpt")).unwrap();
    assert!(bin().args(["train", "--config"]).arg(&cfg).status().unwrap().success());
    let second = fs::read(out.join("checkpoint.ckpt")).unwrap();
    assert_eq!(first, second, "identical config+seed must rebuild identical bytes");
}

#[test]
fn env_seed_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny_config(&out));
    assert!(bin().args(["train", "--config"]).arg(&cfg).status().unwrap().success());
    let base = fs::read(out.join("checkpoint.ckpt")).unwrap();
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .env("PARTROBUST_SEED", "99")
        .status()
        .unwrap()
        .success());
    let seeded = fs::read(out.join("checkpoint.ckpt")).unwrap();
    assert_ne!(base, seeded);
}

#[test]
fn sweep_and_report_emit_frontier_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut body: serde_json::Value = serde_json::from_str(&tiny_config(&out)).unwrap();
    body["sweep"] = serde_json::json!({ "c_seg": [0.2, 0.8] });
    let cfg = write_config(tmp.path(), &body.to_string());
    let status = bin().args(["sweep", "--config"]).arg(&cfg).status().unwrap();
    assert!(status.success());
    let rows = fs::read_to_string(out.join("sweep_results.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let csv = fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert!(csv.starts_with("model,head,param,clean_acc,adv_acc,pareto"));
    assert_eq!(csv.lines().count(), 3);

    // report regenerates the csv from sweep_results.jsonl alone.
    fs::remove_file(out.join("tradeoff.csv")).unwrap();
    let status = bin().args(["report", "--config"]).arg(&cfg).status().unwrap();
    assert!(status.success());
    assert!(out.join("tradeoff.csv").exists());
}

#[test]
fn attack_command_runs_against_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny_config(&out));
    assert!(bin().args(["train", "--config"]).arg(&cfg).status().unwrap().success());
    let status = bin()
        .args(["attack", "--config"])
        .arg(&cfg)
        .args(["--set", "eval.subset=4", "--set", "eval.use_square=true"])
        .status()
        .unwrap();
    assert!(status.success());
    let outcomes = fs::read_to_string(out.join("outcomes.jsonl")).unwrap();
    // 4 samples, two attacks each (PGD restarts + square).
    assert_eq!(outcomes.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(outcomes.lines().next().unwrap()).unwrap();
    assert_eq!(first["y_attacks"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_checkpoint_is_a_load_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny_config(&out));
    let output = bin().args(["eval", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn preset_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut found = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let text = fs::read_to_string(&path).unwrap();
            partrobust::config::RunConfig::from_json(&text, &[], None)
                .unwrap_or_else(|e| panic!("{} invalid: {e}", path.display()));
            found += 1;
        }
    }
    assert_eq!(found, 9, "expected the nine named ablation presets");
}
