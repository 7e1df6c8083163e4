//! End-to-end tests of the `auxnas` binary: artifact determinism, exit
//! codes, and the train -> prune -> eval round trip.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_auxnas")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .env_remove("AUXNAS_SEED")
        .output()
        .expect("spawn auxnas")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn base_config(mode: &str, out_dir: &str) -> String {
    format!(
        r#"{{
  "mode": "{mode}",
  "net": {{ "n_layers": 4, "width": 12 }},
  "seed": 5,
  "data": {{ "synthetic": {{
    "family": {{
      "input_dim": 6,
      "relatedness": 0.9,
      "tasks": [ {{ "regression": {{ "dim": 1 }} }}, {{ "regression": {{ "dim": 1 }} }} ],
      "noise_std": [0.05, 0.05]
    }},
    "n_samples": 120,
    "family_seed": 11
  }}}},
  "train": {{ "epochs": 2, "batch_size": 12 }},
  "output_dir": "{out_dir}"
}}"#
    )
}

#[test]
fn train_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.json"), base_config("aux_nas", "a")).unwrap();
    assert_ok(&run(dir, &["train", "--config", "cfg.json"]));
    assert_ok(&run(dir, &["train", "--config", "cfg.json", "--set", "output_dir=b"]));
    for f in ["model.json", "steps.csv", "report.json"] {
        let a = fs::read(dir.join("a").join(f)).unwrap();
        let b = fs::read(dir.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = base_config("single", "out").replace("\"seed\": 5,", "\"seed\": 5, \"warmup\": 3,");
    fs::write(dir.join("cfg.json"), cfg).unwrap();
    let out = run(dir, &["train", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("warmup"), "key not named in: {msg}");
}

#[test]
fn missing_config_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["train", "--config", "nope.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flops_table_1_instantiation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["flops", "--n", "100", "--m", "10", "--k", "1"]);
    assert_ok(&out);
    let rows: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("flops prints JSON");
    let get = |name: &str| -> f64 {
        rows.as_array()
            .unwrap()
            .iter()
            .find(|r| r["method"] == name)
            .unwrap_or_else(|| panic!("missing {name}"))["flops"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(get("ours"), 100.0);
    assert_eq!(get("soft_mtl"), 210.0);
    assert_eq!(get("hard_attention"), 110.0);
    assert_eq!(get("adashare_bound"), 100.0);
}

#[test]
fn train_prune_eval_round_trip_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.json"), base_config("aux_nas", "out")).unwrap();
    assert_ok(&run(dir, &["train", "--config", "cfg.json"]));
    assert_ok(&run(dir, &["prune", "--model", "out/model.json", "--out", "out/pruned.json"]));
    let eval = |model: &str| -> (Vec<u8>, serde_json::Value) {
        let out = run(dir, &["eval", "--model", model, "--config", "cfg.json"]);
        assert_ok(&out);
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        (out.stdout.clone(), v)
    };
    // the supernet is pruned in memory before evaluation, so its metrics
    // must match the pruned file exactly
    let (_, full) = eval("out/model.json");
    let (_, pruned) = eval("out/pruned.json");
    assert_eq!(full["metrics"], pruned["metrics"]);
    assert_eq!(full["pruned_for_eval"], true);
    assert_eq!(pruned["pruned_for_eval"], false);

    // re-running each stage on unchanged inputs reproduces bytes
    assert_ok(&run(dir, &["prune", "--model", "out/model.json", "--out", "out/pruned2.json"]));
    assert_eq!(
        fs::read(dir.join("out/pruned.json")).unwrap(),
        fs::read(dir.join("out/pruned2.json")).unwrap()
    );
    let (bytes1, _) = eval("out/pruned.json");
    let (bytes2, _) = eval("out/pruned.json");
    assert_eq!(bytes1, bytes2);
}

#[test]
fn every_mode_trains_and_writes_artifacts() {
    for mode in ["single", "symmetric", "aux_head", "aux_g_stage", "aux_g_layer", "aux_nas"] {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        fs::write(dir.join("cfg.json"), base_config(mode, "out")).unwrap();
        let out = run(dir, &["train", "--config", "cfg.json"]);
        assert_ok(&out);
        for f in ["model.json", "report.json", "steps.csv"] {
            assert!(dir.join("out").join(f).exists(), "{mode} missing {f}");
        }
    }
}

#[test]
fn env_seed_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.json"), base_config("single", "a")).unwrap();
    let out = Command::new(bin())
        .current_dir(dir)
        .args(["train", "--config", "cfg.json"])
        .env("AUXNAS_SEED", "6")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_ok(&run(dir, &["train", "--config", "cfg.json", "--set", "seed=6", "--set", "output_dir=b"]));
    assert_eq!(
        fs::read(dir.join("a/model.json")).unwrap(),
        fs::read(dir.join("b/model.json")).unwrap()
    );
}

#[test]
fn protocol_writes_result_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = base_config("aux_nas", "out").replace(
        "\"seed\": 5,",
        "\"seed\": 5, \"seeds\": [1, 2], \"methods\": [\"single\", \"aux_nas\"],",
    );
    fs::write(dir.join("cfg.json"), cfg).unwrap();
    assert_ok(&run(dir, &["protocol", "--config", "cfg.json", "--jobs", "2"]));
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/results.json")).unwrap()).unwrap();
    assert_eq!(table["cells"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(dir.join("out/results.csv")).unwrap();
    assert!(csv.starts_with("method,seed,mse,rmse,accuracy,failed"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn gradcheck_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["gradcheck", "--rounds", "2"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck ok"));
}
