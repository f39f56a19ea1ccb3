use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use tabpo_core::schema::canonical_serialize;
use tabpo_core::synth::Corpus;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn tabpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabpo"))
        .args(args)
        .env_remove("TABPO_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = tabpo(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn data_dir(root: &Path) -> PathBuf {
    let data = root.join("data");
    let spec = root.join("spec.toml");
    std::fs::write(&spec, "n_examples = 90\n").unwrap();
    ok(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    ok(&["split", "--corpus", data.join("corpus.jsonl").to_str().unwrap(), "--ratios", "0.6,0.2,0.2", "--seed", "0"]);
    data
}

#[test]
fn eval_of_gold_as_predictions_is_perfect() {
    let root = tempfile::tempdir().unwrap();
    let data = data_dir(root.path());
    let test = Corpus::read_jsonl(&data.join("test.jsonl")).unwrap();
    let preds: String = test
        .examples
        .iter()
        .map(|e| serde_json::json!({ "id": e.id, "prediction": canonical_serialize(&e.gold) }).to_string() + "\n")
        .collect();
    let pred_path = root.path().join("gold_preds.jsonl");
    std::fs::write(&pred_path, preds).unwrap();
    let out = root.path().join("eval/report.json");
    ok(&[
        "eval",
        "--gold",
        data.join("test.jsonl").to_str().unwrap(),
        "--pred",
        pred_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--codebook",
        data.join("codebook.json").to_str().unwrap(),
    ]);
    let report = json(&out);
    for level in ["code", "subcode", "span"] {
        assert_eq!(report[level]["f1"], 1.0, "{level}");
    }
    assert!(root.path().join("eval/report.confusion.csv").exists());
    let manifest = json(&root.path().join("eval/eval.manifest.json"));
    assert_eq!(manifest["subcommand"], "eval");
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 2);
}

#[test]
fn tabpo_without_sft_checkpoint_is_a_config_error() {
    let root = tempfile::tempdir().unwrap();
    let out = tabpo(&[
        "--out-dir",
        root.path().to_str().unwrap(),
        "tabpo",
        "--config",
        smoke_config().to_str().unwrap(),
        "--sft-checkpoint",
        root.path().join("missing.ckpt").to_str().unwrap(),
        "--prefs",
        root.path().join("prefs.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let record: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"]["kind"], "ConfigError");
    assert_eq!(json(&root.path().join("error.json")), record);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "[objective]\nbogus = 1\n").unwrap();
    let out = tabpo(&["--out-dir", root.path().to_str().unwrap(), "sft", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let out = tabpo(&[
        "--out-dir",
        root.path().to_str().unwrap(),
        "sft",
        "--config",
        smoke_config().to_str().unwrap(),
        "--set",
        "train.nonsense=1",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn distinct_exit_codes_per_error_kind() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().to_str().unwrap();
    let synth = tabpo(&["gen-data", "--out", dir, "--set", "n_examples=0"]);
    assert_eq!(synth.status.code(), Some(5));
    let data = data_dir(root.path());
    let input = tabpo(&[
        "--out-dir",
        dir,
        "build-prefs",
        "--gold",
        data.join("val.jsonl").to_str().unwrap(),
        "--pred",
        data.join("val.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(input.status.code(), Some(11));
    assert_ne!(synth.status.code(), input.status.code());
}

#[test]
fn ablate_emits_the_toggle_grid_table() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("ablate");
    ok(&[
        "--out-dir",
        dir.to_str().unwrap(),
        "--set",
        "train.sft_steps=5",
        "--set",
        "train.steps=2",
        "--set",
        "data.task.n_examples=60",
        "--set",
        "data.prefs.n_triples=8",
        "ablate",
        "--config",
        smoke_config().to_str().unwrap(),
        "--seeds",
        "1,2,3,4,5",
    ]);
    let table = std::fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 8 * 3);
    assert!(rows.iter().all(|r| r.ends_with(",5")));
    let manifest = json(&dir.join("ablate.manifest.json"));
    assert_eq!(manifest["config"]["seeds"], serde_json::json!([1, 2, 3, 4, 5]));
    assert_eq!(manifest["config"]["config"]["train"]["steps"], 2);
}

#[test]
fn out_dir_environment_override_is_logged() {
    let root = tempfile::tempdir().unwrap();
    let data = data_dir(root.path());
    let env_dir = root.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_tabpo"))
        .args(["split", "--corpus", data.join("corpus.jsonl").to_str().unwrap()])
        .env("TABPO_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = json(&env_dir.join("split.manifest.json"));
    assert_eq!(manifest["out_dir_env"], env_dir.to_str().unwrap());
    assert!(env_dir.join("train.jsonl").exists());
    assert!(env_dir.join("codebook.json").exists());
}
