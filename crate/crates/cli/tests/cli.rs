use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn beatnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beatnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = beatnet(&["synth", "--suite", "default", "--n-per-class", "4", "--seed", "3", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

const TINY: &str = r#"{
  "model": {"d_model": 8, "word_blocks": 1, "word_channels": 2, "tx_layers": 1, "tx_heads": 2,
            "tx_ff_dim": 16, "max_time_blocks": 16},
  "train": {"epochs": 2, "batch_size": 8, "lr": 0.003},
  "tokenizer": {"token_len": 40, "seq_len": 144}
}"#;

fn tiny_config(dir: &Path, data: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    let mut cfg: serde_json::Value = serde_json::from_str(TINY).unwrap();
    cfg["data"] = serde_json::json!(data);
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn version_names_format() {
    let out = beatnet(&["--version"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("format version 1"), "{text}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(beatnet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(beatnet(&["synth", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(beatnet(&["ablate", "--variants", "full,nope"]).status.code(), Some(2));
    assert_eq!(beatnet(&["preprocess", "--in", "a", "--out", "b", "--band", "40"]).status.code(), Some(2));
}

#[test]
fn synth_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let m = read_json(&data.join("manifest.json"));
    let n = ["train", "val", "test"].iter().map(|s| m[s].as_array().unwrap().len()).sum::<usize>();
    assert_eq!(n, 36);
    let run = read_json(&data.join("run_manifest.json"));
    assert_eq!(run["seed"], 3);
    assert_eq!(run["outputs"].as_object().unwrap().len(), 38);
    assert!(run["outputs"].as_object().unwrap().values().all(|d| d.as_str().unwrap().len() == 64));
    assert!(data.join("truth.json").exists());
}

#[test]
fn validation_failure_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let out = beatnet(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("r")), "--lr", "-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid lr"));

    let out = beatnet(&["train", "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid data"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    let out = beatnet(&["train", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}

#[test]
fn eval_reproduces_final_epoch_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    let out = beatnet(&["train", "--config", p(&cfg), "--out", p(&run), "--threads", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["best.ckpt", "last.ckpt", "history.json", "metrics.csv", "report.json", "run_manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let history = read_json(&run.join("history.json"));
    assert_eq!(history["epochs"].as_array().unwrap().len(), 2);

    let ev = dir.path().join("eval");
    let out = beatnet(&["eval", "--ckpt", p(&run.join("last.ckpt")), "--data", p(&data), "--split", "val", "--out", p(&ev)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(run.join("report.json")).unwrap(),
        std::fs::read_to_string(ev.join("report.json")).unwrap()
    );
    assert_eq!(history["epochs"][1]["val"], read_json(&ev.join("report.json")));
}

#[test]
fn ablation_csv_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let csv = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = beatnet(&[
            "ablate", "--config", p(&cfg), "--out", p(&out_dir), "--variants", "full,no_st", "--seeds", "1,2", "--epochs", "1",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("metrics.csv")).unwrap()
    };
    let a = csv("a");
    assert_eq!(a, csv("b"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("variant,tokenization,fraction,seed,n_train,macro_auroc,val_loss,irregular_rr,"));
    assert_eq!(text.lines().count(), 5);
    let summary = std::fs::read_to_string(dir.path().join("a/summary.csv")).unwrap();
    assert!(summary.starts_with("variant,runs,median_macro_auroc\nfull,2,"));
}

#[test]
fn efficiency_and_tokenization_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let eff = dir.path().join("eff");
    let out = beatnet(&["efficiency", "--config", p(&cfg), "--out", p(&eff), "--fractions", "0.5,1.0", "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(eff.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["fraction", "0.5", "1"]);

    let tok = dir.path().join("tok");
    let out = beatnet(&["tokenization", "--config", p(&cfg), "--out", p(&tok), "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(tok.join("summary.csv")).unwrap();
    assert!(summary.contains("\nqrs,1,") && summary.contains("\npatch,1,"));
}

#[test]
fn attention_masses_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    assert!(beatnet(&["train", "--config", p(&cfg), "--out", p(&run), "--epochs", "1"]).status.success());
    let att = dir.path().join("att");
    let out = beatnet(&["attention", "--ckpt", p(&run.join("best.ckpt")), "--data", p(&data), "--split", "test", "--group-by", "task", "--out", p(&att)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(att.join("attention.csv")).unwrap();
    let mut sums = std::collections::BTreeMap::<String, f64>::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry(f[0].to_string()).or_default() += f[2].parse::<f64>().unwrap();
    }
    assert!(sums.contains_key("all"));
    assert!(sums.len() > 1);
    for (tag, s) in sums {
        assert!((s - 1.0).abs() < 1e-6, "{tag}: {s}");
    }
}

#[test]
fn preprocess_then_tokenize() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let clean = dir.path().join("clean");
    let out = beatnet(&["preprocess", "--in", p(&data), "--out", p(&clean), "--fs", "100", "--band", "0.67:40", "--order", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&clean.join("manifest.json"))["train"], read_json(&data.join("manifest.json"))["train"]);

    let tokens = dir.path().join("tokens");
    let out = beatnet(&["tokenize", "--in", p(&clean), "--out", p(&tokens), "--mode", "qrs", "--L", "40", "--S", "144"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_json(&tokens.join("manifest.json"));
    let first = m["train"][0].as_str().unwrap();
    assert!(first.ends_with(".tok"));
    assert!(tokens.join(first).exists());

    let out = beatnet(&["preprocess", "--in", p(&data), "--out", p(&clean), "--band", "0.67:60"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("filter band"));
}
