use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use beatnet_core::interpret::{summaries_csv, summarize, summarize_by_label};
use beatnet_core::model::ModelParams;
use beatnet_core::signal::io::{list_records, read_dataset, read_manifest, read_record, read_split, write_dataset, DatasetManifest};
use beatnet_core::signal::{preprocess as preprocess_record, split_dataset, PreprocessConfig, Split};
use beatnet_core::synth::{make_suite, SuiteConfig, SuiteKind};
use beatnet_core::tokenizer::io::{write_tokens, TOKEN_EXT};
use beatnet_core::tokenizer::{tokenize as tokenize_record, TokenMode, TokenizerConfig};
use beatnet_core::training::{
    evaluate, metrics_csv, run_ablation, run_efficiency, run_tokenization, summarize_rows, tokenize_all, train as train_model,
    ExperimentData, MetricRow, SummaryRow,
};
use beatnet_core::{EcgRecord, FilterSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Loaded, RunConfig};
use crate::manifest::Recorder;
use crate::CliError;

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    /// One summary over all records plus one per positive label.
    Task,
    /// A single summary over all records.
    All,
}

/// Stored in every checkpoint so `eval` and `attention` can rebuild the
/// token pipeline.
#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    run: RunConfig,
    label_names: Vec<String>,
    lead_names: Vec<String>,
}

fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointExtra), CliError> {
    let (params, extra) = ModelParams::load(path)?;
    let extra: CheckpointExtra = serde_json::from_value(extra)
        .map_err(|e| CliError::Config(format!("{}: checkpoint metadata: {e}", path.display())))?;
    Ok((params, extra))
}

fn to_json<T: Serialize>(value: &T) -> Result<serde_json::Value, CliError> {
    Ok(serde_json::to_value(value).map_err(beatnet_core::Error::from)?)
}

#[allow(clippy::too_many_arguments)]
pub fn preprocess(
    input: &Path,
    out: &Path,
    fs: u32,
    band: (f64, f64),
    order: usize,
    filter: bool,
    normalize: bool,
    seed: u64,
) -> Result<(), CliError> {
    let cfg = PreprocessConfig {
        target_fs: Some(fs),
        band: filter.then_some(FilterSpec {
            order,
            low_hz: band.0,
            high_hz: band.1,
        }),
        normalize,
    };
    let data = if input.join(beatnet_core::signal::io::MANIFEST_FILE).exists() {
        read_dataset(input)?
    } else {
        let records = list_records(input)?
            .iter()
            .map(|p| read_record(p))
            .collect::<beatnet_core::Result<Vec<_>>>()?;
        log::info!("{}: no manifest, splitting {} records 7:1:2", input.display(), records.len());
        split_dataset(records, (0.7, 0.1, 0.2), seed)?
    };
    let run = |recs: &[EcgRecord]| -> beatnet_core::Result<Vec<EcgRecord>> {
        recs.par_iter()
            .map(|r| {
                let (rec, warnings) = preprocess_record(r, &cfg)?;
                for w in warnings {
                    log::warn!("{}: {w}", r.record_id);
                }
                Ok(rec)
            })
            .collect()
    };
    let processed = Split {
        train: run(&data.train)?,
        val: run(&data.val)?,
        test: run(&data.test)?,
    };
    let mut rec = Recorder::new(out)?;
    rec.input(input);
    let manifest = write_dataset(out, &processed)?;
    register_dataset(&mut rec, out, &manifest);
    rec.finish(json!({ "preprocess": cfg, "split_seed": seed }), Some(seed))
}

fn register_dataset(rec: &mut Recorder, dir: &Path, manifest: &DatasetManifest) {
    for f in manifest.train.iter().chain(&manifest.val).chain(&manifest.test) {
        rec.output(dir.join(f));
    }
    rec.output(dir.join(beatnet_core::signal::io::MANIFEST_FILE));
}

pub fn tokenize(input: &Path, out: &Path, mode: TokenMode, token_len: usize, seq_len: usize) -> Result<(), CliError> {
    let cfg = TokenizerConfig { mode, token_len, seq_len };
    let manifest = read_manifest(input)?;
    let mut rec = Recorder::new(out)?;
    rec.input(input);
    let mut renamed = DatasetManifest {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        ..manifest.clone()
    };
    for split in ["train", "val", "test"] {
        let records = read_split(input, &manifest, split)?;
        let names: Vec<String> = manifest
            .split(split)?
            .iter()
            .map(|f| {
                let stem = Path::new(f).file_stem().map_or_else(|| f.clone(), |s| s.to_string_lossy().into_owned());
                format!("{stem}.{TOKEN_EXT}")
            })
            .collect();
        let seqs = records
            .par_iter()
            .map(|r| tokenize_record(r, &cfg))
            .collect::<beatnet_core::Result<Vec<_>>>()?;
        for (seq, name) in seqs.iter().zip(&names) {
            let path = out.join(name);
            write_tokens(&path, seq)?;
            rec.output(path);
        }
        match split {
            "train" => renamed.train = names,
            "val" => renamed.val = names,
            _ => renamed.test = names,
        }
    }
    rec.write_json(beatnet_core::signal::io::MANIFEST_FILE, &renamed)?;
    rec.finish(to_json(&cfg)?, None)
}

pub fn synth(kind: SuiteKind, out: &Path, n_per_class: usize, seed: u64, noise: Option<f64>) -> Result<(), CliError> {
    let mut cfg = SuiteConfig::new(kind, n_per_class, seed);
    if let Some(n) = noise {
        cfg.noise_std = n;
    }
    let suite = make_suite(&cfg)?;
    let mut rec = Recorder::new(out)?;
    let manifest = write_dataset(out, &suite.data)?;
    register_dataset(&mut rec, out, &manifest);
    rec.write_json("truth.json", &suite.truth)?;
    log::info!(
        "{} suite: {} train, {} val, {} test records",
        kind.name(),
        suite.data.train.len(),
        suite.data.val.len(),
        suite.data.test.len()
    );
    rec.finish(to_json(&cfg)?, Some(seed))
}

fn final_row(loaded: &Loaded, n_train: usize, report: &beatnet_core::EvalReport) -> MetricRow {
    let t = &loaded.config.train;
    MetricRow {
        variant: t.ablation.name().to_string(),
        tokenization: t.tokenization,
        fraction: t.subset_fraction,
        seed: t.seed,
        n_train,
        report: report.clone(),
    }
}

pub fn train(cfg: RunConfig) -> Result<(), CliError> {
    let loaded = cfg.load()?;
    let c = &loaded.config;
    let mut rec = Recorder::new(&loaded.out_dir)?;
    rec.input(&loaded.data_dir);
    let train_set = tokenize_all(&loaded.data.train, &c.tokenizer)?;
    let val_set = tokenize_all(&loaded.data.val, &c.tokenizer)?;
    let outcome = train_model(&c.model, &train_set, &val_set, &c.train)?;
    let last = outcome
        .history
        .last()
        .ok_or(CliError::Config("epochs must be >= 1".into()))?;
    let extra = to_json(&CheckpointExtra {
        run: c.clone(),
        label_names: loaded.label_names.clone(),
        lead_names: loaded.lead_names.clone(),
    })?;
    for (name, params) in [("best.ckpt", &outcome.best), ("last.ckpt", &outcome.last)] {
        let path = rec.dir().join(name);
        params.save(&path, extra.clone())?;
        rec.output(path);
    }
    rec.write_json(
        "history.json",
        &json!({ "best_epoch": outcome.best_epoch, "epochs": outcome.history }),
    )?;
    rec.write_json("report.json", &last.val)?;
    let n_train = ((c.train.subset_fraction * train_set.len() as f64).round() as usize).max(1);
    let row = final_row(&loaded, n_train, &last.val);
    rec.write("metrics.csv", metrics_csv(&[row], &loaded.label_names))?;
    log::info!(
        "final epoch {}: val macro AUROC {:?}, best epoch {}",
        last.epoch,
        last.val.macro_auroc,
        outcome.best_epoch
    );
    rec.finish(to_json(c)?, Some(c.train.seed))
}

pub fn eval(ckpt: &Path, data: &Path, split: &str, out: &Path) -> Result<(), CliError> {
    let (params, extra) = load_checkpoint(ckpt)?;
    let manifest = read_manifest(data)?;
    let records = read_split(data, &manifest, split)?;
    let seqs = tokenize_all(&records, &extra.run.tokenizer)?;
    let report = evaluate(&params, &seqs)?;
    let mut rec = Recorder::new(out)?;
    rec.input(ckpt);
    rec.input(data);
    rec.write_json("report.json", &report)?;
    let mut csv = String::from("label,auroc\n");
    for (name, v) in extra.label_names.iter().zip(&report.per_label) {
        let _ = writeln!(csv, "{name},{}", v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}")));
    }
    rec.write("auroc.csv", csv)?;
    log::info!("{split}: macro AUROC {:?}, loss {:.6}", report.macro_auroc, report.loss);
    rec.finish(json!({ "ckpt": ckpt, "split": split, "tokenizer": extra.run.tokenizer }), None)
}

fn summary_csv(rows: &[SummaryRow], key: &str) -> String {
    let mut out = format!("{key},runs,median_macro_auroc\n");
    for r in rows {
        let m = r.median_macro_auroc.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(out, "{},{},{m}", r.key, r.runs);
    }
    out
}

fn experiment(
    cfg: RunConfig,
    seeds: Option<Vec<u64>>,
    key: &str,
    key_fn: impl Fn(&MetricRow) -> String,
    settings: serde_json::Value,
    body: impl FnOnce(&ExperimentData, &RunConfig, &[u64]) -> beatnet_core::Result<Vec<MetricRow>>,
) -> Result<(), CliError> {
    let loaded = cfg.load()?;
    let seeds = seeds.unwrap_or_else(|| vec![loaded.config.train.seed]);
    let mut rec = Recorder::new(&loaded.out_dir)?;
    rec.input(&loaded.data_dir);
    let data = ExperimentData {
        label_names: loaded.label_names.clone(),
        train: loaded.data.train,
        val: loaded.data.val,
    };
    let rows = body(&data, &loaded.config, &seeds)?;
    rec.write("metrics.csv", metrics_csv(&rows, &loaded.label_names))?;
    rec.write("summary.csv", summary_csv(&summarize_rows(&rows, key_fn), key))?;
    rec.write_json("rows.json", &rows)?;
    let mut config = to_json(&loaded.config)?;
    config["experiment"] = settings;
    config["seeds"] = json!(seeds);
    rec.finish(config, seeds.first().copied())
}

pub fn ablate(cfg: RunConfig, variants: &[beatnet_core::training::Ablation], seeds: Option<Vec<u64>>) -> Result<(), CliError> {
    let settings = json!({ "variants": variants });
    experiment(cfg, seeds, "variant", |r| r.variant.clone(), settings, |data, c, seeds| {
        run_ablation(data, &c.model, &c.train, &c.tokenizer, variants, seeds)
    })
}

pub fn efficiency(cfg: RunConfig, fractions: &[f64], seeds: Option<Vec<u64>>) -> Result<(), CliError> {
    let settings = json!({ "fractions": fractions });
    experiment(cfg, seeds, "fraction", |r| r.fraction.to_string(), settings, |data, c, seeds| {
        run_efficiency(data, &c.model, &c.train, &c.tokenizer, fractions, seeds)
    })
}

pub fn tokenization(cfg: RunConfig, modes: &[TokenMode], seeds: Option<Vec<u64>>) -> Result<(), CliError> {
    let settings = json!({ "modes": modes });
    let key = |r: &MetricRow| match r.tokenization {
        TokenMode::Qrs => "qrs".to_string(),
        TokenMode::Patch => "patch".to_string(),
    };
    experiment(cfg, seeds, "tokenization", key, settings, |data, c, seeds| {
        run_tokenization(data, &c.model, &c.train, &c.tokenizer, modes, seeds)
    })
}

pub fn attention(ckpt: &Path, data: &Path, split: &str, group_by: GroupBy, out: &Path) -> Result<(), CliError> {
    let (params, extra) = load_checkpoint(ckpt)?;
    let manifest = read_manifest(data)?;
    let records = read_split(data, &manifest, split)?;
    let seqs = tokenize_all(&records, &extra.run.tokenizer)?;
    let summaries = match group_by {
        GroupBy::Task => summarize_by_label(&params, &seqs, &extra.label_names, &extra.lead_names)?,
        GroupBy::All => vec![summarize(&params, &seqs, "all", &extra.lead_names)?],
    };
    let mut rec = Recorder::new(out)?;
    rec.input(ckpt);
    rec.input(data);
    rec.write("attention.csv", summaries_csv(&summaries))?;
    let by_tag: BTreeMap<&str, &beatnet_core::AttentionSummary> =
        summaries.iter().map(|s| (s.task_tag.as_str(), s)).collect();
    rec.write_json("attention.json", &by_tag)?;
    for s in &summaries {
        log::info!("{}: argmax lead {}", s.task_tag, s.lead_names[s.argmax()]);
    }
    rec.finish(json!({ "ckpt": ckpt, "split": split, "group_by": group_by }), None)
}
