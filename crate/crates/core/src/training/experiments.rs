use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{tokenize_all, train, Ablation, EvalReport, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::signal::EcgRecord;
use crate::tokenizer::{TokenMode, TokenSequence, TokenizerConfig};

/// Preprocessed train/validation records shared by a set of runs.
pub struct ExperimentData {
    pub label_names: Vec<String>,
    pub train: Vec<EcgRecord>,
    pub val: Vec<EcgRecord>,
}

/// One training run's final-epoch validation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    pub tokenization: TokenMode,
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: String,
    pub runs: usize,
    pub median_macro_auroc: Option<f64>,
}

struct Tokenized {
    cache: BTreeMap<TokenMode, (Vec<TokenSequence>, Vec<TokenSequence>)>,
}

impl Tokenized {
    fn get(&mut self, data: &ExperimentData, tok: &TokenizerConfig, mode: TokenMode) -> Result<&(Vec<TokenSequence>, Vec<TokenSequence>)> {
        if !self.cache.contains_key(&mode) {
            let cfg = TokenizerConfig { mode, ..*tok };
            let pair = (tokenize_all(&data.train, &cfg)?, tokenize_all(&data.val, &cfg)?);
            self.cache.insert(mode, pair);
        }
        Ok(&self.cache[&mode])
    }
}

fn run_one(
    sets: &(Vec<TokenSequence>, Vec<TokenSequence>),
    model: &ModelConfig,
    cfg: &TrainConfig,
    variant: String,
) -> Result<MetricRow> {
    let outcome = train(model, &sets.0, &sets.1, cfg)?;
    let last = outcome
        .history
        .last()
        .ok_or_else(|| Error::invalid("epochs", "must be >= 1"))?;
    let n_train = ((cfg.subset_fraction * sets.0.len() as f64).round() as usize).max(1);
    Ok(MetricRow {
        variant,
        tokenization: cfg.tokenization,
        fraction: cfg.subset_fraction,
        seed: cfg.seed,
        n_train,
        report: last.val.clone(),
    })
}

/// Trains every ablation variant with every seed.
pub fn run_ablation(
    data: &ExperimentData,
    model: &ModelConfig,
    base: &TrainConfig,
    tok: &TokenizerConfig,
    variants: &[Ablation],
    seeds: &[u64],
) -> Result<Vec<MetricRow>> {
    let mut sets = Tokenized { cache: BTreeMap::new() };
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let cfg = TrainConfig {
                ablation: variant,
                seed,
                ..base.clone()
            };
            log::info!("ablation {} seed {seed}", variant.name());
            let s = sets.get(data, tok, cfg.tokenization)?;
            rows.push(run_one(s, model, &cfg, variant.name().to_string())?);
        }
    }
    Ok(rows)
}

/// Trains on nested label-stratified subsets of the training split.
pub fn run_efficiency(
    data: &ExperimentData,
    model: &ModelConfig,
    base: &TrainConfig,
    tok: &TokenizerConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<MetricRow>> {
    let mut sets = Tokenized { cache: BTreeMap::new() };
    let mut rows = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            let cfg = TrainConfig {
                subset_fraction: fraction,
                seed,
                ..base.clone()
            };
            log::info!("fraction {fraction} seed {seed}");
            let s = sets.get(data, tok, cfg.tokenization)?;
            rows.push(run_one(s, model, &cfg, base.ablation.name().to_string())?);
        }
    }
    Ok(rows)
}

/// Compares tokenizations with otherwise identical runs.
pub fn run_tokenization(
    data: &ExperimentData,
    model: &ModelConfig,
    base: &TrainConfig,
    tok: &TokenizerConfig,
    modes: &[TokenMode],
    seeds: &[u64],
) -> Result<Vec<MetricRow>> {
    let mut sets = Tokenized { cache: BTreeMap::new() };
    let mut rows = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let cfg = TrainConfig {
                tokenization: mode,
                seed,
                ..base.clone()
            };
            let s = sets.get(data, tok, mode)?;
            rows.push(run_one(s, model, &cfg, base.ablation.name().to_string())?);
        }
    }
    Ok(rows)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Median macro AUROC per `key(row)`, keys in first-seen order.
pub fn summarize_rows(rows: &[MetricRow], key: impl Fn(&MetricRow) -> String) -> Vec<SummaryRow> {
    let mut keys: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in rows {
        let k = key(r);
        if !groups.contains_key(&k) {
            keys.push(k.clone());
        }
        groups.entry(k).or_default().push(r.report.macro_auroc);
    }
    keys.into_iter()
        .map(|k| {
            let vals = &groups[&k];
            SummaryRow {
                runs: vals.len(),
                median_macro_auroc: median(vals.iter().flatten().copied().collect()),
                key: k,
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// One row per run: identifying columns, macro AUROC, loss, then one
/// AUROC column per label.
pub fn metrics_csv(rows: &[MetricRow], label_names: &[String]) -> String {
    let mut out = String::from("variant,tokenization,fraction,seed,n_train,macro_auroc,val_loss");
    for name in label_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in rows {
        let mode = match r.tokenization {
            TokenMode::Qrs => "qrs",
            TokenMode::Patch => "patch",
        };
        let _ = write!(
            out,
            "{},{mode},{},{},{},{},{:.6}",
            r.variant,
            r.fraction,
            r.seed,
            r.n_train,
            cell(r.report.macro_auroc),
            r.report.loss
        );
        for v in &r.report.per_label {
            out.push(',');
            out.push_str(&cell(*v));
        }
        out.push('\n');
    }
    out
}
