//! Multi-label training with AdamW, evaluation by macro AUROC, nested
//! stratified subsets and the ablation / data-efficiency experiments.

mod experiments;
mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Gradients, Tape};
use crate::error::{Error, Result};
use crate::model::{forward, loss_on_tape, ModelConfig, ModelParams};
use crate::signal::{stratified_order, EcgRecord};
use crate::tokenizer::{tokenize, TokenMode, TokenSequence, TokenizerConfig};

pub use experiments::{
    metrics_csv, run_ablation, run_efficiency, run_tokenization, summarize_rows, ExperimentData, MetricRow, SummaryRow,
};
pub use metrics::{auroc, bce_with_logits, sigmoid, EvalReport};

/// Which encoders are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoSpatial,
    NoTemporal,
    #[serde(alias = "no_spatiotemporal")]
    NoSt,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoSpatial, Ablation::NoTemporal, Ablation::NoSt];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSpatial => "no_spatial",
            Ablation::NoTemporal => "no_temporal",
            Ablation::NoSt => "no_st",
        }
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut out = cfg.clone();
        out.use_spatial = matches!(self, Ablation::Full | Ablation::NoTemporal);
        out.use_temporal = matches!(self, Ablation::Full | Ablation::NoSpatial);
        out
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_spatial" => Ok(Ablation::NoSpatial),
            "no_temporal" => Ok(Ablation::NoTemporal),
            "no_st" | "no_spatiotemporal" => Ok(Ablation::NoSt),
            other => Err(Error::invalid("ablation", format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub subset_fraction: f64,
    pub ablation: Ablation,
    pub tokenization: TokenMode,
    pub weight_decay: f64,
    /// Stop once the epoch's training loss falls below this value.
    pub target_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            seed: 0,
            subset_fraction: 1.0,
            ablation: Ablation::Full,
            tokenization: TokenMode::Qrs,
            weight_decay: 0.01,
            target_train_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and >= 0"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::invalid("subset_fraction", "must lie in (0, 1]"));
        }
        if self.subset_fraction * (n_train as f64) < 1.0 {
            return Err(Error::invalid("subset_fraction", "selects no training record"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Indices of a nested, label-stratified subset of size `round(f·n)`,
/// returned in ascending order. Subsets for smaller fractions are contained
/// in those for larger ones at the same seed.
pub fn subsample_indices(keys: &[Vec<bool>], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction", format!("{fraction} outside (0, 1]")));
    }
    let m = (fraction * keys.len() as f64).round() as usize;
    if m == 0 {
        return Err(Error::invalid("fraction", format!("{fraction} of {} records is empty", keys.len())));
    }
    let mut idx = stratified_order(keys, seed)[..m].to_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn subsample<T: Clone>(items: &[T], keys: &[Vec<bool>], fraction: f64, seed: u64) -> Result<Vec<T>> {
    Ok(subsample_indices(keys, fraction, seed)?
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

/// Tokenizes records in parallel, preserving order.
pub fn tokenize_all(records: &[EcgRecord], cfg: &TokenizerConfig) -> Result<Vec<TokenSequence>> {
    records.par_iter().map(|r| tokenize(r, cfg)).collect()
}

/// Evaluates `params` on `data` (parallel forward passes, ordered reduction).
pub fn evaluate(params: &ModelParams, data: &[TokenSequence]) -> Result<EvalReport> {
    let logits = data
        .par_iter()
        .map(|s| forward(params, s).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = data.iter().map(|s| s.labels.clone()).collect();
    EvalReport::from_outputs(&logits, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-record loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub val: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
    pub history: Vec<EpochRecord>,
}

fn better(a: &EvalReport, b: &EvalReport) -> bool {
    match (a.macro_auroc, b.macro_auroc) {
        (Some(x), Some(y)) if x != y => x > y,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        _ => a.loss < b.loss,
    }
}

/// Loss and gradients of one mini-batch: per-record tapes, summed in record
/// order so the result does not depend on the thread count.
fn batch_gradients(params: &ModelParams, batch: &[&TokenSequence]) -> Result<(f64, Gradients)> {
    let parts = batch
        .par_iter()
        .map(|seq| {
            let mut tape = Tape::new();
            let p = params.register(&mut tape);
            let loss = loss_on_tape(&mut tape, &p, &params.config, seq)?;
            Ok((tape.value(loss).data()[0], tape.backward(loss)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads = Gradients::default();
    let scale = 1.0 / batch.len() as f64;
    for (loss, g) in parts {
        total += loss;
        grads.accumulate(scale, &g)?;
    }
    Ok((total, grads))
}

/// Trains a model of configuration `model_cfg` (with the ablation from
/// `cfg` applied) on `train`, reporting on `val` after every epoch.
pub fn train(model_cfg: &ModelConfig, train: &[TokenSequence], val: &[TokenSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("dataset", "train and validation splits must be non-empty"));
    }
    cfg.validate(train.len())?;
    let keys: Vec<Vec<bool>> = train.iter().map(|s| s.labels.clone()).collect();
    let subset: Vec<&TokenSequence> = subsample_indices(&keys, cfg.subset_fraction, cfg.seed)?
        .into_iter()
        .map(|i| &train[i])
        .collect();

    let mut params = ModelParams::init(cfg.ablation.apply(model_cfg), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelParams, usize, EvalReport)> = None;

    for epoch in 0..cfg.epochs {
        let mut order = subset.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(&params, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch} batch {b}")));
            }
            loss_sum += loss;
            opt.step(&mut params.tensors, &grads)
                .map_err(|e| Error::NonFinite(format!("optimizer step at epoch {epoch} batch {b}: {e}")))?;
        }
        let train_loss = loss_sum / subset.len() as f64;
        let report = evaluate(&params, val)?;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, val loss {:.5}, val macro AUROC {:?}",
            report.loss,
            report.macro_auroc
        );
        if best.as_ref().is_none_or(|(_, _, r)| better(&report, r)) {
            best = Some((params.clone(), epoch, report.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val: report,
        });
        if cfg.target_train_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    let (best, best_epoch, _) = match best {
        Some(b) => b,
        None => {
            let r = evaluate(&params, val)?;
            (params.clone(), 0, r)
        }
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}
