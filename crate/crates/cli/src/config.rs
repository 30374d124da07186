//! JSON run configuration with command-line overrides.

use std::path::{Path, PathBuf};

use beatnet_core::model::ModelConfig;
use beatnet_core::signal::io::read_dataset;
use beatnet_core::signal::Split;
use beatnet_core::tokenizer::{TokenMode, TokenizerConfig};
use beatnet_core::training::{Ablation, TrainConfig};
use beatnet_core::EcgRecord;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a training-type command needs. `model.n_leads`,
/// `model.n_labels`, `model.token_len` and `model.seq_len` are filled in
/// from the dataset and the tokenizer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tokenizer: TokenizerConfig,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// JSON run configuration; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (records plus manifest.json).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Root seed for initialisation, shuffling and subsampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub tokenization: Option<TokenMode>,
    #[arg(long, allow_negative_numbers = true)]
    pub fraction: Option<f64>,
    /// Token length in samples.
    #[arg(long = "L")]
    pub token_len: Option<usize>,
    /// Tokens per sequence.
    #[arg(long = "S")]
    pub seq_len: Option<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if self.data.is_some() {
            cfg.data.clone_from(&self.data);
        }
        if self.out.is_some() {
            cfg.out.clone_from(&self.out);
        }
        let t = &mut cfg.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.lr = self.lr.unwrap_or(t.lr);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.seed = self.seed.unwrap_or(t.seed);
        t.weight_decay = self.weight_decay.unwrap_or(t.weight_decay);
        t.ablation = self.ablation.unwrap_or(t.ablation);
        t.tokenization = self.tokenization.unwrap_or(t.tokenization);
        t.subset_fraction = self.fraction.unwrap_or(t.subset_fraction);
        cfg.tokenizer.token_len = self.token_len.unwrap_or(cfg.tokenizer.token_len);
        cfg.tokenizer.seq_len = self.seq_len.unwrap_or(cfg.tokenizer.seq_len);
        cfg.tokenizer.mode = cfg.train.tokenization;
        Ok(cfg)
    }
}

/// A resolved configuration plus the dataset it points at.
pub struct Loaded {
    pub config: RunConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub label_names: Vec<String>,
    pub lead_names: Vec<String>,
    pub data: Split<EcgRecord>,
}

pub fn required<'a>(value: &'a Option<PathBuf>, field: &'static str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or(CliError::Missing(field))
}

impl RunConfig {
    pub fn load(mut self) -> Result<Loaded, CliError> {
        let data_dir = required(&self.data, "data")?.to_path_buf();
        let out_dir = required(&self.out, "out")?.to_path_buf();
        let data = read_dataset(&data_dir)?;
        let first = data
            .train
            .first()
            .ok_or(CliError::Core(beatnet_core::Error::Invalid {
                field: "data",
                reason: "training split is empty".into(),
            }))?;
        let label_names = first.label_names.clone();
        let lead_names = first.lead_names.clone();
        self.model.n_leads = lead_names.len();
        self.model.n_labels = label_names.len();
        self.model.token_len = self.tokenizer.token_len;
        self.model.seq_len = self.tokenizer.seq_len;
        self.model.validate()?;
        Ok(Loaded {
            config: self,
            data_dir,
            out_dir,
            label_names,
            lead_names,
            data,
        })
    }
}
