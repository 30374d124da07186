//! `beatnet`: preprocessing, tokenization, synthetic data, training,
//! evaluation and attention export from the command line.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use beatnet_core::tokenizer::TokenMode;
use beatnet_core::training::Ablation;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] beatnet_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid {0}: required but not given")]
    Missing(&'static str),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "beatnet", about = "QRS-aligned ECG tokenization and heartbeat transformer")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LOW:HIGH, e.g. 0.67:40")?;
    let lo = lo.trim().parse::<f64>().map_err(|e| format!("low cutoff: {e}"))?;
    let hi = hi.trim().parse::<f64>().map_err(|e| format!("high cutoff: {e}"))?;
    Ok((lo, hi))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resample, bandpass and min-max normalize a dataset directory.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target sampling rate in Hz.
        #[arg(long, default_value_t = 100)]
        fs: u32,
        /// Passband as LOW:HIGH in Hz.
        #[arg(long, value_parser = parse_band, default_value = "0.67:40")]
        band: (f64, f64),
        #[arg(long, default_value_t = 5)]
        order: usize,
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        no_normalize: bool,
        /// Seed for the 7:1:2 split when the input has no manifest.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write one token file per record.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "qrs")]
        mode: TokenMode,
        #[arg(long = "L", default_value_t = 96)]
        token_len: usize,
        #[arg(long = "S", default_value_t = 256)]
        seq_len: usize,
    },
    /// Generate a labelled synthetic suite.
    Synth {
        #[arg(long, default_value = "default")]
        suite: beatnet_core::synth::SuiteKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Additive noise in mV.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train one model; writes best/last checkpoints, history and metrics.
    Train {
        #[command(flatten)]
        o: config::Overrides,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every listed ablation variant for every seed.
    Ablate {
        #[command(flatten)]
        o: config::Overrides,
        #[arg(long, value_delimiter = ',', default_value = "full,no_spatial,no_temporal,no_st")]
        variants: Vec<Ablation>,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Train on nested label-stratified fractions of the training split.
    Efficiency {
        #[command(flatten)]
        o: config::Overrides,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.35,1.0")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Compare QRS-aligned and fixed-patch tokenization.
    Tokenization {
        #[command(flatten)]
        o: config::Overrides,
        #[arg(long, value_delimiter = ',', default_value = "qrs,patch")]
        modes: Vec<TokenMode>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Export per-lead attention mass of a checkpoint.
    Attention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "task")]
        group_by: commands::GroupBy,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Preprocess {
            input,
            out,
            fs,
            band,
            order,
            no_filter,
            no_normalize,
            seed,
        } => commands::preprocess(&input, &out, fs, band, order, !no_filter, !no_normalize, seed),
        Command::Tokenize {
            input,
            out,
            mode,
            token_len,
            seq_len,
        } => commands::tokenize(&input, &out, mode, token_len, seq_len),
        Command::Synth {
            suite,
            out,
            n_per_class,
            seed,
            noise,
        } => commands::synth(suite, &out, n_per_class, seed, noise),
        Command::Train { o } => commands::train(o.resolve()?),
        Command::Eval { ckpt, data, split, out } => commands::eval(&ckpt, &data, &split, &out),
        Command::Ablate { o, variants, seeds } => commands::ablate(o.resolve()?, &variants, seeds),
        Command::Efficiency { o, fractions, seeds } => commands::efficiency(o.resolve()?, &fractions, seeds),
        Command::Tokenization { o, modes, seeds } => commands::tokenization(o.resolve()?, &modes, seeds),
        Command::Attention {
            ckpt,
            data,
            split,
            group_by,
            out,
        } => commands::attention(&ckpt, &data, &split, group_by, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let version: &'static str =
        format!("{} (format version {})", env!("CARGO_PKG_VERSION"), beatnet_core::FORMAT_VERSION).leak();
    let matches = Cli::command().version(version).get_matches();
    // clap exits with status 2 on usage errors
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
