//! Heartbeat-level ECG classification.
//!
//! Multi-lead recordings are cleaned ([`signal`]), cut into R-peak centred
//! heartbeat tokens ([`tokenizer`]) and classified by a four stage encoder
//! ([`model`]): a residual CNN per beat, a per-lead affine modulation, an
//! additive per-beat temporal embedding and a transformer over the whole
//! token sequence. Everything is differentiated by the small reverse-mode
//! engine in [`autodiff`] and trained with AdamW ([`training`]).
//!
//! [`synth`] provides a deterministic 12-lead generator with ground-truth
//! R-peaks used as a test bed, and [`interpret`] turns transformer attention
//! into per-lead attention mass.

pub mod autodiff;
mod binio;
pub mod error;
pub mod interpret;
pub mod model;
pub mod signal;
pub mod synth;
pub mod tokenizer;
pub mod training;

pub use autodiff::{AdamW, AdamWConfig, Gradients, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use interpret::AttentionSummary;
pub use model::{ModelConfig, ModelParams, Pooling};
pub use signal::{EcgRecord, FilterSpec};
pub use synth::{SynthSpec, SyntheticSuite};
pub use tokenizer::{HeartbeatToken, RPeakSet, TokenSequence};
pub use training::{EvalReport, TrainConfig};

/// Version of the on-disk formats written by this crate.
pub const FORMAT_VERSION: u32 = 1;
