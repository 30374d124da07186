//! Fixtures shared by the criterion benches.

use beatnet_core::model::{ModelConfig, ModelParams};
use beatnet_core::synth::{generate, Rhythm, SynthSpec};
use beatnet_core::tokenizer::{tokenize, TokenMode, TokenizerConfig};
use beatnet_core::{EcgRecord, TokenSequence};

/// A 10 s, 12-lead synthetic record at 100 Hz.
pub fn record(seed: u64) -> EcgRecord {
    let spec = SynthSpec {
        bpm: 72.0,
        rhythm: Rhythm::IrregularRr,
        noise_std: 0.05,
        seed,
        ..SynthSpec::default()
    };
    generate(&spec).expect("valid synth spec").0
}

pub fn tokenizer(mode: TokenMode) -> TokenizerConfig {
    TokenizerConfig {
        mode,
        ..TokenizerConfig::default()
    }
}

pub fn sequence(seed: u64) -> TokenSequence {
    tokenize(&record(seed), &tokenizer(TokenMode::Qrs)).expect("tokenizable record")
}

/// Default-size model sized for the default tokenizer.
pub fn model(seed: u64) -> ModelParams {
    let tok = TokenizerConfig::default();
    let cfg = ModelConfig {
        token_len: tok.token_len,
        seq_len: tok.seq_len,
        ..ModelConfig::default()
    };
    ModelParams::init(cfg, seed).expect("valid model config")
}
