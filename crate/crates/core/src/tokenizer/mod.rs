//! Heartbeat tokenization: fixed-length windows centred on R peaks, one per
//! beat and lead, ordered by beat then by lead and padded to a fixed count.

mod detect;
pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::EcgRecord;

pub use detect::{detect_r_peaks, detection_lead, WARMUP_S};

/// Detected (or generated) R-peak sample indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RPeakSet {
    pub anchors: Vec<usize>,
    pub detection_lead: String,
}

impl RPeakSet {
    /// Checks ordering, range and the 0.2 s refractory spacing.
    pub fn validate(&self, n_samples: usize, fs: u32) -> Result<()> {
        let gap = (0.2 * fs as f64).round() as usize;
        if let Some(&a) = self.anchors.iter().find(|&&a| a >= n_samples) {
            return Err(Error::invalid("anchors", format!("{a} outside [0, {n_samples})")));
        }
        for w in self.anchors.windows(2) {
            if w[1] <= w[0] || w[1] - w[0] < gap {
                return Err(Error::invalid(
                    "anchors",
                    format!("{} and {} closer than {gap} samples", w[0], w[1]),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatToken {
    pub waveform: Vec<f64>,
    pub lead_index: usize,
    pub temporal_index: usize,
    pub valid: bool,
}

impl HeartbeatToken {
    pub fn padding(len: usize) -> Self {
        HeartbeatToken {
            waveform: vec![0.0; len],
            lead_index: 0,
            temporal_index: 0,
            valid: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<HeartbeatToken>,
    pub labels: Vec<bool>,
    pub record_id: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_len(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.waveform.len())
    }

    pub fn n_valid(&self) -> usize {
        self.tokens.iter().filter(|t| t.valid).count()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.valid).collect()
    }

    pub fn lead_indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.lead_index).collect()
    }

    pub fn temporal_indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.temporal_index).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| f64::from(u8::from(b))).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    #[default]
    Qrs,
    Patch,
}

impl std::str::FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qrs" => Ok(TokenMode::Qrs),
            "patch" => Ok(TokenMode::Patch),
            other => Err(Error::invalid("tokenization", format!("{other:?} is not qrs or patch"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub mode: TokenMode,
    pub token_len: usize,
    pub seq_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            mode: TokenMode::Qrs,
            token_len: 96,
            seq_len: 256,
        }
    }
}

fn check_shape(rec: &EcgRecord, l: usize, s: usize) -> Result<()> {
    if l == 0 || l % 2 != 0 {
        return Err(Error::invalid("L", format!("token length {l} must be even and positive")));
    }
    if s < rec.n_leads() {
        return Err(Error::invalid(
            "S",
            format!("sequence length {s} cannot hold one beat of {} leads", rec.n_leads()),
        ));
    }
    Ok(())
}

/// Copies `x[start .. start + len]`, zero-filling positions outside `x`.
fn window(x: &[f64], start: isize, len: usize) -> Vec<f64> {
    (0..len as isize)
        .map(|i| {
            let t = start + i;
            if t >= 0 && (t as usize) < x.len() {
                x[t as usize]
            } else {
                0.0
            }
        })
        .collect()
}

fn finish(rec: &EcgRecord, mut tokens: Vec<HeartbeatToken>, l: usize, s: usize) -> TokenSequence {
    // keep the earliest beats
    tokens.truncate(s);
    tokens.resize_with(s, || HeartbeatToken::padding(l));
    TokenSequence {
        tokens,
        labels: rec.labels.clone(),
        record_id: rec.record_id.clone(),
    }
}

/// One token per anchor and lead, centred on the anchor (window
/// `[τ - L/2, τ + L/2)`), time-major then lead-major, padded or truncated to `s`.
pub fn extract_tokens(rec: &EcgRecord, peaks: &RPeakSet, l: usize, s: usize) -> Result<TokenSequence> {
    check_shape(rec, l, s)?;
    if peaks.anchors.is_empty() {
        log::warn!("{}: no R peaks, token sequence is all padding", rec.record_id);
    }
    let mut tokens = Vec::with_capacity(peaks.anchors.len() * rec.n_leads());
    'beats: for (rank, &tau) in peaks.anchors.iter().enumerate() {
        for (c, lead) in rec.signal.iter().enumerate() {
            if tokens.len() == s {
                break 'beats;
            }
            tokens.push(HeartbeatToken {
                waveform: window(lead, tau as isize - (l / 2) as isize, l),
                lead_index: c,
                temporal_index: rank,
                valid: true,
            });
        }
    }
    Ok(finish(rec, tokens, l, s))
}

/// Non-overlapping windows `[kL, (k+1)L)` per lead with the same ordering
/// and padding rules as [`extract_tokens`]; the last window is zero-filled.
pub fn patch_tokens(rec: &EcgRecord, l: usize, s: usize) -> Result<TokenSequence> {
    check_shape(rec, l, s)?;
    let n_windows = rec.n_samples().div_ceil(l);
    let mut tokens = Vec::with_capacity(n_windows * rec.n_leads());
    'windows: for k in 0..n_windows {
        for (c, lead) in rec.signal.iter().enumerate() {
            if tokens.len() == s {
                break 'windows;
            }
            tokens.push(HeartbeatToken {
                waveform: window(lead, (k * l) as isize, l),
                lead_index: c,
                temporal_index: k,
                valid: true,
            });
        }
    }
    Ok(finish(rec, tokens, l, s))
}

/// Tokenizes a preprocessed record according to `cfg`.
pub fn tokenize(rec: &EcgRecord, cfg: &TokenizerConfig) -> Result<TokenSequence> {
    match cfg.mode {
        TokenMode::Qrs => extract_tokens(rec, &detect_r_peaks(rec)?, cfg.token_len, cfg.seq_len),
        TokenMode::Patch => patch_tokens(rec, cfg.token_len, cfg.seq_len),
    }
}
