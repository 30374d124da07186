//! Multi-lead ECG records and the preprocessing chain applied before
//! tokenization: resample, zero-phase Butterworth bandpass, per-lead min-max
//! scaling, and stratified dataset partitioning.

mod filter;
pub mod io;
mod normalize;
mod resample;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{bandpass, butter_bandpass, filtfilt, Biquad, Sos};
pub use normalize::minmax_normalize;
pub use resample::{resample, resample_with, ResampleMethod};
pub use split::{split_dataset, stratified_order, stratified_partition, Split};

/// A multi-lead recording: `signal[c][t]` in millivolts.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub fs: u32,
    pub lead_names: Vec<String>,
    pub signal: Vec<Vec<f64>>,
    pub label_names: Vec<String>,
    pub labels: Vec<bool>,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        fs: u32,
        lead_names: Vec<String>,
        signal: Vec<Vec<f64>>,
        label_names: Vec<String>,
        labels: Vec<bool>,
    ) -> Result<Self> {
        let rec = EcgRecord {
            record_id: record_id.into(),
            fs,
            lead_names,
            signal,
            label_names,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n_leads(&self) -> usize {
        self.signal.len()
    }

    pub fn n_samples(&self) -> usize {
        self.signal.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs as f64
    }

    pub fn lead_index(&self, name: &str) -> Option<usize> {
        self.lead_names.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fs == 0 {
            return Err(Error::invalid("fs", "sampling rate must be positive"));
        }
        if self.signal.is_empty() {
            return Err(Error::invalid("signal", "record has no leads"));
        }
        if self.lead_names.len() != self.signal.len() {
            return Err(Error::invalid(
                "lead_names",
                format!("{} names for {} leads", self.lead_names.len(), self.signal.len()),
            ));
        }
        let t = self.n_samples();
        if self.signal.iter().any(|l| l.len() != t) {
            return Err(Error::invalid("signal", "leads have different lengths"));
        }
        if t < 2 * self.fs as usize {
            return Err(Error::invalid(
                "signal",
                format!("{t} samples is shorter than 2 s at {} Hz", self.fs),
            ));
        }
        if self.signal.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("signal", "non-finite sample"));
        }
        if self.label_names.len() != self.labels.len() {
            return Err(Error::invalid(
                "label_names",
                format!("{} names for {} labels", self.label_names.len(), self.labels.len()),
            ));
        }
        Ok(())
    }

    pub(crate) fn with_signal(&self, signal: Vec<Vec<f64>>, fs: u32) -> Self {
        EcgRecord {
            record_id: self.record_id.clone(),
            fs,
            lead_names: self.lead_names.clone(),
            signal,
            label_names: self.label_names.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Butterworth bandpass design parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl FilterSpec {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if self.order == 0 {
            return Err(Error::invalid("filter order", "must be >= 1"));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < fs / 2.0) {
            return Err(Error::invalid(
                "filter band",
                format!(
                    "need 0 < low ({}) < high ({}) < Nyquist ({})",
                    self.low_hz,
                    self.high_hz,
                    fs / 2.0
                ),
            ));
        }
        Ok(())
    }
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            order: 5,
            low_hz: 0.67,
            high_hz: 40.0,
        }
    }
}

/// Which preprocessing steps a dataset profile applies, in the fixed order
/// resample → bandpass → normalize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_fs: Option<u32>,
    pub band: Option<FilterSpec>,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_fs: Some(100),
            band: Some(FilterSpec::default()),
            normalize: true,
        }
    }
}

/// Runs the configured chain; the returned strings are non-fatal warnings.
pub fn preprocess(rec: &EcgRecord, cfg: &PreprocessConfig) -> Result<(EcgRecord, Vec<String>)> {
    let mut out = match cfg.target_fs {
        Some(fs) => resample(rec, fs)?,
        None => rec.clone(),
    };
    if let Some(spec) = &cfg.band {
        out = bandpass(&out, spec)?;
    }
    let mut warnings = Vec::new();
    if cfg.normalize {
        let (rec, w) = minmax_normalize(&out);
        out = rec;
        warnings = w;
    }
    Ok((out, warnings))
}

#[cfg(test)]
pub(crate) fn test_record(signal: Vec<Vec<f64>>, fs: u32) -> EcgRecord {
    let names = (0..signal.len()).map(|i| format!("L{i}")).collect();
    EcgRecord::new("test", fs, names, signal, vec!["y".into()], vec![true]).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_record() {
        let err = EcgRecord::new("r", 100, vec!["I".into()], vec![vec![0.0; 150]], vec![], vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_lead_name_mismatch() {
        let err = EcgRecord::new("r", 100, vec![], vec![vec![0.0; 300]], vec![], vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut s = vec![0.0; 300];
        s[7] = f64::NAN;
        assert!(EcgRecord::new("r", 100, vec!["I".into()], vec![s], vec![], vec![]).is_err());
    }

    #[test]
    fn filter_spec_at_nyquist_rejected() {
        let spec = FilterSpec {
            order: 5,
            low_hz: 0.67,
            high_hz: 50.0,
        };
        assert!(spec.validate(100.0).is_err());
        assert!(FilterSpec::default().validate(100.0).is_ok());
    }
}
