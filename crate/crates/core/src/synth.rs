//! Deterministic synthetic 12-lead ECG with ground-truth R peaks.
//!
//! Each beat is a sum of five Gaussian bumps (P, Q, R, S, T) placed relative
//! to an integer R-peak sample. A scalar "cardiac source" is projected onto
//! twelve leads with fixed signed gains. The high-amplitude-V class swaps
//! large limb gains onto precordial leads, so the multiset of gains is the
//! same for every class and the label is visible through lead identity alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{split_dataset, EcgRecord, Split};
use crate::tokenizer::RPeakSet;

pub const LEAD_NAMES: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];
pub const LABEL_NAMES: [&str; 5] = ["irregular_rr", "dropped_beat", "wide_qrs", "high_amp_v", "ectopic_atrial"];

/// Signed projection gains of the cardiac source, in [`LEAD_NAMES`] order.
const BASE_GAINS: [f64; 12] = [1.0, 1.2, 0.6, -1.1, 0.5, 0.9, -0.5, 0.45, 0.55, 0.6, 0.5, 0.8];
/// The high-amplitude-V class exchanges these limb and precordial gains.
/// Lead II is never touched, so R-peak detection sees the same signal.
const HIGH_V_SWAPS: [(usize, usize); 5] = [(0, 6), (2, 7), (3, 8), (4, 9), (5, 10)];
const LEAD_II: usize = 1;
const EDGE_MARGIN_S: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rhythm {
    #[default]
    Regular,
    IrregularRr,
    DroppedBeat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Morphology {
    #[default]
    Normal,
    WideQrs,
    HighAmpV,
}

/// Where P waves appear.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PWave {
    /// Upright in every lead (scaled by the lead gain).
    #[default]
    AllLeads,
    /// Upright in lead II, absent elsewhere.
    LeadIIOnly,
    /// Inverted in lead II, absent elsewhere (ectopic atrial focus).
    InvertedLeadIIOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub bpm: f64,
    pub rhythm: Rhythm,
    pub morph: Morphology,
    pub noise_std: f64,
    pub duration_s: f64,
    pub fs: u32,
    pub seed: u64,
    /// Fractional RR perturbation for the irregular rhythm.
    pub rr_jitter: f64,
    /// For the dropped-beat rhythm every `drop_period`-th beat is not conducted.
    pub drop_period: usize,
    /// Fractional per-record and per-lead gain perturbation.
    pub gain_jitter: f64,
    pub p_wave: PWave,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            bpm: 60.0,
            rhythm: Rhythm::Regular,
            morph: Morphology::Normal,
            noise_std: 0.0,
            duration_s: 10.0,
            fs: 100,
            seed: 0,
            rr_jitter: 0.15,
            drop_period: 2,
            gain_jitter: 0.0,
            p_wave: PWave::AllLeads,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(30.0..=220.0).contains(&self.bpm) {
            return Err(Error::invalid("bpm", format!("{} outside [30, 220]", self.bpm)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std", "must be >= 0"));
        }
        if self.fs == 0 || !(self.duration_s >= 2.0) {
            return Err(Error::invalid("duration_s", "need fs > 0 and at least 2 s"));
        }
        if !(0.0..0.5).contains(&self.rr_jitter) || !(0.0..0.5).contains(&self.gain_jitter) {
            return Err(Error::invalid("jitter", "must lie in [0, 0.5)"));
        }
        if self.drop_period < 2 {
            return Err(Error::invalid("drop_period", "must be >= 2"));
        }
        Ok(())
    }

    /// Ground-truth value of every entry of [`LABEL_NAMES`].
    pub fn labels(&self) -> Vec<bool> {
        vec![
            self.rhythm == Rhythm::IrregularRr,
            self.rhythm == Rhythm::DroppedBeat,
            self.morph == Morphology::WideQrs,
            self.morph == Morphology::HighAmpV,
            self.p_wave == PWave::InvertedLeadIIOnly,
        ]
    }
}

struct Bump {
    amp: f64,
    offset_s: f64,
    sigma_s: f64,
}

fn template(morph: Morphology) -> [Bump; 4] {
    let (w, o) = match morph {
        Morphology::WideQrs => (2.2, 2.0),
        _ => (1.0, 1.0),
    };
    [
        Bump { amp: -0.1, offset_s: -0.03 * o, sigma_s: 0.010 * w },
        Bump { amp: 1.0, offset_s: 0.0, sigma_s: 0.012 * w },
        Bump { amp: -0.2, offset_s: 0.03 * o, sigma_s: 0.012 * w },
        Bump { amp: 0.3, offset_s: 0.28, sigma_s: 0.05 },
    ]
}

const P_BUMP: Bump = Bump {
    amp: 0.15,
    offset_s: -0.16,
    sigma_s: 0.025,
};

fn add_bump(out: &mut [f64], fs: f64, centre_sample: f64, amp: f64, sigma_s: f64) {
    let reach = (5.0 * sigma_s * fs).ceil() as isize;
    let c = centre_sample.round() as isize;
    for n in (c - reach).max(0)..(c + reach + 1).min(out.len() as isize) {
        let dt = (n as f64 - centre_sample) / fs;
        out[n as usize] += amp * (-dt * dt / (2.0 * sigma_s * sigma_s)).exp();
    }
}

fn lead_gains(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut base = BASE_GAINS;
    if spec.morph == Morphology::HighAmpV {
        for (a, b) in HIGH_V_SWAPS {
            base.swap(a, b);
        }
    }
    let j = spec.gain_jitter;
    let record = 1.0 + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
    base.iter()
        .map(|g| {
            let lead = 1.0 + if j > 0.0 { rng.random_range(-j / 2.0..j / 2.0) } else { 0.0 };
            g * record * lead
        })
        .collect()
}

/// Atrial beat times (sample indices) between the edge margins.
fn beat_positions(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let fs = spec.fs as f64;
    let rr = 60.0 * fs / spec.bpm;
    let min_rr = 0.25 * fs;
    let last = n as f64 - EDGE_MARGIN_S * fs;
    let mut t = EDGE_MARGIN_S * fs;
    let mut out = Vec::new();
    while t.round() <= last {
        out.push(t.round() as usize);
        let step = match spec.rhythm {
            Rhythm::IrregularRr if spec.rr_jitter > 0.0 => rr * (1.0 + rng.random_range(-spec.rr_jitter..spec.rr_jitter)),
            _ => rr,
        };
        t += step.max(min_rr);
    }
    out
}

/// Generates one record and the exact R-peak sample indices.
pub fn generate(spec: &SynthSpec) -> Result<(EcgRecord, RPeakSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fs = spec.fs as f64;
    let n = (spec.duration_s * fs).round() as usize;
    let atrial = beat_positions(spec, n, &mut rng);
    let anchors: Vec<usize> = atrial
        .iter()
        .enumerate()
        .filter(|(k, _)| spec.rhythm != Rhythm::DroppedBeat || k % spec.drop_period != spec.drop_period - 1)
        .map(|(_, &p)| p)
        .collect();

    let mut ventricular = vec![0.0; n];
    let bumps = template(spec.morph);
    for &r in &anchors {
        for b in &bumps {
            add_bump(&mut ventricular, fs, r as f64 + b.offset_s * fs, b.amp, b.sigma_s);
        }
    }
    let mut p_wave = vec![0.0; n];
    for &a in &atrial {
        add_bump(&mut p_wave, fs, a as f64 + P_BUMP.offset_s * fs, P_BUMP.amp, P_BUMP.sigma_s);
    }

    let gains = lead_gains(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid("noise_std", e.to_string()))?;
    let signal = gains
        .iter()
        .enumerate()
        .map(|(c, g)| {
            let p_scale = match (spec.p_wave, c == LEAD_II) {
                (PWave::AllLeads, _) => 1.0,
                (PWave::LeadIIOnly, true) => 1.0,
                (PWave::InvertedLeadIIOnly, true) => -1.0,
                (_, false) => 0.0,
            };
            (0..n)
                .map(|t| {
                    let clean = g * (ventricular[t] + p_scale * p_wave[t]);
                    if spec.noise_std > 0.0 {
                        clean + noise.sample(&mut rng)
                    } else {
                        clean
                    }
                })
                .collect()
        })
        .collect();

    let rec = EcgRecord::new(
        format!("synth-{}", spec.seed),
        spec.fs,
        LEAD_NAMES.iter().map(|s| s.to_string()).collect(),
        signal,
        LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
        spec.labels(),
    )?;
    let peaks = RPeakSet {
        anchors,
        detection_lead: LEAD_NAMES[LEAD_II].to_string(),
    };
    Ok((rec, peaks))
}

/// The three labelled test beds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Rhythm × morphology grid. Beats are isolated inside short tokens, so
    /// rhythm is only visible through beat count / timing and the
    /// high-amplitude-V class only through lead identity.
    #[default]
    Default,
    /// Fast regular, irregular and dropped-beat rhythms at matched rates.
    Rhythm,
    /// Ectopic atrial rhythm planted in lead II only.
    Planted,
}

impl std::str::FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(SuiteKind::Default),
            "rhythm" => Ok(SuiteKind::Rhythm),
            "planted" => Ok(SuiteKind::Planted),
            other => Err(Error::invalid("suite", format!("unknown suite {other:?}"))),
        }
    }
}

impl SuiteKind {
    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::Default => "default",
            SuiteKind::Rhythm => "rhythm",
            SuiteKind::Planted => "planted",
        }
    }

    pub fn label_names(self) -> Vec<String> {
        let idx: &[usize] = match self {
            SuiteKind::Default => &[0, 1, 2, 3],
            SuiteKind::Rhythm => &[0, 1],
            SuiteKind::Planted => &[4],
        };
        idx.iter().map(|&i| LABEL_NAMES[i].to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub kind: SuiteKind,
    pub n_per_class: usize,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub noise_std: f64,
    pub duration_s: f64,
    pub fs: u32,
}

impl SuiteConfig {
    pub fn new(kind: SuiteKind, n_per_class: usize, seed: u64) -> Self {
        let duration_s = match kind {
            SuiteKind::Default => 8.0,
            SuiteKind::Rhythm | SuiteKind::Planted => 6.0,
        };
        SuiteConfig {
            kind,
            n_per_class,
            seed,
            ratios: (0.5, 0.3, 0.2),
            noise_std: 0.02,
            duration_s,
            fs: 100,
        }
    }
}

/// A generated, split dataset plus the generator's ground-truth anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSuite {
    pub config: SuiteConfig,
    pub label_names: Vec<String>,
    pub data: Split<EcgRecord>,
    pub truth: BTreeMap<String, Vec<usize>>,
}

fn class_grid(kind: SuiteKind) -> Vec<(Rhythm, Morphology, PWave)> {
    use Morphology::*;
    use Rhythm::*;
    match kind {
        SuiteKind::Default => [Regular, IrregularRr, DroppedBeat]
            .into_iter()
            .flat_map(|r| [Normal, WideQrs, HighAmpV].into_iter().map(move |m| (r, m, PWave::AllLeads)))
            .collect(),
        SuiteKind::Rhythm => [Regular, IrregularRr, DroppedBeat]
            .into_iter()
            .map(|r| (r, Normal, PWave::AllLeads))
            .collect(),
        SuiteKind::Planted => vec![
            (Regular, Normal, PWave::LeadIIOnly),
            (Regular, Normal, PWave::InvertedLeadIIOnly),
        ],
    }
}

fn class_spec(cfg: &SuiteConfig, class: (Rhythm, Morphology, PWave), seed: u64, rng: &mut ChaCha8Rng) -> SynthSpec {
    let (rhythm, morph, p_wave) = class;
    let (bpm, rr_jitter, drop_period) = match (cfg.kind, rhythm) {
        (SuiteKind::Default, Rhythm::IrregularRr) => (rng.random_range(80.0..88.0), 0.12, 2),
        (SuiteKind::Default, _) => (rng.random_range(50.0..60.0), 0.12, 2),
        (SuiteKind::Rhythm, _) => (rng.random_range(110.0..130.0), 0.22, 4),
        (SuiteKind::Planted, _) => (rng.random_range(55.0..75.0), 0.15, 2),
    };
    SynthSpec {
        bpm,
        rhythm,
        morph,
        noise_std: cfg.noise_std,
        duration_s: cfg.duration_s,
        fs: cfg.fs,
        seed,
        rr_jitter,
        drop_period,
        gain_jitter: 0.1,
        p_wave,
    }
}

/// Builds a balanced suite: `n_per_class` records for every class
/// combination, stratified into train/val/test.
pub fn make_suite(cfg: &SuiteConfig) -> Result<SyntheticSuite> {
    if cfg.n_per_class < 4 {
        return Err(Error::invalid("n_per_class", "must be >= 4"));
    }
    let label_names = cfg.kind.label_names();
    let keep: Vec<usize> = label_names
        .iter()
        .map(|n| LABEL_NAMES.iter().position(|l| l == n).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut truth = BTreeMap::new();
    for (ci, class) in class_grid(cfg.kind).into_iter().enumerate() {
        for i in 0..cfg.n_per_class {
            let spec = class_spec(cfg, class, rng.random(), &mut rng);
            let (mut rec, peaks) = generate(&spec)?;
            rec.record_id = format!("{}-c{ci}-{i:03}", cfg.kind.name());
            rec.labels = keep.iter().map(|&k| rec.labels[k]).collect();
            rec.label_names = label_names.clone();
            truth.insert(rec.record_id.clone(), peaks.anchors);
            records.push(rec);
        }
    }
    let data = split_dataset(records, cfg.ratios, cfg.seed)?;
    Ok(SyntheticSuite {
        config: cfg.clone(),
        label_names,
        data,
        truth,
    })
}
