//! Pan-Tompkins style QRS detection.

use super::RPeakSet;
use crate::error::{Error, Result};
use crate::signal::{butter_bandpass, filtfilt, EcgRecord};

const BAND: (f64, f64) = (5.0, 15.0);
const INTEGRATION_S: f64 = 0.150;
const REFRACTORY_S: f64 = 0.200;
const TWAVE_S: f64 = 0.360;
const REFINE_S: f64 = 0.080;
const SEARCHBACK_RR: f64 = 1.66;
pub const WARMUP_S: f64 = 2.0;

/// Lead used for detection: "II" when present, else the first lead.
pub fn detection_lead(rec: &EcgRecord) -> usize {
    rec.lead_index("II").unwrap_or(0)
}

/// Detects R peaks on the record's detection lead.
pub fn detect_r_peaks(rec: &EcgRecord) -> Result<RPeakSet> {
    let lead = detection_lead(rec);
    let anchors = detect_on(&rec.signal[lead], rec.fs as f64)?;
    Ok(RPeakSet {
        anchors,
        detection_lead: rec.lead_names[lead].clone(),
    })
}

/// Moving average with a centred window of `w` (odd) samples, truncated at
/// the edges.
fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / w as f64
        })
        .collect()
}

/// Local maxima of `x`, thinned so that survivors are at least `gap`
/// samples apart (larger peaks win).
fn candidate_peaks(x: &[f64], gap: usize) -> Vec<usize> {
    let mut peaks: Vec<usize> = (1..x.len().saturating_sub(1))
        .filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] > 0.0)
        .collect();
    let mut by_height = peaks.clone();
    by_height.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for p in by_height {
        if kept.iter().all(|&k| k.abs_diff(p) >= gap) {
            kept.push(p);
        }
    }
    peaks.retain(|p| kept.contains(p));
    peaks
}

struct Qrs {
    pos: usize,
    slope: f64,
}

pub(crate) fn detect_on(x: &[f64], fs: f64) -> Result<Vec<usize>> {
    let warmup = (WARMUP_S * fs).round() as usize;
    if x.len() < warmup {
        return Err(Error::invalid(
            "record",
            format!("{} samples is shorter than the {WARMUP_S} s detector warm-up", x.len()),
        ));
    }
    let sos = butter_bandpass(2, BAND.0, BAND.1, fs)?;
    let filtered = filtfilt(&sos, x);
    let n = x.len();
    let mut deriv = vec![0.0; n];
    for i in 2..n.saturating_sub(2) {
        deriv[i] = (-filtered[i - 2] - 2.0 * filtered[i - 1] + 2.0 * filtered[i + 1] + filtered[i + 2]) * fs / 8.0;
    }
    let squared: Vec<f64> = deriv.iter().map(|d| d * d).collect();
    let w = ((INTEGRATION_S * fs).round() as usize).max(1) | 1;
    let mwi = moving_average(&squared, w);
    if mwi.iter().all(|&v| v <= 0.0) {
        return Ok(Vec::new());
    }

    let refractory = ((REFRACTORY_S * fs).round() as usize).max(1);
    let twave = (TWAVE_S * fs).round() as usize;
    let candidates = candidate_peaks(&mwi, refractory);
    let slope_at = |p: usize| {
        let lo = p.saturating_sub(w);
        let hi = (p + w / 2 + 1).min(n);
        deriv[lo..hi].iter().fold(0.0f64, |m, d| m.max(d.abs()))
    };

    let head = &mwi[..warmup];
    let mut spki = head.iter().copied().fold(0.0, f64::max) / 3.0;
    let mut npki = head.iter().sum::<f64>() / head.len() as f64 / 2.0;
    let mut qrs: Vec<Qrs> = Vec::new();
    let mut noise_since_last: Vec<usize> = Vec::new();
    let mut rr: Vec<usize> = Vec::new();

    let accept = |qrs: &mut Vec<Qrs>, rr: &mut Vec<usize>, p: usize| {
        if let Some(last) = qrs.last() {
            rr.push(p - last.pos);
            if rr.len() > 8 {
                rr.remove(0);
            }
        }
        qrs.push(Qrs { pos: p, slope: slope_at(p) });
    };

    for &p in &candidates {
        let v = mwi[p];
        let thr1 = npki + 0.25 * (spki - npki);

        if let (Some(last), false) = (qrs.last().map(|q| q.pos), rr.is_empty()) {
            let rr_avg = rr.iter().sum::<usize>() as f64 / rr.len() as f64;
            if (p - last) as f64 > SEARCHBACK_RR * rr_avg {
                let thr2 = 0.5 * thr1;
                let best = noise_since_last
                    .iter()
                    .copied()
                    .filter(|&c| c - last >= refractory && p - c >= refractory && mwi[c] > thr2)
                    .max_by(|&a, &b| mwi[a].total_cmp(&mwi[b]));
                if let Some(c) = best {
                    spki = 0.25 * mwi[c] + 0.75 * spki;
                    accept(&mut qrs, &mut rr, c);
                    noise_since_last.retain(|&k| k > c);
                }
            }
        }

        let thr1 = npki + 0.25 * (spki - npki);
        let mut is_qrs = v > thr1;
        if is_qrs {
            if let Some(last) = qrs.last() {
                if p - last.pos < twave && slope_at(p) < 0.5 * last.slope {
                    is_qrs = false;
                }
            }
        }
        if is_qrs {
            spki = 0.125 * v + 0.875 * spki;
            accept(&mut qrs, &mut rr, p);
            noise_since_last.clear();
        } else {
            npki = 0.125 * v + 0.875 * npki;
            noise_since_last.push(p);
        }
    }

    let radius = (REFINE_S * fs).round() as usize;
    let mut anchors: Vec<usize> = qrs
        .iter()
        .map(|q| {
            let lo = q.pos.saturating_sub(radius);
            let hi = (q.pos + radius + 1).min(n);
            (lo..hi).max_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs()).then(b.cmp(&a))).unwrap()
        })
        .collect();
    anchors.sort_unstable();
    let mut out: Vec<usize> = Vec::with_capacity(anchors.len());
    for a in anchors {
        match out.last_mut() {
            Some(prev) if a - *prev < refractory => {
                if x[a].abs() > x[*prev].abs() {
                    *prev = a;
                }
            }
            _ => out.push(a),
        }
    }
    Ok(out)
}
