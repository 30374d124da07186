use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy from logits, `max(x,0) - x*y + ln(1 + e^{-|x|})`.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

/// Area under the ROC curve by the Mann-Whitney rank statistic with
/// midranks for ties. `None` when only one class is present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "auroc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank, so midranks stay integral
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        pos_rank2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = R_pos - P(P+1)/2, counted in halves
    let u2 = pos_rank2 - p * (p + 1);
    Ok(Some(u2 as f64 / (2 * p * n) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AUROC per label; `None` where the label had a single class.
    pub per_label: Vec<Option<f64>>,
    /// Mean over computable labels.
    pub macro_auroc: Option<f64>,
    /// Mean BCE over records.
    pub loss: f64,
    pub skipped: usize,
}

impl EvalReport {
    /// Builds a report from per-record logits and labels.
    pub fn from_outputs(logits: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Self> {
        if logits.is_empty() || logits.len() != labels.len() {
            return Err(Error::invalid("evaluation set", "empty or mismatched outputs"));
        }
        let k = labels[0].len();
        let mut loss = 0.0;
        for (x, y) in logits.iter().zip(labels) {
            if x.len() != k || y.len() != k {
                return Err(Error::invalid("evaluation set", "label counts differ"));
            }
            let t: Vec<f64> = y.iter().map(|&b| f64::from(u8::from(b))).collect();
            loss += bce_with_logits(x, &t);
        }
        let per_label = (0..k)
            .map(|j| {
                let s: Vec<f64> = logits.iter().map(|x| x[j]).collect();
                let l: Vec<bool> = labels.iter().map(|y| y[j]).collect();
                auroc(&s, &l)
            })
            .collect::<Result<Vec<_>>>()?;
        let computable: Vec<f64> = per_label.iter().flatten().copied().collect();
        let macro_auroc = (!computable.is_empty()).then(|| computable.iter().sum::<f64>() / computable.len() as f64);
        Ok(EvalReport {
            skipped: k - computable.len(),
            per_label,
            macro_auroc,
            loss: loss / logits.len() as f64,
        })
    }
}
