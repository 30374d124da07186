//! Per-lead attention mass from the transformer's self-attention.
//!
//! For one record the mass of a token is the attention it receives,
//! averaged over layers, heads and the query positions that feed the pooled
//! representation (the CLS slot when present, else every valid token). Token masses are
//! summed per lead and renormalised; a dataset summary is the mean of the
//! record-level distributions.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Attention, ModelParams};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub task_tag: String,
    pub lead_names: Vec<String>,
    pub per_lead_mass: Vec<f64>,
    pub n_records: usize,
}

impl AttentionSummary {
    pub fn argmax(&self) -> usize {
        (0..self.per_lead_mass.len())
            .max_by(|&a, &b| self.per_lead_mass[a].total_cmp(&self.per_lead_mass[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

/// Attention mass received by each of `n_leads` leads in one record.
pub fn lead_attention(attn: &Attention, seq: &TokenSequence, n_leads: usize) -> Result<Vec<f64>> {
    let mask = seq.mask();
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("tokens", "no valid token to attribute attention to"));
    }
    if attn.layers.is_empty() {
        return Err(Error::invalid("attention", "model has no transformer layers"));
    }
    if let Some(t) = seq.tokens.iter().find(|t| t.valid && t.lead_index >= n_leads) {
        return Err(Error::invalid("lead_index", format!("{} out of range", t.lead_index)));
    }
    let o = attn.offset;
    let s = seq.len() + o;
    // queries that feed the pooled representation: the CLS slot, or every valid token under mean pooling
    let queries: Vec<usize> = if o > 0 {
        (0..o).collect()
    } else {
        (0..seq.len()).filter(|&i| mask[i]).collect()
    };
    let mut received = vec![0.0; seq.len()];
    let mut count = 0usize;
    for layer in &attn.layers {
        let shape = layer.shape();
        if shape.len() != 3 || shape[1] != s || shape[2] != s {
            return Err(Error::ShapeMismatch {
                op: "lead_attention",
                lhs: shape.to_vec(),
                rhs: vec![0, s, s],
            });
        }
        let d = layer.data();
        for h in 0..shape[0] {
            for &q in &queries {
                let row = &d[(h * s + q) * s..(h * s + q + 1) * s];
                for (k, r) in received.iter_mut().enumerate().filter(|(k, _)| mask[*k]) {
                    *r += row[k + o];
                }
                count += 1;
            }
        }
    }
    let mut per_lead = vec![0.0; n_leads];
    for (k, t) in seq.tokens.iter().enumerate().filter(|(_, t)| t.valid) {
        per_lead[t.lead_index] += received[k] / count as f64;
    }
    let total: f64 = per_lead.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("attention", "no mass on valid tokens"));
    }
    Ok(per_lead.iter().map(|m| m / total).collect())
}

/// Mean record-level lead attention of `params` over `data`.
pub fn summarize(params: &ModelParams, data: &[TokenSequence], task_tag: &str, lead_names: &[String]) -> Result<AttentionSummary> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "cannot summarize attention over no records"));
    }
    let n_leads = params.config.n_leads;
    if lead_names.len() != n_leads {
        return Err(Error::invalid(
            "lead_names",
            format!("{} names for a {n_leads}-lead model", lead_names.len()),
        ));
    }
    let masses = data
        .par_iter()
        .map(|seq| {
            let (_, attn) = forward(params, seq)?;
            lead_attention(&attn, seq, n_leads)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; n_leads];
    for m in &masses {
        for (acc, v) in mean.iter_mut().zip(m) {
            *acc += v / masses.len() as f64;
        }
    }
    let total: f64 = mean.iter().sum();
    mean.iter_mut().for_each(|v| *v /= total);
    Ok(AttentionSummary {
        task_tag: task_tag.to_string(),
        lead_names: lead_names.to_vec(),
        per_lead_mass: mean,
        n_records: data.len(),
    })
}

/// One summary over all records (tag `all`) plus one per label over the
/// records where that label is positive.
pub fn summarize_by_label(
    params: &ModelParams,
    data: &[TokenSequence],
    label_names: &[String],
    lead_names: &[String],
) -> Result<Vec<AttentionSummary>> {
    let mut out = vec![summarize(params, data, "all", lead_names)?];
    for (k, name) in label_names.iter().enumerate() {
        let subset: Vec<TokenSequence> = data.iter().filter(|s| s.labels.get(k) == Some(&true)).cloned().collect();
        if !subset.is_empty() {
            out.push(summarize(params, &subset, name, lead_names)?);
        }
    }
    Ok(out)
}

/// `task_tag,lead_name,mass` rows.
pub fn summaries_csv(summaries: &[AttentionSummary]) -> String {
    let mut out = String::from("task_tag,lead_name,mass\n");
    for s in summaries {
        for (name, m) in s.lead_names.iter().zip(&s.per_lead_mass) {
            let _ = writeln!(out, "{},{},{:.9}", s.task_tag, name, m);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::tokenizer::HeartbeatToken;

    fn seq(leads: &[usize], pad: usize) -> TokenSequence {
        let mut tokens: Vec<HeartbeatToken> = leads
            .iter()
            .map(|&c| HeartbeatToken {
                waveform: vec![0.0; 2],
                lead_index: c,
                temporal_index: 0,
                valid: true,
            })
            .collect();
        tokens.extend((0..pad).map(|_| HeartbeatToken::padding(2)));
        TokenSequence {
            tokens,
            labels: vec![],
            record_id: "a".into(),
        }
    }

    fn maps(rows: Vec<f64>, s: usize) -> Attention {
        Attention {
            layers: vec![Tensor::new(vec![1, s, s], rows).unwrap()],
            offset: 0,
        }
    }

    #[test]
    fn uniform_attention_equal_counts() {
        let s = 6;
        let mut rows = Vec::new();
        for _ in 0..s {
            rows.extend([0.25, 0.25, 0.25, 0.25, 0.0, 0.0]);
        }
        let m = lead_attention(&maps(rows, s), &seq(&[0, 1, 0, 1], 2), 2).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn concentrated_attention() {
        let rows: Vec<f64> = (0..3).flat_map(|_| [0.0, 1.0, 0.0]).collect();
        let m = lead_attention(&maps(rows, 3), &seq(&[0, 2, 1], 0), 3).unwrap();
        assert_eq!(m, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_worked_two_leads() {
        // tokens: lead 0, lead 1, lead 0, lead 1
        let rows = vec![
            0.1, 0.2, 0.3, 0.4, //
            0.4, 0.3, 0.2, 0.1, //
            0.0, 0.5, 0.0, 0.5, //
            0.25, 0.25, 0.25, 0.25,
        ];
        let m = lead_attention(&maps(rows, 4), &seq(&[0, 1, 0, 1], 0), 2).unwrap();
        // column sums 0.75, 1.25, 0.75, 1.25 over 4 queries
        let lead0 = (0.75 + 0.75) / 4.0;
        let lead1 = (1.25 + 1.25) / 4.0;
        assert!((m[0] - lead0 / (lead0 + lead1)).abs() < 1e-12);
        assert!((m[1] - lead1 / (lead0 + lead1)).abs() < 1e-12);
        assert!((m[0] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn padding_queries_ignored() {
        let rows = vec![
            0.5, 0.5, 0.0, //
            0.5, 0.5, 0.0, //
            1.0, 0.0, 0.0,
        ];
        let m = lead_attention(&maps(rows, 3), &seq(&[0, 1], 1), 2).unwrap();
        assert_eq!(m, vec![0.5, 0.5]);
    }

    #[test]
    fn cls_row_only_when_present() {
        // slot 0 is CLS; token rows all point at lead 0
        let rows = vec![
            0.1, 0.2, 0.7, //
            0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0,
        ];
        let attn = Attention {
            layers: vec![Tensor::new(vec![1, 3, 3], rows).unwrap()],
            offset: 1,
        };
        let m = lead_attention(&attn, &seq(&[0, 1], 0), 2).unwrap();
        assert!((m[0] - 0.2 / 0.9).abs() < 1e-12 && (m[1] - 0.7 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn rejects_all_padding() {
        assert!(lead_attention(&maps(vec![0.0; 4], 2), &seq(&[], 2), 2).is_err());
    }

    #[test]
    fn csv_rows() {
        let s = AttentionSummary {
            task_tag: "all".into(),
            lead_names: vec!["I".into(), "II".into()],
            per_lead_mass: vec![0.25, 0.75],
            n_records: 3,
        };
        assert_eq!(s.argmax(), 1);
        assert_eq!(summaries_csv(&[s]), "task_tag,lead_name,mass\nall,I,0.250000000\nall,II,0.750000000\n");
    }
}
