use super::EcgRecord;

/// Maps each lead to `[0, 1]` by `(x - min) / (max - min)`. A constant lead
/// has no range to map; it becomes all `0.5` and is named in the warnings.
pub fn minmax_normalize(rec: &EcgRecord) -> (EcgRecord, Vec<String>) {
    let mut warnings = Vec::new();
    let signal = rec
        .signal
        .iter()
        .zip(&rec.lead_names)
        .map(|(lead, name)| {
            let (lo, hi) = lead
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if hi > lo {
                let span = hi - lo;
                lead.iter().map(|v| (v - lo) / span).collect()
            } else {
                warnings.push(format!("{}: constant lead {name} mapped to 0.5", rec.record_id));
                vec![0.5; lead.len()]
            }
        })
        .collect();
    (rec.with_signal(signal, rec.fs), warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::test_record;
    use proptest::prelude::*;

    fn pad(v: &[f64]) -> Vec<f64> {
        // records need 2 s; repeat the pattern
        v.iter().cycle().take(200).copied().collect()
    }

    #[test]
    fn endpoints_map_to_unit_interval() {
        let rec = test_record(vec![pad(&[-1.0, 0.0, 1.0])], 100);
        let (out, warnings) = minmax_normalize(&rec);
        assert_eq!(&out.signal[0][..3], &[0.0, 0.5, 1.0]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn unit_lead_unchanged() {
        let rec = test_record(vec![pad(&[0.0, 1.0])], 100);
        let (out, _) = minmax_normalize(&rec);
        assert_eq!(out.signal, rec.signal);
    }

    #[test]
    fn constant_lead_warns() {
        let rec = test_record(vec![pad(&[0.0, 1.0]), vec![3.0; 200]], 100);
        let (out, warnings) = minmax_normalize(&rec);
        assert!(out.signal[1].iter().all(|&v| v == 0.5));
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("L1"));
    }

    proptest! {
        #[test]
        fn range_is_exactly_unit(lead in prop::collection::vec(-50.0f64..50.0, 200..400)) {
            prop_assume!(lead.iter().any(|&v| v != lead[0]));
            let rec = test_record(vec![lead], 100);
            let (out, _) = minmax_normalize(&rec);
            let lo = out.signal[0].iter().copied().fold(f64::INFINITY, f64::min);
            let hi = out.signal[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo.abs() <= 1e-12);
            prop_assert!((hi - 1.0).abs() <= 1e-12);
        }
    }
}
