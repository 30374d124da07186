use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EcgRecord;
use crate::error::{Error, Result};

/// Train / validation / test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

fn groups(keys: &[Vec<bool>], seed: u64) -> Vec<Vec<usize>> {
    let mut by_key: BTreeMap<&[bool], Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        by_key.entry(k.as_slice()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    by_key
        .into_values()
        .map(|mut g| {
            g.shuffle(&mut rng);
            g
        })
        .collect()
}

/// A seeded permutation of `0..keys.len()` in which every prefix holds each
/// distinct label pattern in proportion to its overall frequency (up to
/// rounding). Taking prefixes of this order gives nested stratified subsets.
pub fn stratified_order(keys: &[Vec<bool>], seed: u64) -> Vec<usize> {
    let groups = groups(keys, seed);
    let total = keys.len() as f64;
    let mut taken = vec![0usize; groups.len()];
    let mut order = Vec::with_capacity(keys.len());
    for pos in 0..keys.len() {
        let best = (0..groups.len())
            .filter(|&g| taken[g] < groups[g].len())
            .max_by(|&a, &b| {
                let deficit = |g: usize| groups[g].len() as f64 * (pos + 1) as f64 / total - taken[g] as f64;
                // ties go to the earlier group
                deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a))
            })
            .expect("some group has items left");
        order.push(groups[best][taken[best]]);
        taken[best] += 1;
    }
    order
}

/// Partition sizes by largest remainder, with every partition non-empty.
fn partition_sizes(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut by_frac: Vec<usize> = (0..ratios.len()).collect();
    by_frac.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in by_frac.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).unwrap();
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    sizes
}

/// Stratified assignment of indices to partitions with the given ratios.
/// Items are laid out label-group by label-group (shuffled within a group)
/// and dealt to whichever partition is furthest behind its quota.
pub fn stratified_partition(keys: &[Vec<bool>], ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if ratios.iter().any(|&r| r <= 0.0 || !r.is_finite()) {
        return Err(Error::invalid("ratios", "every ratio must be positive"));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ratios", format!("sum to {total}, not 1")));
    }
    let n = keys.len();
    if n < ratios.len() {
        return Err(Error::invalid(
            "records",
            format!("{n} records cannot fill {} partitions", ratios.len()),
        ));
    }
    let sizes = partition_sizes(n, ratios);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); ratios.len()];
    let layout: Vec<usize> = groups(keys, seed).into_iter().flatten().collect();
    for (pos, idx) in layout.into_iter().enumerate() {
        let best = (0..parts.len())
            .filter(|&p| parts[p].len() < sizes[p])
            .max_by(|&a, &b| {
                let deficit = |p: usize| sizes[p] as f64 * (pos + 1) as f64 / n as f64 - parts[p].len() as f64;
                deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a))
            })
            .expect("quota left");
        parts[best].push(idx);
    }
    Ok(parts)
}

/// Deterministic stratified train/val/test split.
pub fn split_dataset(records: Vec<EcgRecord>, ratios: (f64, f64, f64), seed: u64) -> Result<Split<EcgRecord>> {
    let keys: Vec<Vec<bool>> = records.iter().map(|r| r.labels.clone()).collect();
    let parts = stratified_partition(&keys, &[ratios.0, ratios.1, ratios.2], seed)?;
    let mut slots: Vec<Option<EcgRecord>> = records.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().unwrap()).collect::<Vec<_>>();
    Ok(Split {
        train: take(&parts[0]),
        val: take(&parts[1]),
        test: take(&parts[2]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn records(n: usize) -> Vec<EcgRecord> {
        (0..n)
            .map(|i| {
                EcgRecord::new(
                    format!("r{i}"),
                    100,
                    vec!["I".into()],
                    vec![vec![0.0; 200]],
                    vec!["a".into(), "b".into()],
                    vec![i % 2 == 0, i % 3 == 0],
                )
                .unwrap()
            })
            .collect()
    }

    fn ids(v: &[EcgRecord]) -> Vec<String> {
        v.iter().map(|r| r.record_id.clone()).collect()
    }

    #[test]
    fn seven_one_two() {
        let s = split_dataset(records(10), (0.7, 0.1, 0.2), 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
    }

    #[test]
    fn deterministic() {
        let a = split_dataset(records(37), (0.7, 0.1, 0.2), 42).unwrap();
        let b = split_dataset(records(37), (0.7, 0.1, 0.2), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_records() {
        assert!(split_dataset(records(2), (0.7, 0.1, 0.2), 1).is_err());
        assert!(split_dataset(records(10), (0.7, 0.1, 0.3), 1).is_err());
    }

    #[test]
    fn every_partition_nonempty_when_possible() {
        let s = split_dataset(records(3), (0.7, 0.1, 0.2), 5).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn stratifies_two_balanced_classes() {
        let keys: Vec<Vec<bool>> = (0..40).map(|i| vec![i % 2 == 0]).collect();
        let parts = stratified_partition(&keys, &[0.5, 0.5], 3).unwrap();
        for p in parts {
            let pos = p.iter().filter(|&&i| keys[i][0]).count();
            assert_eq!(pos, 10);
        }
    }

    #[test]
    fn order_prefixes_are_stratified() {
        let keys: Vec<Vec<bool>> = (0..90).map(|i| vec![i % 3 == 0]).collect();
        let order = stratified_order(&keys, 9);
        for prefix in [3, 9, 30, 60] {
            let pos = order[..prefix].iter().filter(|&&i| keys[i][0]).count();
            assert!((pos as f64 - prefix as f64 / 3.0).abs() <= 1.0, "{prefix}: {pos}");
        }
    }

    proptest! {
        #[test]
        fn partition_covers_and_is_disjoint(n in 3usize..80, seed in 0u64..1000) {
            let recs = records(n);
            let all: BTreeSet<String> = ids(&recs).into_iter().collect();
            let s = split_dataset(recs, (0.7, 0.1, 0.2), seed).unwrap();
            let (a, b, c): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
                ids(&s.train).into_iter().collect(),
                ids(&s.val).into_iter().collect(),
                ids(&s.test).into_iter().collect(),
            );
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            let union: BTreeSet<String> = a.union(&b).chain(c.iter()).cloned().collect();
            prop_assert_eq!(union, all);
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        }
    }
}
