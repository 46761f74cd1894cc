//! Cross-validation splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Shuffles `ids` by `seed` and cuts `k` contiguous test folds whose sizes
/// differ by at most one (larger folds first). Within each fold, the first
/// `val_size` remaining ids (in shuffled order) validate and the rest train.
pub fn make_folds(ids: &[String], k: usize, val_size: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::config("need at least 2 folds"));
    }
    if ids.len() < k + val_size {
        return Err(Error::data(format!(
            "cohort too small: {} ids for {k} folds and {val_size} validation",
            ids.len()
        )));
    }
    let mut unique = ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != ids.len() {
        return Err(Error::data("duplicate patient ids"));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test_ids = order[start..start + len].to_vec();
        let rest: Vec<String> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .cloned()
            .collect();
        let (val, train) = rest.split_at(val_size);
        folds.push(FoldSplit {
            fold_index: f,
            train_ids: train.to_vec(),
            val_ids: val.to_vec(),
            test_ids,
        });
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    pub(crate) fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn cohort_of_197() {
        let folds = make_folds(&ids(197), 5, 32, 0).unwrap();
        let test: Vec<usize> = folds.iter().map(|f| f.test_ids.len()).collect();
        let train: Vec<usize> = folds.iter().map(|f| f.train_ids.len()).collect();
        assert_eq!(test, [40, 40, 39, 39, 39]);
        assert_eq!(train, [125, 125, 126, 126, 126]);
        assert!(folds.iter().all(|f| f.val_ids.len() == 32));
    }

    #[test]
    fn ten_ids() {
        let folds = make_folds(&ids(10), 5, 1, 3).unwrap();
        assert!(folds
            .iter()
            .all(|f| f.test_ids.len() == 2 && f.val_ids.len() == 1 && f.train_ids.len() == 7));
        assert!(make_folds(&ids(5), 5, 1, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn folds_partition_the_cohort(n in 6usize..80, seed in any::<u64>()) {
                let all = ids(n);
                let folds = make_folds(&all, 5, 1, seed).unwrap();
                let mut tests = BTreeSet::new();
                for f in &folds {
                    let (a, b, c): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
                        f.train_ids.iter().collect(), f.val_ids.iter().collect(), f.test_ids.iter().collect());
                    prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
                    prop_assert_eq!(a.len() + b.len() + c.len(), n);
                    for id in &f.test_ids { prop_assert!(tests.insert(id.clone())); }
                }
                prop_assert_eq!(tests.len(), n);
            }
        }
    }
}
