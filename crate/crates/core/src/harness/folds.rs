use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Shuffle with `seed`, then deal ids round-robin into `n_folds` validation
/// sets. Fold sizes differ by at most one.
pub fn split_folds(case_ids: &[String], n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!("cross-validation needs at least 2 folds, got {n_folds}")));
    }
    if case_ids.len() < n_folds {
        return Err(Error::InvalidArgument(format!(
            "{} cases are too few for {n_folds} folds",
            case_ids.len()
        )));
    }
    let mut sorted = case_ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate case ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut vals = vec![Vec::new(); n_folds];
    for (i, id) in sorted.iter().enumerate() {
        vals[i % n_folds].push(id.clone());
    }
    Ok(vals
        .into_iter()
        .map(|val| {
            let train = sorted.iter().filter(|id| !val.contains(id)).cloned().collect();
            Fold { train, val }
        })
        .collect())
}

/// The fold `train` uses: with one fold every case both trains and validates.
pub fn select_fold(case_ids: &[String], n_folds: usize, fold: usize, seed: u64) -> Result<Fold> {
    if n_folds == 1 {
        let mut all = case_ids.to_vec();
        all.sort();
        return Ok(Fold {
            train: all.clone(),
            val: all,
        });
    }
    split_folds(case_ids, n_folds, seed)?
        .into_iter()
        .nth(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} out of range for {n_folds} folds")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:02}")).collect()
    }

    #[test]
    fn twenty_cases_five_folds() {
        let folds = split_folds(&ids(20), 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for (i, f) in folds.iter().enumerate() {
            assert_eq!(f.val.len(), 4);
            assert_eq!(f.train.len(), 16);
            for g in &folds[i + 1..] {
                assert!(f.val.iter().all(|id| !g.val.contains(id)));
            }
        }
    }

    #[test]
    fn too_few_cases() {
        assert!(split_folds(&ids(3), 5, 0).is_err());
        assert!(split_folds(&ids(3), 1, 0).is_err());
        assert!(split_folds(&["a".into(), "a".into()], 2, 0).is_err());
    }

    #[test]
    fn single_fold_reuses_everything() {
        let f = select_fold(&ids(2), 1, 0, 0).unwrap();
        assert_eq!(f.train, f.val);
        assert_eq!(f.val.len(), 2);
    }

    proptest! {
        #[test]
        fn folds_partition_the_ids(n in 2usize..40, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let all = ids(n);
            let folds = split_folds(&all, k, seed).unwrap();
            prop_assert_eq!(&folds, &split_folds(&all, k, seed).unwrap());
            let mut seen: Vec<String> = folds.iter().flat_map(|f| f.val.clone()).collect();
            seen.sort();
            prop_assert_eq!(&seen, &all);
            for f in &folds {
                prop_assert_eq!(f.train.len() + f.val.len(), n);
                prop_assert!(f.val.len() == n / k || f.val.len() == n / k + 1);
                prop_assert!(f.train.iter().all(|id| !f.val.contains(id)));
            }
        }
    }
}
