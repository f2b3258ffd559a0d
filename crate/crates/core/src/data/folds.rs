use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::derive_seed;
use super::DataError;

/// Per-sample fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Indices held out in `fold`.
    pub fn validation_indices(&self, fold: usize) -> Vec<usize> {
        self.indices_where(|f| f == fold)
    }

    pub fn training_indices(&self, fold: usize) -> Vec<usize> {
        self.indices_where(|f| f != fold)
    }

    fn indices_where(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|&(_, &f)| keep(f))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Per class, shuffles sample indices with a seed-derived stream and deals
/// them round-robin. The dealing position carries over from one class to
/// the next so that fold sizes stay within one of each other overall.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k < 2 {
        return Err(DataError::InvalidK(k));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(DataError::TooFewSamples {
                class,
                count: members.len(),
                k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64, u64::MAX));
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignments[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { k, assignments, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_folds_get_one_of_each_class() {
        let plan = stratified_kfold(&[0, 0, 1, 1, 2, 2], 2, 5).unwrap();
        for fold in 0..2 {
            let mut labels: Vec<usize> = plan
                .validation_indices(fold)
                .iter()
                .map(|&i| [0, 0, 1, 1, 2, 2][i])
                .collect();
            labels.sort();
            assert_eq!(labels, vec![0, 1, 2]);
        }
    }

    #[test]
    fn k_one_is_invalid() {
        assert!(matches!(stratified_kfold(&[0, 1], 1, 0), Err(DataError::InvalidK(1))));
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            stratified_kfold(&[0, 0, 0, 1, 1], 3, 0),
            Err(DataError::TooFewSamples {
                class: 1,
                count: 2,
                k: 3
            })
        ));
    }

    #[test]
    fn same_seed_same_plan() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        assert_eq!(
            stratified_kfold(&labels, 5, 9).unwrap(),
            stratified_kfold(&labels, 5, 9).unwrap()
        );
        assert_ne!(
            stratified_kfold(&labels, 5, 9).unwrap(),
            stratified_kfold(&labels, 5, 10).unwrap()
        );
    }

    proptest! {
        #[test]
        fn folds_partition_and_balance(
            k in 2usize..7,
            extra in prop::collection::vec(0usize..20, 3),
            seed in any::<u64>(),
        ) {
            let mut labels = Vec::new();
            for (c, e) in extra.iter().enumerate() {
                labels.extend(std::iter::repeat_n(c, k + e));
            }
            let plan = stratified_kfold(&labels, k, seed).unwrap();
            prop_assert_eq!(plan.assignments.len(), labels.len());
            let mut seen = vec![false; labels.len()];
            for f in 0..k {
                for i in plan.validation_indices(f) {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
            for c in 0..3 {
                let mut per_fold = vec![0usize; k];
                for (i, &l) in labels.iter().enumerate() {
                    if l == c { per_fold[plan.assignments[i]] += 1; }
                }
                let lo = per_fold.iter().min().unwrap();
                let hi = per_fold.iter().max().unwrap();
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
