use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::Record;
use crate::error::{input_err, Result};

/// Subject-level k-fold assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub subject_fold: BTreeMap<usize, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: usize) -> Option<usize> {
        self.subject_fold.get(&subject).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.subject_fold.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Record indices `(train, test)` for held-out fold `fold`.
    pub fn split(&self, records: &[Record], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.k {
            return Err(input_err!("fold {fold} outside [0, {})", self.k));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, r) in records.iter().enumerate() {
            match self.fold_of(r.subject_id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => return Err(input_err!("subject {} has no fold", r.subject_id)),
            }
        }
        Ok((train, test))
    }
}

/// Shuffle distinct subjects with `seed` and deal them round-robin into `k`
/// folds, so fold sizes differ by at most one.
pub fn identity_folds(records: &[Record], k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut subjects: Vec<usize> = records.iter().map(|r| r.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if k == 0 || k > subjects.len() {
        return Err(input_err!("cannot split {} subjects into {k} folds", subjects.len()));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let subject_fold = subjects.iter().enumerate().map(|(i, &s)| (s, i % k)).collect();
    Ok(FoldAssignment { k, subject_fold })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(subjects: usize, per: usize) -> Vec<Record> {
        (0..subjects * per)
            .map(|i| Record { path: format!("{i}.png").into(), subject_id: 100 + i / per, expression: i % 6, synthetic: false })
            .collect()
    }

    #[test]
    fn ten_subjects_one_each() {
        let f = identity_folds(&records(10, 3), 10, 1).unwrap();
        assert_eq!(f.fold_sizes(), vec![1; 10]);
    }

    #[test]
    fn thirty_one_subjects() {
        let f = identity_folds(&records(31, 2), 10, 5).unwrap();
        let sizes = f.fold_sizes();
        assert!(sizes.iter().all(|&s| s == 3 || s == 4));
        assert_eq!(sizes.iter().sum::<usize>(), 31);
    }

    #[test]
    fn too_many_folds() {
        assert!(identity_folds(&records(4, 2), 5, 0).is_err());
    }

    #[test]
    fn split_partitions_records() {
        let recs = records(12, 4);
        let f = identity_folds(&recs, 10, 9).unwrap();
        for fold in 0..10 {
            let (train, test) = f.split(&recs, fold).unwrap();
            assert_eq!(train.len() + test.len(), recs.len());
            assert!(!test.is_empty());
        }
        assert!(f.split(&recs, 10).is_err());
    }
}
