use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MetricsError;

/// Subject id to fold index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignment.get(subject).copied()
    }

    /// Subjects of one fold, sorted.
    pub fn subjects_in(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.subjects_in(f).len()).collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Seeded shuffle of the (sorted, de-duplicated) subject ids, then
/// round-robin assignment to `k` folds.
pub fn subject_kfold_split(subject_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment, MetricsError> {
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    if k == 0 || k > ids.len() {
        return Err(MetricsError::TooFewSubjects {
            subjects: ids.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k))
        .collect();
    Ok(FoldAssignment { k, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i:03}")).collect()
    }

    #[test]
    fn three_subjects_three_folds() {
        let f = subject_kfold_split(&ids(3), 3, 1).unwrap();
        assert_eq!(f.fold_sizes(), vec![1, 1, 1]);
    }

    #[test]
    fn forty_one_subjects() {
        let f = subject_kfold_split(&ids(41), 3, 9).unwrap();
        assert_eq!(f.fold_sizes(), vec![14, 14, 13]);
        assert_eq!(f.len(), 41);
    }

    #[test]
    fn seeded_and_order_independent() {
        let a = subject_kfold_split(&ids(10), 3, 5).unwrap();
        let mut rev = ids(10);
        rev.reverse();
        let b = subject_kfold_split(&rev, 3, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_folds_rejected() {
        assert!(matches!(
            subject_kfold_split(&ids(2), 3, 0),
            Err(MetricsError::TooFewSubjects { subjects: 2, k: 3 })
        ));
    }
}
