use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Assigns every sample a test fold in `0..folds`. Within each class the
/// samples are shuffled and dealt round-robin, so per-class fold sizes
/// differ by at most one; the dealing offset rotates between classes to
/// keep overall fold sizes balanced too.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut offset = 0;
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = (offset + pos) % folds;
        }
        offset = (offset + members.len()) % folds;
    }
    Ok(assignment)
}

/// Indices of the train and test parts of `fold`.
pub fn split(assignment: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] != fold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(assignment: &[usize], labels: &[usize], class: usize, folds: usize) -> Vec<usize> {
        let mut out = vec![0; folds];
        for (a, l) in assignment.iter().zip(labels) {
            if *l == class {
                out[*a] += 1;
            }
        }
        out
    }

    #[test]
    fn ten_samples_give_two_per_fold() {
        let labels = vec![0; 10];
        let a = stratified_folds(&labels, 5, 1).unwrap();
        assert_eq!(sizes(&a, &labels, 0, 5), [2; 5]);
    }

    #[test]
    fn seven_samples_split_two_two_one_one_one() {
        let labels = vec![0; 7];
        let a = stratified_folds(&labels, 5, 1).unwrap();
        let mut s = sizes(&a, &labels, 0, 5);
        s.sort_unstable_by(|x, y| y.cmp(x));
        assert_eq!(s, [2, 2, 1, 1, 1]);
    }

    #[test]
    fn seeded_and_rejects_one_fold() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        assert_eq!(stratified_folds(&labels, 5, 7).unwrap(), stratified_folds(&labels, 5, 7).unwrap());
        assert_ne!(stratified_folds(&labels, 5, 7).unwrap(), stratified_folds(&labels, 5, 8).unwrap());
        assert!(stratified_folds(&labels, 1, 7).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_exact_and_balanced(
            labels in proptest::collection::vec(0usize..7, 1..200),
            folds in 2usize..7,
            seed in any::<u64>(),
        ) {
            let a = stratified_folds(&labels, folds, seed).unwrap();
            let mut seen = vec![0usize; labels.len()];
            for f in 0..folds {
                let (train, test) = split(&a, f);
                prop_assert_eq!(train.len() + test.len(), labels.len());
                for i in test {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
            for c in 0..7 {
                let s = sizes(&a, &labels, c, folds);
                let (lo, hi) = (s.iter().min().unwrap(), s.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
