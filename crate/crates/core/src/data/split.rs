use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledSet, Normalization, SplitRecord, SslDataset};
use crate::error::{FatError, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// Seeded semi-supervised split of a labeled source.
///
/// Draws `n_labeled / K` examples of every class for the labeled set, then
/// `n_validation` of the remaining rows for validation; everything else
/// becomes the unlabeled pool (labels kept only as hidden diagnostics). The
/// class count `K` is `max(y) + 1`. The test split starts empty.
pub fn ssl_split<T: Scalar>(
    x: &DenseMatrix<T>,
    y: &[usize],
    n_labeled: usize,
    n_validation: usize,
    seed: u64,
) -> Result<SslDataset<T>> {
    let n = x.rows();
    if y.len() != n {
        return Err(FatError::shape("ssl_split labels", n, y.len()));
    }
    let k = y.iter().max().map_or(0, |&m| m + 1);
    if k < 2 {
        return Err(FatError::Config("ssl_split needs at least two classes".into()));
    }
    if n_labeled == 0 || n_labeled % k != 0 {
        return Err(FatError::Config(format!(
            "n_labeled = {n_labeled} must be a positive multiple of the {k} classes"
        )));
    }
    if n_labeled + n_validation >= n {
        return Err(FatError::Config(format!(
            "{n_labeled} labeled + {n_validation} validation rows leave no unlabeled data out of {n}"
        )));
    }
    let per_class = n_labeled / k;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut taken = vec![0usize; k];
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut rest = Vec::with_capacity(n - n_labeled);
    for &i in &order {
        if taken[y[i]] < per_class {
            taken[y[i]] += 1;
            labeled.push(i);
        } else {
            rest.push(i);
        }
    }
    if let Some(c) = taken.iter().position(|&t| t < per_class) {
        return Err(FatError::Config(format!(
            "class {c} has only {} examples, {per_class} requested",
            taken[c]
        )));
    }
    let unlabeled = rest.split_off(n_validation);
    let validation = rest;

    let pick = |idx: &[usize]| LabeledSet {
        x: x.select_rows(idx),
        y: idx.iter().map(|&i| y[i]).collect(),
    };
    let data = SslDataset {
        labeled: pick(&labeled),
        unlabeled: x.select_rows(&unlabeled),
        unlabeled_truth: Some(unlabeled.iter().map(|&i| y[i]).collect()),
        validation: pick(&validation),
        test: LabeledSet::empty(x.cols()),
        class_count: k,
        input_dim: x.cols(),
        normalization: Normalization::identity(x.cols()),
        record: SplitRecord {
            source_len: n,
            labeled,
            validation,
            unlabeled,
            discarded: Vec::new(),
        },
        descriptor: format!("split(n={n}, labeled={n_labeled}, validation={n_validation}, seed={seed})"),
    };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(n: usize, k: usize) -> (DenseMatrix<f64>, Vec<usize>) {
        let x = DenseMatrix::from_fn(n, 3, |i, j| (i * 3 + j) as f64);
        let y = (0..n).map(|i| (i * 7) % k).collect();
        (x, y)
    }

    #[test]
    fn balanced_labeled_draw() {
        let (x, y) = source(500, 10);
        for (n_lab, per) in [(100, 10), (20, 2)] {
            let d = ssl_split(&x, &y, n_lab, 50, 3).unwrap();
            for c in 0..10 {
                assert_eq!(d.labeled.y.iter().filter(|&&v| v == c).count(), per);
            }
            assert_eq!(d.validation.len(), 50);
            assert_eq!(d.unlabeled.rows(), 500 - n_lab - 50);
        }
    }

    #[test]
    fn splits_partition_the_source_and_rows_follow_indices() {
        let (x, y) = source(300, 3);
        let d = ssl_split(&x, &y, 30, 40, 11).unwrap();
        assert!(d.record.is_partition());
        for (row, &i) in d.unlabeled.iter_rows().zip(&d.record.unlabeled) {
            assert_eq!(row, x.row(i));
        }
        for (&lab, &i) in d.labeled.y.iter().zip(&d.record.labeled) {
            assert_eq!(lab, y[i]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (x, y) = source(200, 4);
        assert_eq!(ssl_split(&x, &y, 8, 10, 1).unwrap(), ssl_split(&x, &y, 8, 10, 1).unwrap());
        assert_ne!(
            ssl_split(&x, &y, 8, 10, 1).unwrap().record,
            ssl_split(&x, &y, 8, 10, 2).unwrap().record
        );
    }

    #[test]
    fn infeasible_counts_are_rejected() {
        let (x, y) = source(100, 4);
        assert!(ssl_split(&x, &y, 10, 10, 0).is_err()); // not a multiple of 4
        assert!(ssl_split(&x, &y, 40, 60, 0).is_err()); // nothing left
        assert!(ssl_split(&x, &y, 0, 10, 0).is_err());
        let mut y2 = y.clone();
        y2.iter_mut().for_each(|v| *v = if *v == 3 { 0 } else { *v });
        y2[0] = 3;
        assert!(ssl_split(&x, &y2, 8, 10, 0).is_err()); // class 3 has one example
    }

    #[test]
    fn capping_moves_rows_to_discarded() {
        let (x, y) = source(200, 2);
        let mut d = ssl_split(&x, &y, 10, 10, 0).unwrap();
        d.cap_unlabeled(50);
        assert_eq!(d.unlabeled.rows(), 50);
        assert_eq!(d.unlabeled_truth.as_ref().unwrap().len(), 50);
        assert_eq!(d.record.discarded.len(), 130);
        assert!(d.record.is_partition());
    }
}
