//! Row-wise probability helpers shared by every loss.

use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// `ln(sum(exp(v)))`, shifted by the maximum so large entries cannot overflow.
pub fn logsumexp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Softmax with max-subtraction.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let s: T = out.iter().copied().sum();
    for p in &mut out {
        *p /= s;
    }
    out
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

pub fn softmax_rows<T: Scalar>(logits: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let p = softmax(logits.row(i));
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_stable() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1000.0f64, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_of_log_weights() {
        let p = softmax(&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]);
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_handles_extremes() {
        assert!((logsumexp(&[0.0f64; 10]) - 10.0f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[1e308f64, 0.0]), 1e308);
        let l = log_softmax(&[-1000.0f64, 0.0]);
        assert!((l[0] + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0f64, 2.0]), 0);
    }
}
