//! Cross-entropy losses between relaxed and true permutation matrices.
//!
//! Both are negated mean log-probabilities of the true entries, so lower is
//! better and an exact match scores 0. Probabilities are floored at
//! [`LOG_FLOOR`] before the log.

use crate::error::{invalid, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::ops::PermutationMatrix;

pub const LOG_FLOOR: f64 = 1e-30;

fn check_square(p: &Matrix, n: usize) -> Result<()> {
    if p.rows() != n || p.cols() != n {
        return Err(invalid(alloc::format!("expected a {n}x{n} matrix, got {}x{}", p.rows(), p.cols())));
    }
    if n == 0 {
        return Err(invalid("empty matrix"));
    }
    Ok(())
}

/// `-(1/n) sum_i log P_hat[i, perm[i]]` where `perm` is the support of `p_true`.
pub fn perm_cross_entropy<M: AsRef<Matrix> + ?Sized>(p_hat: &M, p_true: &PermutationMatrix) -> Result<f64> {
    let p_hat = p_hat.as_ref();
    let n = p_true.n();
    check_square(p_hat, n)?;
    let total: f64 = p_true
        .permutation()
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &j)| math::ln(p_hat[(i, j)].max(LOG_FLOOR)))
        .sum();
    Ok(-total / n as f64)
}

/// Gradient of [`perm_cross_entropy`] with respect to `p_hat`. Entries below
/// the floor get zero gradient, matching the clamp.
pub fn perm_cross_entropy_grad<M: AsRef<Matrix> + ?Sized>(p_hat: &M, p_true: &PermutationMatrix) -> Result<Matrix> {
    let p_hat = p_hat.as_ref();
    let n = p_true.n();
    check_square(p_hat, n)?;
    let mut g = Matrix::zeros(n, n);
    let scale = -1.0 / n as f64;
    for (i, &j) in p_true.permutation().as_slice().iter().enumerate() {
        let p = p_hat[(i, j)];
        if p >= LOG_FLOOR {
            g[(i, j)] = scale / p;
        }
    }
    Ok(g)
}

/// `-(1/n) sum_i log P_hat[i, i]`: cross-entropy against the identity.
pub fn diag_cross_entropy<M: AsRef<Matrix> + ?Sized>(p_hat: &M) -> Result<f64> {
    let p_hat = p_hat.as_ref();
    let n = p_hat.rows();
    check_square(p_hat, n)?;
    let total: f64 = (0..n).map(|i| math::ln(p_hat[(i, i)].max(LOG_FLOOR))).sum();
    Ok(-total / n as f64)
}

/// Gradient of [`diag_cross_entropy`] with respect to `p_hat`.
pub fn diag_cross_entropy_grad<M: AsRef<Matrix> + ?Sized>(p_hat: &M) -> Result<Matrix> {
    let p_hat = p_hat.as_ref();
    let n = p_hat.rows();
    check_square(p_hat, n)?;
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        let p = p_hat[(i, i)];
        if p >= LOG_FLOOR {
            g[(i, i)] = -1.0 / (n as f64 * p);
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{central_difference, sample_gapped_scores, Operator};
    use crate::ops::{perm_matrix, Permutation, SemiMetric, Temperature};
    use alloc::vec::Vec;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_urs(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let s = sample_gapped_scores(rng, n, 0.05);
        Operator::SoftSort(SemiMetric::SQUARED)
            .forward(&s, Temperature::new(0.7).unwrap())
            .unwrap()
            .into_matrix()
    }

    #[test]
    fn exact_and_uniform() {
        let p = perm_matrix(&Permutation::new(alloc::vec![2, 0, 1]).unwrap());
        assert_eq!(perm_cross_entropy(&p.to_dense(), &p).unwrap(), 0.0);
        assert_eq!(diag_cross_entropy(&Matrix::identity(4)).unwrap(), 0.0);
        for n in [2, 5, 9] {
            let u = Matrix::filled(n, n, 1.0 / n as f64);
            let id = perm_matrix(&Permutation::identity(n));
            assert!((perm_cross_entropy(&u, &id).unwrap() - (n as f64).ln()).abs() < 1e-12);
            assert!((diag_cross_entropy(&u).unwrap() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn figure_one_weights() {
        let p = Matrix::from_rows(&[[0.04, 0.70, 0.26], [0.09, 0.24, 0.67], [0.85, 0.04, 0.11]]).unwrap();
        let truth = perm_matrix(&Permutation::from_one_based(&[2, 3, 1]).unwrap());
        let expected = -(0.70f64.ln() + 0.67f64.ln() + 0.85f64.ln()) / 3.0;
        let got = perm_cross_entropy(&p, &truth).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.306).abs() < 1e-3);
    }

    #[test]
    fn clamp_keeps_loss_finite() {
        let p = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let l = diag_cross_entropy(&p).unwrap();
        assert!((l - 1e-30f64.ln().abs()).abs() < 1e-9);
        assert_eq!(diag_cross_entropy_grad(&p).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn diag_equals_identity_perm_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = 6;
            let p = random_urs(&mut rng, n);
            let id = perm_matrix(&Permutation::identity(n));
            let a = diag_cross_entropy(&p).unwrap();
            assert!((a - perm_cross_entropy(&p, &id).unwrap()).abs() <= 1e-12);
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn permutation_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 7;
        for _ in 0..20 {
            let p = random_urs(&mut rng, n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let truth = perm_matrix(&Permutation::new(idx.clone()).unwrap());
            idx.shuffle(&mut rng);
            let q = perm_matrix(&Permutation::new(idx).unwrap());
            let pq = q.right_multiply(&p).unwrap();
            let tq = q.right_multiply(&truth.to_dense()).unwrap();
            let tq = PermutationMatrix::from_indices(&crate::ops::hard_project(&tq).unwrap().into_vec()).unwrap();
            let a = perm_cross_entropy(&p, &truth).unwrap();
            let b = perm_cross_entropy(&pq, &tq).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let p = random_urs(&mut rng, n);
        let truth = perm_matrix(&Permutation::new(alloc::vec![1, 3, 0, 2]).unwrap());
        let g = perm_cross_entropy_grad(&p, &truth).unwrap();
        let f = |x: &[f64]| perm_cross_entropy(&Matrix::from_vec(n, n, x.to_vec())?, &truth);
        let num = central_difference(f, p.as_slice(), 1e-7).unwrap();
        for (a, b) in g.as_slice().iter().zip(&num) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        let gd = diag_cross_entropy_grad(&p).unwrap();
        let num = central_difference(|x| diag_cross_entropy(&Matrix::from_vec(n, n, x.to_vec())?), p.as_slice(), 1e-7)
            .unwrap();
        for (a, b) in gd.as_slice().iter().zip(&num) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let id = perm_matrix(&Permutation::identity(3));
        assert!(perm_cross_entropy(&Matrix::zeros(2, 2), &id).is_err());
        assert!(diag_cross_entropy(&Matrix::zeros(2, 3)).is_err());
    }
}
