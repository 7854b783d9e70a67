//! Rank correlation and permutation accuracy.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::ops::Permutation;

/// Ascending ranks `0..n`; equal values are ranked by position.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

/// Spearman's rank correlation: Pearson correlation of [`ranks`].
///
/// Constant input has no defined correlation and is an error.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(alloc::format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(invalid("spearman needs at least two entries"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(invalid("spearman input must be finite"));
    }
    if is_constant(a) || is_constant(b) {
        return Err(Error::UndefinedCorrelation);
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 - 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((sab / math::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Number of positions where two permutations agree.
pub fn matching_positions(pred: &Permutation, truth: &Permutation) -> usize {
    pred.as_slice().iter().zip(truth.as_slice()).filter(|(a, b)| a == b).count()
}
