//! Forward evaluation of `argsort`, `sort`, permutation matrices and the two
//! relaxed operators.
//!
//! For a score vector `s` with decreasing order statistics `s_[0] >= s_[1] >= ...`:
//!
//! ```text
//! SoftSort_tau^d(s)[i, j]  = softmax_j( -d(s_[i], s_j) / tau )
//! NeuralSort_tau(s)[i, j]  = softmax_j( ((n - 1 - 2i) s_j - sum_k |s_j - s_k|) / tau )
//! ```
//!
//! Both produce unimodal row-stochastic (URS) matrices whose row-wise argmax
//! is `argsort_desc(s)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::matrix::Matrix;

/// Tolerance on row sums used by [`RelaxedPermMatrix::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

pub(crate) fn check_scores(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(invalid("score vector is empty"));
    }
    if let Some(i) = s.iter().position(|x| !x.is_finite()) {
        return Err(invalid(format!("score {i} is not finite ({})", s[i])));
    }
    Ok(())
}

/// Softmax temperature. Always finite and strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(invalid(format!("temperature must be finite and > 0, got {tau}")))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Self::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum MetricKind {
    Abs,
    Squared,
    Power(f64),
}

/// Pointwise semi-metric `d(x, y) = |x - y|^p` with `p > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SemiMetric {
    kind: MetricKind,
}

impl SemiMetric {
    /// `|x - y|`
    pub const ABSOLUTE: SemiMetric = SemiMetric { kind: MetricKind::Abs };
    /// `|x - y|^2`
    pub const SQUARED: SemiMetric = SemiMetric { kind: MetricKind::Squared };

    pub fn new(power: f64) -> Result<Self> {
        if !(power.is_finite() && power > 0.0) {
            return Err(invalid(format!("semi-metric power must be finite and > 0, got {power}")));
        }
        let kind = if power == 1.0 {
            MetricKind::Abs
        } else if power == 2.0 {
            MetricKind::Squared
        } else {
            MetricKind::Power(power)
        };
        Ok(Self { kind })
    }

    pub fn power(self) -> f64 {
        match self.kind {
            MetricKind::Abs => 1.0,
            MetricKind::Squared => 2.0,
            MetricKind::Power(p) => p,
        }
    }

    #[inline]
    pub fn eval(self, x: f64, y: f64) -> f64 {
        self.of_diff(x - y)
    }

    /// `|diff|^p`
    #[inline]
    pub(crate) fn of_diff(self, diff: f64) -> f64 {
        match self.kind {
            MetricKind::Abs => math::abs(diff),
            MetricKind::Squared => diff * diff,
            MetricKind::Power(p) => math::powf(math::abs(diff), p),
        }
    }

    /// Derivative of `x -> |x|^p` at `diff`, taken as 0 at the origin.
    #[inline]
    pub(crate) fn derivative(self, diff: f64) -> f64 {
        match self.kind {
            MetricKind::Abs => math::sign(diff),
            MetricKind::Squared => 2.0 * diff,
            MetricKind::Power(p) => {
                if diff == 0.0 {
                    0.0
                } else {
                    p * math::powf(math::abs(diff), p - 1.0) * math::sign(diff)
                }
            }
        }
    }
}

impl TryFrom<f64> for SemiMetric {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        Self::new(p)
    }
}

impl From<SemiMetric> for f64 {
    fn from(d: SemiMetric) -> f64 {
        d.power()
    }
}

/// A bijection on `{0, .., n-1}`. `perm[i]` is the index of the `i`-th
/// largest score when produced by [`argsort_desc`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n {
                return Err(invalid(format!("index {i} out of range for permutation of {n}")));
            }
            if core::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("index {i} appears more than once")));
            }
        }
        Ok(Self(indices))
    }

    pub fn from_one_based(indices: &[usize]) -> Result<Self> {
        let zero_based = indices
            .iter()
            .map(|&i| i.checked_sub(1).ok_or_else(|| invalid("one-based index 0")))
            .collect::<Result<Vec<_>>>()?;
        Self::new(zero_based)
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Permutation(inv)
    }
}

impl Index<usize> for Permutation {
    type Output = usize;

    #[inline]
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// One-hot matrix of a permutation: `P[i, j] = 1` iff `j == perm[i]`.
///
/// Stored sparsely as the permutation itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationMatrix {
    perm: Permutation,
}

impl PermutationMatrix {
    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        Ok(Self { perm: Permutation::new(indices.to_vec())? })
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.perm[i] == j {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.n();
        let mut m = Matrix::zeros(n, n);
        for (i, &j) in self.perm.as_slice().iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }

    /// `P v`, i.e. `out[i] = v[perm[i]]`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n() {
            return Err(invalid(format!(
                "vector of length {} does not match permutation of {}",
                v.len(),
                self.n()
            )));
        }
        Ok(self.perm.as_slice().iter().map(|&j| v[j]).collect())
    }

    /// `M P`: column `perm[k]` of the result is column `k` of `M`.
    pub fn right_multiply(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.n() {
            return Err(invalid(format!(
                "cannot multiply {}x{} by a {n}x{n} permutation matrix",
                m.rows(),
                m.cols(),
                n = self.n()
            )));
        }
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            let src = m.row(i);
            let dst = out.row_mut(i);
            for (k, &j) in self.perm.as_slice().iter().enumerate() {
                dst[j] = src[k];
            }
        }
        Ok(out)
    }
}

/// Why a matrix fails to be unimodal row-stochastic.
#[derive(Clone, Debug, PartialEq)]
pub enum UrsViolation {
    NotSquare { rows: usize, cols: usize },
    Negative { row: usize, col: usize, value: f64 },
    RowAffinity { row: usize, sum: f64 },
    ArgmaxPermutation { row: usize, col: usize },
}

impl UrsViolation {
    /// Name of the violated URS property.
    pub fn property(&self) -> &'static str {
        match self {
            UrsViolation::NotSquare { .. } => "shape",
            UrsViolation::Negative { .. } => "non-negativity",
            UrsViolation::RowAffinity { .. } => "row affinity",
            UrsViolation::ArgmaxPermutation { .. } => "argmax permutation",
        }
    }
}

impl fmt::Display for UrsViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            UrsViolation::NotSquare { rows, cols } => write!(f, "shape: matrix is {rows}x{cols}"),
            UrsViolation::Negative { row, col, value } => {
                write!(f, "non-negativity: entry ({row}, {col}) is {value}")
            }
            UrsViolation::RowAffinity { row, sum } => {
                write!(f, "row affinity: row {row} sums to {sum}")
            }
            UrsViolation::ArgmaxPermutation { row, col } => {
                write!(f, "argmax permutation: column {col} is the argmax of row {row} and an earlier row")
            }
        }
    }
}

/// Output of [`soft_sort`] and [`neural_sort`]: an `n x n` matrix whose rows
/// are probability vectors with distinct argmaxes.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedPermMatrix(Matrix);

impl RelaxedPermMatrix {
    /// Wraps `m` after checking the URS properties with [`ROW_SUM_TOLERANCE`].
    pub fn new(m: Matrix) -> Result<Self> {
        let p = Self(m);
        p.check_urs(ROW_SUM_TOLERANCE).map_err(|v| invalid(format!("{v}")))?;
        Ok(p)
    }

    /// Wraps `m` without validation.
    pub fn from_matrix_unchecked(m: Matrix) -> Self {
        Self(m)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// First index of the maximum of each row.
    pub fn row_argmaxes(&self) -> Vec<usize> {
        row_argmaxes(&self.0)
    }

    pub fn check_urs(&self, row_sum_tol: f64) -> Result<(), UrsViolation> {
        let m = &self.0;
        if !m.is_square() {
            return Err(UrsViolation::NotSquare { rows: m.rows(), cols: m.cols() });
        }
        for (i, row) in m.row_iter().enumerate() {
            if let Some(j) = row.iter().position(|&x| !(x >= 0.0)) {
                return Err(UrsViolation::Negative { row: i, col: j, value: row[j] });
            }
            let sum: f64 = row.iter().sum();
            if !(math::abs(sum - 1.0) <= row_sum_tol) {
                return Err(UrsViolation::RowAffinity { row: i, sum });
            }
        }
        let mut seen = vec![false; m.cols()];
        for (i, j) in self.row_argmaxes().into_iter().enumerate() {
            if core::mem::replace(&mut seen[j], true) {
                return Err(UrsViolation::ArgmaxPermutation { row: i, col: j });
            }
        }
        Ok(())
    }
}

impl AsRef<Matrix> for RelaxedPermMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

impl AsRef<Matrix> for Matrix {
    fn as_ref(&self) -> &Matrix {
        self
    }
}

fn row_argmaxes(m: &Matrix) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A batch of `B` score vectors of common length `n`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBatch {
    n: usize,
    data: Vec<f64>,
}

impl ScoreBatch {
    pub fn new<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.first().map(|r| r.as_ref().len()).ok_or_else(|| invalid("empty batch"))?;
        let mut data = Vec::with_capacity(n * rows.len());
        for (b, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n {
                return Err(invalid(format!(
                    "batch row {b} has length {}, expected {n}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(n, data)
    }

    pub fn from_flat(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() % n != 0 {
            return Err(invalid(format!("cannot split {} values into rows of {n}", data.len())));
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, b: usize) -> &[f64] {
        &self.data[b * self.n..(b + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n)
    }
}

/// Permutation that sorts `s` in decreasing order. Ties keep their original
/// relative order.
pub fn argsort_desc(s: &[f64]) -> Result<Permutation> {
    check_scores(s)?;
    Ok(argsort_desc_unchecked(s))
}

pub(crate) fn argsort_desc_unchecked(s: &[f64]) -> Permutation {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    // slice::sort_by is stable; partial_cmp is total on finite input and
    // treats -0.0 == 0.0 as a tie.
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(core::cmp::Ordering::Equal));
    Permutation(idx)
}

/// `s` sorted in decreasing order.
pub fn sort_desc(s: &[f64]) -> Result<Vec<f64>> {
    let perm = argsort_desc(s)?;
    Ok(perm.as_slice().iter().map(|&j| s[j]).collect())
}

pub fn perm_matrix(p: &Permutation) -> PermutationMatrix {
    PermutationMatrix { perm: p.clone() }
}

/// Row-wise `softmax(m / tau)` with per-row max subtraction.
pub fn row_softmax(m: &Matrix, tau: Temperature) -> Result<Matrix> {
    if let Some(x) = m.as_slice().iter().find(|x| !x.is_finite()) {
        return Err(invalid(format!("matrix entry is not finite ({x})")));
    }
    let mut out = m.clone();
    row_softmax_in_place(&mut out, tau.get());
    Ok(out)
}

pub(crate) fn row_softmax_in_place(m: &mut Matrix, tau: f64) {
    let inv_tau = 1.0 / tau;
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = math::exp((*x - max) * inv_tau);
            z += *x;
        }
        let inv_z = 1.0 / z;
        row.iter_mut().for_each(|x| *x *= inv_z);
    }
}

/// SoftSort relaxation of `P_argsort(s)`.
pub fn soft_sort(s: &[f64], tau: Temperature, d: SemiMetric) -> Result<RelaxedPermMatrix> {
    check_scores(s)?;
    let perm = argsort_desc_unchecked(s);
    let mut out = Matrix::zeros(s.len(), s.len());
    soft_sort_into(s, &perm, tau.get(), d, &mut out);
    Ok(RelaxedPermMatrix(out))
}

/// Writes `SoftSort(s)` into `out` given `perm = argsort_desc(s)`.
pub(crate) fn soft_sort_into(s: &[f64], perm: &Permutation, tau: f64, d: SemiMetric, out: &mut Matrix) {
    match d.kind {
        MetricKind::Abs => soft_sort_rows(s, perm, tau, out, math::abs),
        MetricKind::Squared => soft_sort_rows(s, perm, tau, out, |x| x * x),
        MetricKind::Power(p) => soft_sort_rows(s, perm, tau, out, |x| math::powf(math::abs(x), p)),
    }
}

#[inline(always)]
fn soft_sort_rows(s: &[f64], perm: &Permutation, tau: f64, out: &mut Matrix, dist: impl Fn(f64) -> f64) {
    let n = s.len();
    out.resize(n, n);
    let neg_inv_tau = -1.0 / tau;
    for (i, &anchor_idx) in perm.as_slice().iter().enumerate() {
        let anchor = s[anchor_idx];
        let row = out.row_mut(i);
        // The row maximum is the zero logit at column perm[i], so no shift is
        // needed: every exponent is <= 0.
        let mut z = 0.0;
        for (o, &sj) in row.iter_mut().zip(s) {
            let e = math::exp(dist(anchor - sj) * neg_inv_tau);
            *o = e;
            z += e;
        }
        let inv_z = 1.0 / z;
        row.iter_mut().for_each(|x| *x *= inv_z);
    }
}

/// `A_s 1`, the row sums of the absolute pairwise difference matrix, as a
/// matrix-vector product in `O(n^2)`.
pub(crate) fn abs_dev_sums(s: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(s.iter().map(|&sj| s.iter().map(|&sk| math::abs(sj - sk)).sum::<f64>()));
}

/// NeuralSort logits: row `i` is `(n - 1 - 2i) s - A_s 1` (0-based `i`).
pub fn neural_sort_logits(s: &[f64]) -> Result<Matrix> {
    check_scores(s)?;
    let n = s.len();
    let mut dev_sums = Vec::new();
    abs_dev_sums(s, &mut dev_sums);
    Matrix::from_vec(n, n, logit_rows(s, &dev_sums))
}

/// Outputs at least this large bypass the cache when written, where the
/// target supports it. Smaller outputs are faster through the cache.
const STREAMING_STORE_BYTES: usize = 4 << 20;

fn logit_rows(s: &[f64], dev_sums: &[f64]) -> Vec<f64> {
    let n = s.len();
    let mut data = Vec::with_capacity(n * n);
    #[cfg(target_arch = "x86_64")]
    if n * n * core::mem::size_of::<f64>() >= STREAMING_STORE_BYTES {
        stream_logit_rows(s, dev_sums, &mut data);
        return data;
    }
    for i in 0..n {
        let scale = (n as f64) - 1.0 - 2.0 * (i as f64);
        data.extend(s.iter().zip(dev_sums).map(|(&sj, &bj)| scale * sj - bj));
    }
    data
}

/// Same values as the plain loop in [`logit_rows`], written with
/// non-temporal stores so a large fresh buffer is not read in before being
/// overwritten.
#[cfg(target_arch = "x86_64")]
fn stream_logit_rows(s: &[f64], dev_sums: &[f64], data: &mut Vec<f64>) {
    use core::arch::x86_64::{_mm_set_pd, _mm_sfence, _mm_stream_pd};

    let n = s.len();
    assert!(data.is_empty() && data.capacity() >= n * n && dev_sums.len() == n);
    let logit = |scale: f64, j: usize| scale * s[j] - dev_sums[j];
    let base = data.as_mut_ptr();
    for i in 0..n {
        let scale = (n as f64) - 1.0 - 2.0 * (i as f64);
        // SAFETY: `row..row + n` lies inside the reserved capacity. SSE2 is
        // part of the x86_64 baseline, and `row + j` is 16-byte aligned for
        // every streamed pair because an unaligned head element is written
        // separately first (f64 pointers are always 8-byte aligned).
        unsafe {
            let row = base.add(i * n);
            let mut j = 0;
            if (row as usize) % 16 != 0 {
                row.write(logit(scale, 0));
                j = 1;
            }
            while j + 1 < n {
                _mm_stream_pd(row.add(j), _mm_set_pd(logit(scale, j + 1), logit(scale, j)));
                j += 2;
            }
            if j < n {
                row.add(j).write(logit(scale, j));
            }
        }
    }
    // SAFETY: every one of the n * n slots was written above; the fence
    // orders the streaming stores before any later access.
    unsafe {
        _mm_sfence();
        data.set_len(n * n);
    }
}

pub(crate) fn neural_sort_logits_into(s: &[f64], out: &mut Matrix, dev_sums: &mut Vec<f64>) {
    let n = s.len();
    out.resize(n, n);
    abs_dev_sums(s, dev_sums);
    for i in 0..n {
        let scale = (n as f64) - 1.0 - 2.0 * (i as f64);
        for ((o, &sj), &bj) in out.row_mut(i).iter_mut().zip(s).zip(dev_sums.iter()) {
            *o = scale * sj - bj;
        }
    }
}

/// NeuralSort relaxation of `P_argsort(s)`.
pub fn neural_sort(s: &[f64], tau: Temperature) -> Result<RelaxedPermMatrix> {
    let mut out = neural_sort_logits(s)?;
    row_softmax_in_place(&mut out, tau.get());
    Ok(RelaxedPermMatrix(out))
}

pub(crate) fn neural_sort_into(s: &[f64], tau: f64, out: &mut Matrix, scratch: &mut Vec<f64>) {
    neural_sort_logits_into(s, out, scratch);
    row_softmax_in_place(out, tau);
}

/// Row-wise argmax of a relaxed permutation matrix.
///
/// Fails if two rows share an argmax, which cannot happen for URS input.
pub fn hard_project<M: AsRef<Matrix> + ?Sized>(p: &M) -> Result<Permutation> {
    let m = p.as_ref();
    if !m.is_square() || m.rows() == 0 {
        return Err(invalid(format!("expected a non-empty square matrix, got {}x{}", m.rows(), m.cols())));
    }
    Permutation::new(row_argmaxes(m))
        .map_err(|_| invalid("row argmaxes collide; matrix is not unimodal row-stochastic"))
}

pub fn soft_sort_batch(batch: &ScoreBatch, tau: Temperature, d: SemiMetric) -> Result<Vec<RelaxedPermMatrix>> {
    batch.rows().map(|s| soft_sort(s, tau, d)).collect()
}

pub fn neural_sort_batch(batch: &ScoreBatch, tau: Temperature) -> Result<Vec<RelaxedPermMatrix>> {
    batch.rows().map(|s| neural_sort(s, tau)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in all_permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Every permutation that lists `s` non-increasingly with tied entries in
    /// increasing index order.
    fn stable_desc_orderings(s: &[f64]) -> Vec<Vec<usize>> {
        all_permutations(s.len())
            .into_iter()
            .filter(|p| {
                p.windows(2).all(|w| s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]))
            })
            .collect()
    }

    /// Minimum gap >= `gap` between entries, in shuffled order.
    fn gapped_scores(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(n);
        let mut x = rng.random_range(-3.0..3.0);
        for _ in 0..n {
            v.push(x);
            x += gap + rng.random_range(0.0..0.5);
        }
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            v.swap(i, j);
        }
        v
    }

    #[test]
    fn argsort_matches_worked_example() {
        let p = argsort_desc(&[9.0, 1.0, 5.0, 2.0]).unwrap();
        assert_eq!(p.to_one_based(), vec![1, 3, 4, 2]);
        assert_eq!(argsort_desc(&[7.0]).unwrap().to_one_based(), vec![1]);
    }

    #[test]
    fn argsort_ties_are_stable() {
        let s = [3.0, 3.0, 1.0];
        let oracle = stable_desc_orderings(&s);
        assert_eq!(oracle.len(), 1);
        assert_eq!(argsort_desc(&s).unwrap().as_slice(), oracle[0].as_slice());
        assert_eq!(argsort_desc(&s).unwrap().to_one_based(), vec![1, 2, 3]);
    }

    #[test]
    fn argsort_agrees_with_brute_force_on_small_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            // Small integer range so ties are common.
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
            let oracle = stable_desc_orderings(&s);
            assert_eq!(oracle.len(), 1);
            assert_eq!(argsort_desc(&s).unwrap().as_slice(), oracle[0].as_slice());
        }
    }

    #[test]
    fn empty_and_non_finite_inputs_rejected() {
        assert!(argsort_desc(&[]).is_err());
        assert!(sort_desc(&[]).is_err());
        assert!(argsort_desc(&[1.0, f64::NAN]).is_err());
        assert!(soft_sort(&[f64::INFINITY], tau(1.0), SemiMetric::ABSOLUTE).is_err());
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert!(SemiMetric::new(-1.0).is_err());
    }

    #[test]
    fn sort_desc_examples() {
        assert_eq!(sort_desc(&[2.0, 5.0, 4.0]).unwrap(), vec![5.0, 4.0, 2.0]);
        assert_eq!(sort_desc(&[9.0, 1.0, 5.0, 2.0]).unwrap(), vec![9.0, 5.0, 2.0, 1.0]);
    }

    #[test]
    fn sort_desc_equals_dense_permutation_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dense = perm_matrix(&argsort_desc(&s).unwrap()).to_dense();
        assert_eq!(dense.mul_vec(&s).unwrap(), sort_desc(&s).unwrap());
    }

    #[test]
    fn perm_matrix_examples() {
        assert_eq!(perm_matrix(&Permutation::identity(4)).to_dense(), Matrix::identity(4));
        let p = Permutation::from_one_based(&[1, 3, 4, 2]).unwrap();
        let dense = perm_matrix(&p).to_dense();
        let ones = [(0, 0), (1, 2), (2, 3), (3, 1)];
        for i in 0..4 {
            for j in 0..4 {
                let expected = if ones.contains(&(i, j)) { 1.0 } else { 0.0 };
                assert_eq!(dense[(i, j)], expected);
            }
        }
        assert!(PermutationMatrix::from_indices(&[0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
    }

    #[test]
    fn perm_matrix_times_index_vector_recovers_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..=10);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let p = Permutation::new(idx).unwrap();
            let one_to_n: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let recovered = perm_matrix(&p).to_dense().mul_vec(&one_to_n).unwrap();
            let expected: Vec<f64> = p.to_one_based().into_iter().map(|i| i as f64).collect();
            assert_eq!(recovered, expected);
        }
    }

    #[test]
    fn row_softmax_examples() {
        let m = Matrix::filled(3, 3, 2.5);
        let out = row_softmax(&m, tau(0.7)).unwrap();
        for &x in out.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let row = Matrix::from_rows(&[[-3.0, 0.0, -1.0]]).unwrap();
        let out = row_softmax(&row, tau(1.0)).unwrap();
        for (x, e) in out.row(0).iter().zip([0.0351, 0.7054, 0.2595]) {
            assert!((x - e).abs() < 1e-3, "{x} vs {e}");
        }
        assert!((out.row_sums()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_softmax_is_shift_invariant() {
        let a = Matrix::from_rows(&[[0.3, -1.2, 2.0], [5.0, 5.5, 4.0]]).unwrap();
        let mut b = a.clone();
        b.row_mut(0).iter_mut().for_each(|x| *x += 17.25);
        b.row_mut(1).iter_mut().for_each(|x| *x -= 3.5);
        let pa = row_softmax(&a, tau(0.9)).unwrap();
        let pb = row_softmax(&b, tau(0.9)).unwrap();
        assert!(pa.max_abs_diff(&pb) <= 1e-12);
    }

    #[test]
    fn soft_sort_reproduces_worked_weights() {
        let p = soft_sort(&[2.0, 5.0, 4.0], tau(1.0), SemiMetric::ABSOLUTE).unwrap();
        let expected = [[0.04, 0.70, 0.26], [0.09, 0.24, 0.67], [0.85, 0.04, 0.11]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.get(i, j) - expected[i][j]).abs() <= 0.01, "({i},{j}) = {}", p.get(i, j));
            }
        }
        assert_eq!(hard_project(&p).unwrap().to_one_based(), vec![2, 3, 1]);
    }

    #[test]
    fn singleton_is_one() {
        let one = Matrix::identity(1);
        assert_eq!(soft_sort(&[7.0], tau(1.0), SemiMetric::SQUARED).unwrap().as_matrix(), &one);
        assert_eq!(neural_sort(&[7.0], tau(1.0)).unwrap().as_matrix(), &one);
        let logits = neural_sort_logits(&[7.0]).unwrap();
        assert_eq!(hard_project(&logits).unwrap().as_slice(), &[0]);
    }

    #[test]
    fn small_temperature_approaches_hard_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let s = gapped_scores(&mut rng, 6, 0.1);
            let hard = perm_matrix(&argsort_desc(&s).unwrap()).to_dense();
            let soft = soft_sort(&s, tau(1e-3), SemiMetric::ABSOLUTE).unwrap();
            assert!(soft.as_matrix().max_abs_diff(&hard) <= 1e-6);
            let neural = neural_sort(&s, tau(1e-3)).unwrap();
            assert!(neural.as_matrix().max_abs_diff(&hard) <= 1e-6);
        }
    }

    #[test]
    fn neural_sort_logits_match_symbolic_four_by_four() {
        let [s1, s2, s3, s4] = [4.0, 3.0, 2.0, 1.0];
        let symbolic = [
            [0.0, s2 - s1, 3.0 * s3 - s1 - 2.0 * s2, 5.0 * s4 - s1 - 2.0 * s2 - 2.0 * s3],
            [s2 - s1, 0.0, s3 - s2, 3.0 * s4 - s2 - 2.0 * s3],
            [2.0 * s2 + s3 - 3.0 * s1, s3 - s2, 0.0, s4 - s3],
            [2.0 * s2 + 2.0 * s3 + s4 - 5.0 * s1, 2.0 * s3 + s4 - 3.0 * s2, s4 - s3, 0.0],
        ];
        let logits = neural_sort_logits(&[s1, s2, s3, s4]).unwrap();
        for i in 0..4 {
            let diag = logits[(i, i)];
            for j in 0..4 {
                assert!((logits[(i, j)] - diag - symbolic[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn neural_sort_logit_argmax_is_argsort() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let n = rng.random_range(1..=12);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let logits = neural_sort_logits(&s).unwrap();
            let expected = if n <= 6 { stable_desc_orderings(&s)[0].clone() } else { argsort_desc(&s).unwrap().into_vec() };
            assert_eq!(hard_project(&logits).unwrap().into_vec(), expected);
        }
    }

    #[test]
    fn large_logits_match_the_reused_buffer_path() {
        // Sizes on both sides of the streaming-store threshold, odd and even.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for n in [300, 723, 724, 801] {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let fresh = neural_sort_logits(&s).unwrap();
            let mut reused = Matrix::zeros(1, 1);
            neural_sort_logits_into(&s, &mut reused, &mut Vec::new());
            assert_eq!(fresh, reused, "n={n}");
        }
    }

    #[test]
    fn neural_sort_rows_are_gaussian_on_equally_spaced_scores() {
        let (a, b, n, t) = (1.0, 0.0, 8, 2.0);
        let s: Vec<f64> = (1..=n).map(|k| b - a * k as f64).collect();
        let p = neural_sort(&s, tau(t)).unwrap();
        for i in 0..n {
            let kernel: Vec<f64> = s.iter().map(|sj| (-(s[i] - sj).powi(2) / (a * t)).exp()).collect();
            let z: f64 = kernel.iter().sum();
            for j in 0..n {
                let expected = kernel[j] / z;
                assert!(((p.get(i, j) - expected) / expected).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn hard_project_examples() {
        assert_eq!(hard_project(&Matrix::identity(5)).unwrap(), Permutation::identity(5));
        let collide = Matrix::from_rows(&[[0.9, 0.1], [0.8, 0.2]]).unwrap();
        assert!(hard_project(&collide).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..1000 {
            let n = rng.random_range(1..=10);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expected = argsort_desc(&s).unwrap();
            for t in [0.1, 1.0, 100.0] {
                let p = soft_sort(&s, tau(t), SemiMetric::ABSOLUTE).unwrap();
                assert_eq!(hard_project(&p).unwrap(), expected);
            }
        }
    }

    #[test]
    fn urs_check_names_the_violated_property() {
        let bad_sum = RelaxedPermMatrix::from_matrix_unchecked(Matrix::from_rows(&[[0.5, 0.6], [0.0, 1.0]]).unwrap());
        assert_eq!(bad_sum.check_urs(1e-9).unwrap_err().property(), "row affinity");
        let negative = RelaxedPermMatrix::from_matrix_unchecked(Matrix::from_rows(&[[1.5, -0.5], [0.0, 1.0]]).unwrap());
        assert_eq!(negative.check_urs(1e-9).unwrap_err().property(), "non-negativity");
        let collide = RelaxedPermMatrix::from_matrix_unchecked(Matrix::from_rows(&[[0.6, 0.4], [0.7, 0.3]]).unwrap());
        assert_eq!(collide.check_urs(1e-9).unwrap_err().property(), "argmax permutation");
        assert!(RelaxedPermMatrix::new(Matrix::identity(3)).is_ok());
    }

    #[test]
    fn batch_matches_unbatched_and_rejects_ragged_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..100).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let batch = ScoreBatch::new(&rows).unwrap();
        let soft = soft_sort_batch(&batch, tau(0.5), SemiMetric::SQUARED).unwrap();
        let neural = neural_sort_batch(&batch, tau(0.5)).unwrap();
        for (b, row) in rows.iter().enumerate() {
            assert_eq!(soft[b], soft_sort(row, tau(0.5), SemiMetric::SQUARED).unwrap());
            assert_eq!(neural[b], neural_sort(row, tau(0.5)).unwrap());
        }

        let single = ScoreBatch::new(&rows[..1]).unwrap();
        assert_eq!(soft_sort_batch(&single, tau(0.5), SemiMetric::SQUARED).unwrap()[0], soft[0]);

        let mut swapped = rows.clone();
        swapped.swap(0, 7);
        let out = soft_sort_batch(&ScoreBatch::new(&swapped).unwrap(), tau(0.5), SemiMetric::SQUARED).unwrap();
        assert_eq!(out[0], soft[7]);
        assert_eq!(out[7], soft[0]);

        let ragged = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(ScoreBatch::new(&ragged).is_err());
    }

    fn finite_scores(max_n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..=max_n)
    }

    proptest! {
        #[test]
        fn soft_sort_is_urs_with_argsort_argmax(s in finite_scores(12), t in 0.05f64..50.0, p2 in any::<bool>()) {
            let d = if p2 { SemiMetric::SQUARED } else { SemiMetric::ABSOLUTE };
            let p = soft_sort(&s, tau(t), d).unwrap();
            prop_assert!(p.check_urs(1e-9).is_ok());
            prop_assert_eq!(hard_project(&p).unwrap(), argsort_desc(&s).unwrap());
        }

        #[test]
        fn equivariance_through_sorted_input(s in finite_scores(12), t in 0.1f64..10.0) {
            let pm = perm_matrix(&argsort_desc(&s).unwrap());
            let sorted = sort_desc(&s).unwrap();
            for d in [SemiMetric::ABSOLUTE, SemiMetric::SQUARED] {
                let lhs = soft_sort(&s, tau(t), d).unwrap();
                let rhs = pm.right_multiply(soft_sort(&sorted, tau(t), d).unwrap().as_matrix()).unwrap();
                prop_assert!(lhs.as_matrix().max_abs_diff(&rhs) <= 1e-12);
            }
        }

        #[test]
        fn first_row_is_softmax_of_scores(s in finite_scores(12), t in 0.1f64..10.0) {
            let p = soft_sort(&s, tau(t), SemiMetric::ABSOLUTE).unwrap();
            let sm = row_softmax(&Matrix::from_rows(&[s.clone()]).unwrap(), tau(t)).unwrap();
            let diff = p.row(0).iter().zip(sm.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-12);
        }

        #[test]
        fn absolute_metric_is_shift_invariant(s in finite_scores(12), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let a = soft_sort(&s, tau(1.0), SemiMetric::ABSOLUTE).unwrap();
            let b = soft_sort(&shifted, tau(1.0), SemiMetric::ABSOLUTE).unwrap();
            // Adding c can itself round the differences by ~|c| ulp.
            prop_assert!(a.as_matrix().max_abs_diff(b.as_matrix()) <= 1e-12);
        }
    }
}

