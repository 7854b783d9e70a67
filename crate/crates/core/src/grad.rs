//! Backward passes for the relaxed sorting operators.
//!
//! Both operators are `P = softmax_rows(L(s) / tau)` for a logit map `L`, so
//! every VJP starts from the softmax cotangent
//! `G[i, j] = P[i, j] (U[i, j] - <U[i, :], P[i, :]>)` and then pulls `G` back
//! through the logits:
//!
//! * SoftSort: `L[i, j] = -d(s[perm[i]] - s[j])`. `s` enters twice, directly
//!   in column `j` and through the sorted anchor `s[perm[i]]`. Locally `sort`
//!   is the fixed linear map given by `perm`, so the anchor term is scattered
//!   back to `perm[i]`.
//! * NeuralSort: `L[i, j] = (n - 1 - 2i) s[j] - sum_k |s[j] - s[k]|`.
//!
//! Both are differentiable only away from ties; tied input is rejected.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::ops::{
    argsort_desc_unchecked, check_scores, neural_sort_into, soft_sort_into, Permutation,
    RelaxedPermMatrix, SemiMetric, Temperature,
};
use crate::rng::{stream, RngSeed};
use crate::{math, ops};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Finite differences require the minimum score gap to be at least this
/// multiple of the step.
pub const FD_GAP_FACTOR: f64 = 10.0;

/// Gradient of a scalar loss with respect to each score.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradResult {
    pub d_s: Vec<f64>,
}

/// Which relaxation to apply.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    SoftSort(SemiMetric),
    NeuralSort,
}

impl Operator {
    pub fn name(&self) -> &'static str {
        match self {
            Operator::SoftSort(_) => "softsort",
            Operator::NeuralSort => "neuralsort",
        }
    }

    /// Semi-metric power for SoftSort, `None` for NeuralSort.
    pub fn metric_power(&self) -> Option<f64> {
        match self {
            Operator::SoftSort(d) => Some(d.power()),
            Operator::NeuralSort => None,
        }
    }

    pub fn forward(&self, s: &[f64], tau: Temperature) -> Result<RelaxedPermMatrix> {
        match *self {
            Operator::SoftSort(d) => ops::soft_sort(s, tau, d),
            Operator::NeuralSort => ops::neural_sort(s, tau),
        }
    }

    pub fn vjp(&self, s: &[f64], tau: Temperature, upstream: &Matrix) -> Result<GradResult> {
        let mut r = Relaxation::new(*self, tau);
        r.forward(s)?;
        let mut d_s = vec![0.0; s.len()];
        r.backward(upstream, &mut d_s)?;
        Ok(GradResult { d_s })
    }
}

/// Forward/backward evaluator that caches the forward pass and reuses its
/// buffers across calls of the same size.
#[derive(Clone, Debug)]
pub struct Relaxation {
    op: Operator,
    tau: f64,
    scores: Vec<f64>,
    perm: Option<Permutation>,
    output: Matrix,
    scratch: Vec<f64>,
}

impl Relaxation {
    pub fn new(op: Operator, tau: Temperature) -> Self {
        Self {
            op,
            tau: tau.get(),
            scores: Vec::new(),
            perm: None,
            output: Matrix::default(),
            scratch: Vec::new(),
        }
    }

    pub fn operator(&self) -> Operator {
        self.op
    }

    /// Evaluates the operator on `s` and caches what the backward pass needs.
    pub fn forward(&mut self, s: &[f64]) -> Result<&Matrix> {
        check_scores(s)?;
        self.scores.clear();
        self.scores.extend_from_slice(s);
        match self.op {
            Operator::SoftSort(d) => {
                let perm = argsort_desc_unchecked(s);
                soft_sort_into(s, &perm, self.tau, d, &mut self.output);
                self.perm = Some(perm);
            }
            Operator::NeuralSort => {
                neural_sort_into(s, self.tau, &mut self.output, &mut self.scratch);
                self.perm = None;
            }
        }
        Ok(&self.output)
    }

    /// Output of the last [`forward`](Self::forward) call.
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Writes `d loss / d s` into `grad` given `upstream = d loss / d P`.
    ///
    /// Fails with [`Error::TiedScores`] if the last forward input had a tie.
    pub fn backward(&self, upstream: &Matrix, grad: &mut [f64]) -> Result<()> {
        self.backward_impl(upstream, grad, false)
    }

    /// Like [`backward`](Self::backward), but evaluates the gradient formula
    /// at a tie instead of failing: the stable tie-break fixes the sort and
    /// the metric derivative at 0 is taken as 0. For `p = 2` this is the
    /// one-sided gradient.
    pub fn backward_at_ties(&self, upstream: &Matrix, grad: &mut [f64]) -> Result<()> {
        self.backward_impl(upstream, grad, true)
    }

    fn backward_impl(&self, upstream: &Matrix, grad: &mut [f64], allow_ties: bool) -> Result<()> {
        let n = self.scores.len();
        if n == 0 {
            return Err(invalid("backward called before forward"));
        }
        if upstream.rows() != n || upstream.cols() != n {
            return Err(invalid(alloc::format!(
                "upstream must be {n}x{n}, got {}x{}",
                upstream.rows(),
                upstream.cols()
            )));
        }
        if grad.len() != n {
            return Err(invalid(alloc::format!("gradient buffer has length {}, expected {n}", grad.len())));
        }
        grad.fill(0.0);
        match self.op {
            Operator::SoftSort(d) => {
                let perm = self.perm.as_ref().expect("softsort forward caches a permutation");
                if !allow_ties {
                    check_no_ties_sorted(&self.scores, perm)?;
                }
                let (s, p, u, t) = (&self.scores[..], &self.output, upstream, self.tau);
                // Dispatch once so the inner loop is specialized per metric.
                if d == SemiMetric::ABSOLUTE {
                    soft_sort_backward(s, perm, p, u, t, grad, math::sign);
                } else if d == SemiMetric::SQUARED {
                    soft_sort_backward(s, perm, p, u, t, grad, |x| 2.0 * x);
                } else {
                    soft_sort_backward(s, perm, p, u, t, grad, |x| d.derivative(x));
                }
            }
            Operator::NeuralSort => {
                neural_sort_backward(&self.scores, &self.output, upstream, self.tau, grad, allow_ties)?;
            }
        }
        Ok(())
    }
}

fn check_no_ties_sorted(s: &[f64], perm: &Permutation) -> Result<()> {
    for w in perm.as_slice().windows(2) {
        if s[w[0]] == s[w[1]] {
            return Err(Error::TiedScores { first: w[0].min(w[1]), second: w[0].max(w[1]) });
        }
    }
    Ok(())
}

/// Softmax cotangent for row `i`, before division by the temperature.
#[inline(always)]
fn row_dot(p: &[f64], u: &[f64]) -> f64 {
    p.iter().zip(u).map(|(a, b)| a * b).sum()
}

fn soft_sort_backward<F: Fn(f64) -> f64>(
    s: &[f64],
    perm: &Permutation,
    p_hat: &Matrix,
    upstream: &Matrix,
    tau: f64,
    grad: &mut [f64],
    d_prime: F,
) {
    let inv_tau = 1.0 / tau;
    for (i, &anchor_idx) in perm.as_slice().iter().enumerate() {
        let anchor = s[anchor_idx];
        let p = p_hat.row(i);
        let u = upstream.row(i);
        let dot = row_dot(p, u);
        let mut anchor_grad = 0.0;
        for (((g, &sj), &pj), &uj) in grad.iter_mut().zip(s).zip(p).zip(u) {
            // dL/ds_j = +d'(anchor - s_j) / tau; dL/d anchor is its negation.
            let h = pj * (uj - dot) * d_prime(anchor - sj) * inv_tau;
            *g += h;
            anchor_grad -= h;
        }
        grad[anchor_idx] += anchor_grad;
    }
}

fn neural_sort_backward(
    s: &[f64],
    p_hat: &Matrix,
    upstream: &Matrix,
    tau: f64,
    grad: &mut [f64],
    allow_ties: bool,
) -> Result<()> {
    let n = s.len();
    let inv_tau = 1.0 / tau;
    let mut col = vec![0.0; n];
    for i in 0..n {
        let scale = (n as f64) - 1.0 - 2.0 * (i as f64);
        let p = p_hat.row(i);
        let u = upstream.row(i);
        let dot = row_dot(p, u);
        for (((g, c), &pj), &uj) in grad.iter_mut().zip(col.iter_mut()).zip(p).zip(u) {
            let gl = pj * (uj - dot) * inv_tau;
            *g += scale * gl;
            *c += gl;
        }
    }
    // d/ds_k of -sum_j col_j sum_m |s_j - s_m| = -sum_m sign(s_k - s_m) (col_k + col_m)
    for k in 0..n {
        for m in (k + 1)..n {
            let diff = s[k] - s[m];
            if diff == 0.0 {
                if allow_ties {
                    continue;
                }
                return Err(Error::TiedScores { first: k, second: m });
            }
            let t = math::sign(diff) * (col[k] + col[m]);
            grad[k] -= t;
            grad[m] += t;
        }
    }
    Ok(())
}

/// VJP of [`soft_sort`](crate::soft_sort).
pub fn soft_sort_vjp(s: &[f64], tau: Temperature, d: SemiMetric, upstream: &Matrix) -> Result<GradResult> {
    Operator::SoftSort(d).vjp(s, tau, upstream)
}

/// VJP of [`neural_sort`](crate::neural_sort).
pub fn neural_sort_vjp(s: &[f64], tau: Temperature, upstream: &Matrix) -> Result<GradResult> {
    Operator::NeuralSort.vjp(s, tau, upstream)
}

/// Smallest distance between two entries of `s`; infinite for `n < 2`.
pub fn min_gap(s: &[f64]) -> f64 {
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h` for every `k`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid(alloc::format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe)?;
        probe[k] = x[k] - h;
        let minus = f(&probe)?;
        probe[k] = x[k];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference oracle for [`Operator::vjp`].
///
/// Requires `min_gap(s) >= 10 h` so no probe crosses a tie.
pub fn finite_diff_vjp(op: Operator, s: &[f64], tau: Temperature, upstream: &Matrix, h: f64) -> Result<GradResult> {
    check_scores(s)?;
    let n = s.len();
    if upstream.rows() != n || upstream.cols() != n {
        return Err(invalid(alloc::format!("upstream must be {n}x{n}")));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid(alloc::format!("finite-difference step must be > 0, got {h}")));
    }
    let gap = min_gap(s);
    let required = FD_GAP_FACTOR * h;
    if gap < required {
        return Err(Error::StepTooLarge { step: h, gap, required });
    }
    let mut probe = s.to_vec();
    let mut d_s = Vec::with_capacity(n);
    for k in 0..n {
        probe[k] = s[k] + h;
        let plus = op.forward(&probe, tau)?;
        probe[k] = s[k] - h;
        let minus = op.forward(&probe, tau)?;
        probe[k] = s[k];
        // Contract the difference, not the two values, to limit cancellation.
        let diff: f64 = plus
            .as_matrix()
            .as_slice()
            .iter()
            .zip(minus.as_matrix().as_slice())
            .zip(upstream.as_slice())
            .map(|((a, b), u)| u * (a - b))
            .sum();
        d_s.push(diff / (2.0 * h));
    }
    Ok(GradResult { d_s })
}

/// Normwise relative error `max|a - b| / max(|a|_inf, |b|_inf)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let abs = max_abs_error(analytic, numeric);
    let scale = analytic.iter().chain(numeric).map(|x| math::abs(*x)).fold(0.0, f64::max);
    if abs == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        abs / scale
    }
}

fn max_abs_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| math::abs(x - y)).fold(0.0, f64::max)
}

/// Draws `n` scores whose pairwise gaps are all at least `min_gap`, in random
/// order.
pub fn sample_gapped_scores<R: Rng + ?Sized>(rng: &mut R, n: usize, min_gap: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    let mut x = rng.random_range(-2.0..2.0);
    for _ in 0..n {
        v.push(x);
        x += min_gap + rng.random_range(0.0..0.5);
    }
    use rand::seq::SliceRandom;
    v.shuffle(rng);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub operator: Operator,
    pub n: usize,
    pub trials: usize,
    pub tolerance: f64,
    pub seed: RngSeed,
    pub tau: f64,
    pub step: f64,
    pub min_gap: f64,
}

impl GradCheckConfig {
    pub fn new(operator: Operator, n: usize, trials: usize, tolerance: f64, seed: RngSeed) -> Self {
        Self { operator, n, trials, tolerance, seed, tau: 1.0, step: DEFAULT_FD_STEP, min_gap: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

/// Aggregate of a [`gradcheck`] run. `pass` holds iff
/// `max_rel_err <= tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub operator: String,
    pub metric_power: Option<f64>,
    pub n: usize,
    pub trials: usize,
    pub tau: f64,
    pub step: f64,
    pub tolerance: f64,
    pub seed: RngSeed,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Trial with the largest relative error.
    pub worst_trial: usize,
    /// Coordinate breakdown of the worst trial.
    pub per_coordinate: Vec<CoordinateError>,
    pub pass: bool,
}

/// Compares analytic VJPs against central differences on `trials` random
/// gapped score vectors and random upstreams.
pub fn gradcheck(op: Operator, n: usize, trials: usize, tol: f64, seed: RngSeed) -> Result<GradCheckReport> {
    gradcheck_with(&GradCheckConfig::new(op, n, trials, tol, seed))
}

pub fn gradcheck_with(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.trials == 0 {
        return Err(invalid("gradcheck needs at least one trial"));
    }
    if cfg.n == 0 {
        return Err(invalid("gradcheck needs n >= 1"));
    }
    let tau = Temperature::new(cfg.tau)?;
    let mut max_abs = 0.0;
    let mut max_rel = 0.0;
    let mut worst_trial = 0;
    let mut per_coordinate = Vec::new();
    for trial in 0..cfg.trials {
        // One stream per trial, so a trial's inputs do not depend on how many
        // trials ran before it.
        let mut rng = stream(cfg.seed, trial as u64);
        let s = sample_gapped_scores(&mut rng, cfg.n, cfg.min_gap);
        let upstream_data = (0..cfg.n * cfg.n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream = Matrix::from_vec(cfg.n, cfg.n, upstream_data)?;
        let analytic = cfg.operator.vjp(&s, tau, &upstream)?.d_s;
        let numeric = finite_diff_vjp(cfg.operator, &s, tau, &upstream, cfg.step)?.d_s;
        let abs = max_abs_error(&analytic, &numeric);
        let rel = relative_error(&analytic, &numeric);
        if abs > max_abs {
            max_abs = abs;
        }
        if trial == 0 || rel > max_rel {
            max_rel = rel;
            worst_trial = trial;
            let scale = analytic.iter().chain(&numeric).map(|x| math::abs(*x)).fold(0.0, f64::max);
            per_coordinate = analytic
                .iter()
                .zip(&numeric)
                .enumerate()
                .map(|(index, (&a, &f))| {
                    let abs_err = math::abs(a - f);
                    let rel_err = if abs_err == 0.0 { 0.0 } else { abs_err / scale };
                    CoordinateError { index, analytic: a, numeric: f, abs_err, rel_err }
                })
                .collect();
        }
    }
    Ok(GradCheckReport {
        operator: cfg.operator.name().into(),
        metric_power: cfg.operator.metric_power(),
        n: cfg.n,
        trials: cfg.trials,
        tau: cfg.tau,
        step: cfg.step,
        tolerance: cfg.tolerance,
        seed: cfg.seed,
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst_trial,
        per_coordinate,
        pass: max_rel <= cfg.tolerance,
    })
}
