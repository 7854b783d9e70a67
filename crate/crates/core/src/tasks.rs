//! Training tasks that drive the relaxed operators end to end.
//!
//! * [`SortYourself`]: each row of a parameter matrix `θ` is pushed, through
//!   a relaxed sort of its min-max scaled values, towards decreasing order.
//! * [`run_learn_to_sort`]: a scalar scorer learns to rank i.i.d. numbers
//!   from ground-truth permutations alone.
//!
//! Both are pure computations; wall-clock timing lives with the caller.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grad::{Operator, Relaxation};
use crate::loss::{diag_cross_entropy, diag_cross_entropy_grad, perm_cross_entropy, perm_cross_entropy_grad};
use crate::math;
use crate::matrix::Matrix;
use crate::metrics::{matching_positions, spearman};
use crate::ops::{argsort_desc, perm_matrix, SemiMetric, Temperature};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{stream, RngSeed};

/// Scales `theta` to `[0, 1]` by its min and max. A constant row maps to 0.5.
pub fn min_max_scale(theta: &[f64], out: &mut [f64]) {
    let (lo, hi) = bounds(theta);
    let range = hi - lo;
    if range == 0.0 {
        out.fill(0.5);
        return;
    }
    for (o, t) in out.iter_mut().zip(theta) {
        *o = (t - lo) / range;
    }
}

/// Indices of the first minimum and first maximum, and their values.
fn arg_bounds(v: &[f64]) -> (usize, usize) {
    let (mut imin, mut imax) = (0, 0);
    for (i, &x) in v.iter().enumerate() {
        if x < v[imin] {
            imin = i;
        }
        if x > v[imax] {
            imax = i;
        }
    }
    (imin, imax)
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let (imin, imax) = arg_bounds(v);
    (v[imin], v[imax])
}

/// Backward pass of [`min_max_scale`]: writes `d loss / d theta` given the
/// gradient `g_x` on the scaled values `x`.
pub fn min_max_scale_backward(theta: &[f64], x: &[f64], g_x: &[f64], g_theta: &mut [f64]) {
    let (imin, imax) = arg_bounds(theta);
    let range = theta[imax] - theta[imin];
    if range == 0.0 {
        g_theta.fill(0.0);
        return;
    }
    // x = (theta - m) / R, R = M - m:
    //   dx_j/dtheta_j = 1/R, dx_j/dm = (x_j - 1)/R, dx_j/dM = -x_j/R.
    let (mut d_min, mut d_max) = (0.0, 0.0);
    for ((gt, &gx), &xj) in g_theta.iter_mut().zip(g_x).zip(x) {
        *gt = gx / range;
        d_min += gx * (xj - 1.0);
        d_max -= gx * xj;
    }
    g_theta[imin] += d_min / range;
    g_theta[imax] += d_max / range;
}

/// How the backward pass treats the per-row min-max scaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleGradient {
    /// Min and max are constants of each step: `g_theta = g_x / (max - min)`.
    #[default]
    Frozen,
    /// Differentiate through the min and max as well.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaInit {
    /// I.i.d. uniform in `[-1, 1]`.
    #[default]
    Uniform,
    /// The uniform draw, with each row sorted increasing (the reverse of the target).
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SortYourselfConfig {
    pub n: usize,
    pub batch: usize,
    pub epochs: usize,
    pub operator: Operator,
    pub tau: f64,
    pub optimizer: OptimizerConfig,
    pub l2_coeff: f64,
    pub scale_gradient: ScaleGradient,
    pub init: ThetaInit,
    pub seed: RngSeed,
}

impl SortYourselfConfig {
    /// Batch 20, 100 epochs, momentum optimizer (lr 10, momentum 0.5), L2
    /// coefficient 1/200. Temperature 0.03 with `p = 2` for SoftSort and 100
    /// for NeuralSort.
    pub fn paper(operator_name: PaperOperator, n: usize, seed: RngSeed) -> Self {
        let (operator, tau) = match operator_name {
            PaperOperator::SoftSort => (Operator::SoftSort(SemiMetric::SQUARED), 0.03),
            PaperOperator::NeuralSort => (Operator::NeuralSort, 100.0),
        };
        Self {
            n,
            batch: 20,
            epochs: 100,
            operator,
            tau,
            optimizer: OptimizerConfig::sgd_momentum(10.0, 0.5),
            l2_coeff: 1.0 / 200.0,
            scale_gradient: ScaleGradient::Frozen,
            init: ThetaInit::Uniform,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid(alloc::format!("n must be >= 2, got {}", self.n)));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be >= 1"));
        }
        if !(self.l2_coeff.is_finite() && self.l2_coeff >= 0.0) {
            return Err(invalid(alloc::format!("l2 coefficient must be >= 0, got {}", self.l2_coeff)));
        }
        Temperature::new(self.tau)?;
        self.optimizer.validate()
    }
}

/// Operator choices with published sort-yourself hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaperOperator {
    SoftSort,
    NeuralSort,
}

/// Decreasing target used for Spearman scoring: `[n-1, ..., 1, 0]`.
pub fn decreasing_target(n: usize) -> Vec<f64> {
    (0..n).rev().map(|i| i as f64).collect()
}

/// Stateful sort-yourself trainer; one [`step`](Self::step) is one epoch.
#[derive(Clone, Debug)]
pub struct SortYourself {
    cfg: SortYourselfConfig,
    theta: Matrix,
    grad: Matrix,
    optimizer: Optimizer,
    relax: Relaxation,
    scaled: Vec<f64>,
    g_scaled: Vec<f64>,
    upstream: Matrix,
    epoch: usize,
}

impl SortYourself {
    pub fn new(cfg: SortYourselfConfig) -> Result<Self> {
        cfg.validate()?;
        let (b, n) = (cfg.batch, cfg.n);
        let mut rng = stream(cfg.seed, 0);
        let mut theta = Matrix::zeros(b, n);
        for v in theta.as_mut_slice() {
            *v = rng.random_range(-1.0..=1.0);
        }
        if cfg.init == ThetaInit::Reversed {
            for r in 0..b {
                theta.row_mut(r).sort_by(f64::total_cmp);
            }
        }
        let optimizer = Optimizer::new(cfg.optimizer, b * n)?;
        let relax = Relaxation::new(cfg.operator, Temperature::new(cfg.tau)?);
        Ok(Self {
            theta,
            grad: Matrix::zeros(b, n),
            optimizer,
            relax,
            scaled: vec![0.0; n],
            g_scaled: vec![0.0; n],
            upstream: Matrix::zeros(n, n),
            epoch: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &SortYourselfConfig {
        &self.cfg
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Loss and its gradient at the current `θ`, written into the internal
    /// gradient buffer.
    fn loss_and_grad(&mut self) -> Result<f64> {
        let (b, n) = (self.cfg.batch, self.cfg.n);
        let mut loss = 0.0;
        for r in 0..b {
            let theta_row = self.theta.row(r);
            min_max_scale(theta_row, &mut self.scaled);
            let p_hat = self.relax.forward(&self.scaled)?;
            loss += diag_cross_entropy(p_hat)? / b as f64;

            // Only the diagonal of the upstream is non-zero.
            let dg = diag_cross_entropy_grad(p_hat)?;
            self.upstream.fill(0.0);
            for i in 0..n {
                self.upstream[(i, i)] = dg[(i, i)] / b as f64;
            }
            // Misordered neighbours can collapse onto the same value, so ties
            // take the one-sided gradient rather than ending the run.
            self.relax.backward_at_ties(&self.upstream, &mut self.g_scaled)?;
            let g_theta = self.grad.row_mut(r);
            match self.cfg.scale_gradient {
                ScaleGradient::Full => min_max_scale_backward(theta_row, &self.scaled, &self.g_scaled, g_theta),
                ScaleGradient::Frozen => {
                    let (lo, hi) = bounds(theta_row);
                    let inv = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
                    for (gt, gx) in g_theta.iter_mut().zip(&self.g_scaled) {
                        *gt = gx * inv;
                    }
                }
            }
        }
        let l2 = self.cfg.l2_coeff;
        let mut norm2 = 0.0;
        for (g, t) in self.grad.as_mut_slice().iter_mut().zip(self.theta.as_slice()) {
            norm2 += t * t;
            *g += 2.0 * l2 * t;
        }
        Ok(loss + l2 * norm2)
    }

    /// Runs one epoch (one full-batch update). Returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let loss = self.loss_and_grad()?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch, reason: alloc::format!("loss is {loss}") });
        }
        self.optimizer.step(self.theta.as_mut_slice(), self.grad.as_slice()).map_err(|_| Error::Diverged {
            epoch: self.epoch,
            reason: String::from("non-finite gradient"),
        })?;
        self.epoch += 1;
        Ok(loss)
    }

    /// Current loss without updating.
    pub fn loss(&mut self) -> Result<f64> {
        self.loss_and_grad()
    }

    /// Spearman correlation of each row against [`decreasing_target`].
    pub fn spearman_per_row(&self) -> Result<Vec<f64>> {
        let target = decreasing_target(self.cfg.n);
        self.theta.row_iter().map(|row| spearman(row, &target)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnToSortConfig {
    pub n: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub batch: usize,
    pub operator: Operator,
    pub tau: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: RngSeed,
}

impl Default for LearnToSortConfig {
    fn default() -> Self {
        Self {
            n: 5,
            train_size: 2000,
            test_size: 1000,
            epochs: 50,
            batch: 20,
            operator: Operator::SoftSort(SemiMetric::ABSOLUTE),
            tau: 1.0,
            learning_rate: 0.005,
            hidden: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LearnToSortReport {
    pub n: usize,
    /// Fraction of test sequences whose whole permutation is recovered.
    pub exact_perm_acc: f64,
    /// Fraction of test positions placed correctly.
    pub elementwise_acc: f64,
    pub seed: RngSeed,
    pub config: LearnToSortConfig,
}

/// Scalar scorer `x -> w2 · tanh(w1 x + b1) + b2`, applied per element.
#[derive(Clone, Debug, PartialEq)]
pub struct Scorer {
    hidden: usize,
    /// `[w1; b1; w2; b2]`
    params: Vec<f64>,
}

impl Scorer {
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut params = vec![0.0; 3 * hidden + 1];
        for (i, p) in params.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            // Unit-scale input weights and biases, 1/sqrt(h) output weights.
            *p = if i < 2 * hidden { z } else if i < 3 * hidden { z / math::sqrt(hidden as f64) } else { 0.0 };
        }
        Self { hidden, params }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn score(&self, x: f64) -> f64 {
        let h = self.hidden;
        let (w1, rest) = self.params.split_at(h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        let mut out = b2[0];
        for k in 0..h {
            out += w2[k] * math::tanh(w1[k] * x + b1[k]);
        }
        out
    }

    /// Adds `g * d score(x) / d params` into `grad`.
    fn accumulate_grad(&self, x: f64, g: f64, grad: &mut [f64]) {
        let h = self.hidden;
        for k in 0..h {
            let a = math::tanh(self.params[k] * x + self.params[h + k]);
            let w2 = self.params[2 * h + k];
            let d_pre = g * w2 * (1.0 - a * a);
            grad[k] += d_pre * x;
            grad[h + k] += d_pre;
            grad[2 * h + k] += g * a;
        }
        grad[3 * h] += g;
    }
}

fn sample_sequences<R: Rng + ?Sized>(rng: &mut R, count: usize, n: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect()
}

/// Trains a [`Scorer`] with [`perm_cross_entropy`] on relaxed outputs and
/// evaluates hard argsort of the learned scores on a fresh test set.
pub fn run_learn_to_sort(cfg: &LearnToSortConfig) -> Result<(Scorer, LearnToSortReport)> {
    if cfg.n < 2 || cfg.train_size == 0 || cfg.test_size == 0 || cfg.batch == 0 || cfg.hidden == 0 {
        return Err(invalid("learn-to-sort needs n >= 2 and non-zero sizes"));
    }
    let tau = Temperature::new(cfg.tau)?;
    let mut rng = stream(cfg.seed, 0);
    let train = sample_sequences(&mut rng, cfg.train_size, cfg.n);
    let test = sample_sequences(&mut rng, cfg.test_size, cfg.n);
    let train_truth = train.iter().map(|x| argsort_desc(x).map(|p| perm_matrix(&p))).collect::<Result<Vec<_>>>()?;
    let mut scorer = Scorer::new(cfg.hidden, &mut stream(cfg.seed, 1));
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.learning_rate), scorer.params.len())?;
    let mut relax = Relaxation::new(cfg.operator, tau);
    let mut order: Vec<usize> = (0..cfg.train_size).collect();
    let mut shuffle_rng = stream(cfg.seed, 2);
    let mut grad = vec![0.0; scorer.params.len()];
    let mut scores = vec![0.0; cfg.n];
    let mut d_scores = vec![0.0; cfg.n];

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            grad.fill(0.0);
            for &idx in chunk {
                let x = &train[idx];
                for (s, &xi) in scores.iter_mut().zip(x) {
                    *s = scorer.score(xi);
                }
                let diverged = |reason: String| Error::Diverged { epoch, reason };
                let p_hat = relax.forward(&scores).map_err(|e| diverged(alloc::format!("{e}")))?;
                let loss = perm_cross_entropy(p_hat, &train_truth[idx])?;
                if !loss.is_finite() {
                    return Err(diverged(alloc::format!("loss is {loss}")));
                }
                let upstream = perm_cross_entropy_grad(p_hat, &train_truth[idx])?;
                if relax.backward(&upstream, &mut d_scores).is_err() {
                    // Tied scores: this example contributes no gradient.
                    continue;
                }
                for (&xi, &g) in x.iter().zip(&d_scores) {
                    scorer.accumulate_grad(xi, g / chunk.len() as f64, &mut grad);
                }
            }
            opt.step(&mut scorer.params, &grad)
                .map_err(|_| Error::Diverged { epoch, reason: String::from("non-finite gradient") })?;
        }
    }

    let (mut exact, mut matched) = (0usize, 0usize);
    for x in &test {
        let s: Vec<f64> = x.iter().map(|&xi| scorer.score(xi)).collect();
        let pred = argsort_desc(&s)?;
        let truth = argsort_desc(x)?;
        let m = matching_positions(&pred, &truth);
        matched += m;
        if m == cfg.n {
            exact += 1;
        }
    }
    let report = LearnToSortReport {
        n: cfg.n,
        exact_perm_acc: exact as f64 / cfg.test_size as f64,
        elementwise_acc: matched as f64 / (cfg.test_size * cfg.n) as f64,
        seed: cfg.seed,
        config: cfg.clone(),
    };
    Ok((scorer, report))
}
