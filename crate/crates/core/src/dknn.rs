//! Differentiable k-nearest-neighbour classification.
//!
//! For a query `x̂` with label `ŷ` and candidates `X`, the scores are
//! `s_i = -|Φ(x_i) - Φ(x̂)|^2` and the probability of `ŷ` is the mean over the
//! first `k` rows of `SoftSort(s) · 1[Y = ŷ]`. With `k = 1`, `tau = 2`,
//! `p = 1` and unit-norm embeddings this reduces to a softmax over
//! `Φ(x̂)·Φ(x_i)`, the Matching Networks attention rule.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grad::{Operator, Relaxation};
use crate::loss::LOG_FLOOR;
use crate::math;
use crate::matrix::Matrix;
use crate::ops::{soft_sort, SemiMetric, Temperature};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{stream, RngSeed};

/// One classification problem: a labelled query and `n` labelled candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query: Vec<f64>,
    pub query_label: usize,
    /// `n x dim`, one candidate per row.
    pub candidates: Matrix,
    pub labels: Vec<usize>,
}

impl Episode {
    pub fn new(query: Vec<f64>, query_label: usize, candidates: Matrix, labels: Vec<usize>) -> Result<Self> {
        if candidates.rows() == 0 {
            return Err(invalid("episode needs at least one candidate"));
        }
        if candidates.cols() != query.len() {
            return Err(invalid(alloc::format!(
                "query has dimension {}, candidates have {}",
                query.len(),
                candidates.cols()
            )));
        }
        if labels.len() != candidates.rows() {
            return Err(invalid(alloc::format!("{} labels for {} candidates", labels.len(), candidates.rows())));
        }
        Ok(Self { query, query_label, candidates, labels })
    }

    pub fn n(&self) -> usize {
        self.candidates.rows()
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingMap {
    Identity,
    /// `x -> W x` with `W` of shape `edim x dim`.
    Linear(Matrix),
}

/// The map `Φ`, optionally followed by projection onto the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    map: EmbeddingMap,
    trainable: bool,
    unit_norm: bool,
}

struct Embedded {
    x: Vec<f64>,
    e: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn identity() -> Self {
        Self { map: EmbeddingMap::Identity, trainable: false, unit_norm: false }
    }

    pub fn fixed_linear(weights: Matrix) -> Self {
        Self { map: EmbeddingMap::Linear(weights), trainable: false, unit_norm: false }
    }

    pub fn trainable_linear(weights: Matrix) -> Self {
        Self { map: EmbeddingMap::Linear(weights), trainable: true, unit_norm: false }
    }

    pub fn with_unit_norm(mut self, unit_norm: bool) -> Self {
        self.unit_norm = unit_norm;
        self
    }

    pub fn map(&self) -> &EmbeddingMap {
        &self.map
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    pub fn weights(&self) -> Option<&Matrix> {
        match &self.map {
            EmbeddingMap::Identity => None,
            EmbeddingMap::Linear(w) => Some(w),
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Matrix> {
        match &mut self.map {
            EmbeddingMap::Identity => None,
            EmbeddingMap::Linear(w) => Some(w),
        }
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_full(x)?.e)
    }

    fn embed_full(&self, x: &[f64]) -> Result<Embedded> {
        let mut e = match &self.map {
            EmbeddingMap::Identity => x.to_vec(),
            EmbeddingMap::Linear(w) => w.mul_vec(x)?,
        };
        let mut norm = 1.0;
        if self.unit_norm {
            norm = math::sqrt(e.iter().map(|v| v * v).sum());
            if norm == 0.0 || !norm.is_finite() {
                return Err(invalid("cannot normalize a zero or non-finite embedding"));
            }
            e.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Embedded { x: x.to_vec(), e, norm })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `s_i = -|Φ(x_i) - Φ(x̂)|^2`.
pub fn neg_sq_distances(ep: &Episode, phi: &Embedding) -> Result<Vec<f64>> {
    let q = phi.embed(&ep.query)?;
    ep.candidates.row_iter().map(|x| Ok(-sq_dist(&phi.embed(x)?, &q))).collect()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(invalid(alloc::format!("k must lie in 1..={n}, got {k}")));
    }
    Ok(())
}

/// Probability the relaxed kNN head assigns to `label`.
pub fn dknn_prob_for_label(
    ep: &Episode,
    phi: &Embedding,
    k: usize,
    tau: Temperature,
    d: SemiMetric,
    label: usize,
) -> Result<f64> {
    check_k(k, ep.n())?;
    let s = neg_sq_distances(ep, phi)?;
    let p = soft_sort(&s, tau, d)?;
    Ok(top_k_mass(p.as_matrix(), &ep.labels, label, k))
}

/// Probability of the query's own label.
pub fn dknn_prob(ep: &Episode, phi: &Embedding, k: usize, tau: Temperature, d: SemiMetric) -> Result<f64> {
    dknn_prob_for_label(ep, phi, k, tau, d, ep.query_label)
}

fn top_k_mass(p: &Matrix, labels: &[usize], label: usize, k: usize) -> f64 {
    let mut mass = 0.0;
    for r in 0..k {
        mass += p.row(r).iter().zip(labels).filter(|(_, &y)| y == label).map(|(w, _)| w).sum::<f64>();
    }
    mass / k as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnLoss {
    /// `-P(ŷ)`
    #[default]
    NegProb,
    /// `-log P(ŷ)`
    CrossEntropy,
}

/// `-P(ŷ | x̂, X, Y)`, always in `[-1, 0]`.
pub fn dknn_loss(ep: &Episode, phi: &Embedding, k: usize, tau: Temperature, d: SemiMetric) -> Result<f64> {
    Ok(-dknn_prob(ep, phi, k, tau, d)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnLossGrad {
    pub loss: f64,
    pub prob: f64,
    /// Gradient with respect to the linear weights; `None` for the identity map.
    pub d_weights: Option<Matrix>,
}

pub fn dknn_loss_and_grad(
    ep: &Episode,
    phi: &Embedding,
    k: usize,
    tau: Temperature,
    d: SemiMetric,
    kind: KnnLoss,
) -> Result<KnnLossGrad> {
    let n = ep.n();
    check_k(k, n)?;
    let q = phi.embed_full(&ep.query)?;
    let cands = ep.candidates.row_iter().map(|x| phi.embed_full(x)).collect::<Result<Vec<_>>>()?;
    let s: Vec<f64> = cands.iter().map(|c| -sq_dist(&c.e, &q.e)).collect();

    let mut relax = Relaxation::new(Operator::SoftSort(d), tau);
    let prob = top_k_mass(relax.forward(&s)?, &ep.labels, ep.query_label, k);
    let (loss, d_prob) = match kind {
        KnnLoss::NegProb => (-prob, -1.0),
        KnnLoss::CrossEntropy => {
            let clamped = prob.max(LOG_FLOOR);
            (-math::ln(clamped), if prob >= LOG_FLOOR { -1.0 / prob } else { 0.0 })
        }
    };
    let Some(w) = phi.weights() else {
        return Ok(KnnLossGrad { loss, prob, d_weights: None });
    };

    let mut upstream = Matrix::zeros(n, n);
    let per_row = d_prob / k as f64;
    for r in 0..k {
        for (u, &y) in upstream.row_mut(r).iter_mut().zip(&ep.labels) {
            if y == ep.query_label {
                *u = per_row;
            }
        }
    }
    let mut d_s = vec![0.0; n];
    relax.backward(&upstream, &mut d_s)?;

    let edim = q.e.len();
    let mut d_query = vec![0.0; edim];
    let mut d_w = Matrix::zeros(w.rows(), w.cols());
    let mut d_e = vec![0.0; edim];
    for (c, &g) in cands.iter().zip(&d_s) {
        // s = -|e - q|^2: ds/de = -2 (e - q), ds/dq = 2 (e - q).
        for ((de, dq), (e, qv)) in d_e.iter_mut().zip(d_query.iter_mut()).zip(c.e.iter().zip(&q.e)) {
            let diff = e - qv;
            *de = -2.0 * g * diff;
            *dq += 2.0 * g * diff;
        }
        accumulate_linear_grad(phi.unit_norm, c, &mut d_e, &mut d_w);
    }
    accumulate_linear_grad(phi.unit_norm, &q, &mut d_query, &mut d_w);
    Ok(KnnLossGrad { loss, prob, d_weights: Some(d_w) })
}

/// Pulls `d_e` back through the optional normalization and adds `d_y x^T`.
fn accumulate_linear_grad(unit_norm: bool, v: &Embedded, d_e: &mut [f64], d_w: &mut Matrix) {
    if unit_norm {
        // e = y / |y|: dy = (de - e <e, de>) / |y|
        let proj: f64 = v.e.iter().zip(d_e.iter()).map(|(a, b)| a * b).sum();
        for (g, e) in d_e.iter_mut().zip(&v.e) {
            *g = (*g - e * proj) / v.norm;
        }
    }
    for (r, &gy) in d_e.iter().enumerate() {
        for (dw, x) in d_w.row_mut(r).iter_mut().zip(&v.x) {
            *dw += gy * x;
        }
    }
}

/// Isotropic Gaussian classes with equally spaced centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Distance between neighbouring centres, in units of `sigma`.
    pub separation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { classes: 3, dim: 2, sigma: 1.0, separation: 5.0, train_per_class: 100, test_per_class: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobData {
    pub centers: Matrix,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid(alloc::format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim == 0 {
            return Err(invalid("dimension must be >= 1"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) || !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(invalid("sigma and separation must be finite and > 0"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(invalid("each class needs train and test points"));
        }
        Ok(())
    }

    /// Centres on a line (1-D) or on a circle in the first two coordinates,
    /// with neighbouring centres exactly `separation * sigma` apart.
    pub fn centers(&self) -> Matrix {
        let spacing = self.separation * self.sigma;
        let mut c = Matrix::zeros(self.classes, self.dim);
        let tau = 2.0 * core::f64::consts::PI;
        let radius = spacing / (2.0 * math::sin(core::f64::consts::PI / self.classes as f64));
        for k in 0..self.classes {
            let row = c.row_mut(k);
            if self.dim == 1 {
                row[0] = k as f64 * spacing;
            } else {
                let a = tau * k as f64 / self.classes as f64;
                row[0] = radius * math::cos(a);
                row[1] = radius * math::sin(a);
            }
        }
        c
    }
}

pub fn make_blobs(spec: &BlobSpec, seed: RngSeed) -> Result<BlobData> {
    spec.validate()?;
    let centers = spec.centers();
    let mut rng = stream(seed, 0);
    let mut draw = |per_class: usize| {
        let mut x = Matrix::zeros(spec.classes * per_class, spec.dim);
        let mut y = Vec::with_capacity(spec.classes * per_class);
        for i in 0..spec.classes * per_class {
            let class = i % spec.classes;
            for (v, c) in x.row_mut(i).iter_mut().zip(centers.row(class)) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = c + spec.sigma * z;
            }
            y.push(class);
        }
        (x, y)
    };
    let (train_x, train_y) = draw(spec.train_per_class);
    let (test_x, test_y) = draw(spec.test_per_class);
    Ok(BlobData { centers, train_x, train_y, test_x, test_y })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DknnConfig {
    pub blobs: BlobSpec,
    pub k: usize,
    pub tau: f64,
    pub p: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub episodes_per_batch: usize,
    pub candidates: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: KnnLoss,
    pub unit_norm: bool,
    pub seed: RngSeed,
}

impl Default for DknnConfig {
    fn default() -> Self {
        Self {
            blobs: BlobSpec::default(),
            k: 3,
            tau: 16.0,
            p: 1.0,
            epochs: 50,
            batches_per_epoch: 5,
            episodes_per_batch: 100,
            candidates: 100,
            learning_rate: 1e-3,
            momentum: 0.9,
            loss: KnnLoss::NegProb,
            unit_norm: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DknnReport {
    pub config: DknnConfig,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Hard-kNN test accuracy of the initial embedding.
    pub initial_test_accuracy: f64,
    pub test_accuracy: f64,
    pub weights: Vec<Vec<f64>>,
}

/// Accuracy of majority-vote hard kNN on `test` against the embedded
/// `reference` set. Vote ties go to the class of the nearest tied neighbour.
pub fn hard_knn_accuracy(
    phi: &Embedding,
    k: usize,
    reference: (&Matrix, &[usize]),
    test: (&Matrix, &[usize]),
) -> Result<f64> {
    let (ref_x, ref_y) = reference;
    let (test_x, test_y) = test;
    check_k(k, ref_x.rows())?;
    if test_x.rows() == 0 {
        return Err(invalid("empty test set"));
    }
    let ref_e = ref_x.row_iter().map(|x| phi.embed(x)).collect::<Result<Vec<_>>>()?;
    let classes = ref_y.iter().chain(test_y).copied().max().unwrap_or(0) + 1;
    let mut correct = 0;
    let mut idx: Vec<usize> = (0..ref_e.len()).collect();
    let mut dist = vec![0.0; ref_e.len()];
    for (x, &y) in test_x.row_iter().zip(test_y) {
        let e = phi.embed(x)?;
        for (dv, r) in dist.iter_mut().zip(&ref_e) {
            *dv = sq_dist(&e, r);
        }
        idx.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
        let mut votes = vec![0usize; classes];
        for &i in &idx[..k] {
            votes[ref_y[i]] += 1;
        }
        let top = votes.iter().copied().max().unwrap_or(0);
        let pred = idx[..k].iter().map(|&i| ref_y[i]).find(|&c| votes[c] == top).expect("k >= 1");
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_x.rows() as f64)
}

/// Trains an identity-initialised linear `Φ` on episodes drawn from the
/// training blobs, then scores hard kNN on the test blobs.
pub fn train_dknn(cfg: &DknnConfig) -> Result<(Embedding, DknnReport)> {
    let data = make_blobs(&cfg.blobs, cfg.seed)?;
    let tau = Temperature::new(cfg.tau)?;
    let d = SemiMetric::new(cfg.p)?;
    let n_train = data.train_x.rows();
    if cfg.candidates == 0 || cfg.candidates + 1 > n_train {
        return Err(invalid(alloc::format!(
            "candidates must lie in 1..={}, got {}",
            n_train - 1,
            cfg.candidates
        )));
    }
    check_k(cfg.k, cfg.candidates)?;
    if cfg.batches_per_epoch == 0 || cfg.episodes_per_batch == 0 {
        return Err(invalid("batches_per_epoch and episodes_per_batch must be >= 1"));
    }
    let dim = cfg.blobs.dim;
    let mut phi = Embedding::trainable_linear(Matrix::identity(dim)).with_unit_norm(cfg.unit_norm);
    let mut opt = Optimizer::new(OptimizerConfig::sgd_momentum(cfg.learning_rate, cfg.momentum), dim * dim)?;
    let reference = (&data.train_x, &data.train_y[..]);
    let test = (&data.test_x, &data.test_y[..]);
    let initial_test_accuracy = hard_knn_accuracy(&phi, cfg.k, reference, test)?;

    let mut rng = stream(cfg.seed, 1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad = Matrix::zeros(dim, dim);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            grad.fill(0.0);
            for _ in 0..cfg.episodes_per_batch {
                let ep = sample_episode(&mut rng, &data, cfg.candidates)?;
                let out = dknn_loss_and_grad(&ep, &phi, cfg.k, tau, d, cfg.loss).map_err(|e| Error::Diverged {
                    epoch,
                    reason: alloc::format!("{e}"),
                })?;
                if !out.loss.is_finite() {
                    return Err(Error::Diverged { epoch, reason: String::from("non-finite episode loss") });
                }
                epoch_loss += out.loss;
                let dw = out.d_weights.expect("linear embedding has weights");
                for (g, v) in grad.as_mut_slice().iter_mut().zip(dw.as_slice()) {
                    *g += v / cfg.episodes_per_batch as f64;
                }
            }
            let w = phi.weights_mut().expect("linear embedding has weights");
            opt.step(w.as_mut_slice(), grad.as_slice()).map_err(|_| Error::Diverged {
                epoch,
                reason: String::from("non-finite gradient"),
            })?;
        }
        epoch_losses.push(epoch_loss / (cfg.batches_per_epoch * cfg.episodes_per_batch) as f64);
    }
    let test_accuracy = hard_knn_accuracy(&phi, cfg.k, reference, test)?;
    let weights = phi.weights().expect("linear embedding has weights").to_rows();
    let report = DknnReport { config: cfg.clone(), epoch_losses, initial_test_accuracy, test_accuracy, weights };
    Ok((phi, report))
}

fn sample_episode<R: Rng + ?Sized>(rng: &mut R, data: &BlobData, candidates: usize) -> Result<Episode> {
    let picks = rand::seq::index::sample(rng, data.train_x.rows(), candidates + 1);
    let mut iter = picks.iter();
    let q = iter.next().expect("at least one pick");
    let mut x = Matrix::zeros(candidates, data.train_x.cols());
    let mut y = Vec::with_capacity(candidates);
    for (r, i) in iter.enumerate() {
        x.row_mut(r).copy_from_slice(data.train_x.row(i));
        y.push(data.train_y[i]);
    }
    Episode::new(data.train_x.row(q).to_vec(), data.train_y[q], x, y)
}
