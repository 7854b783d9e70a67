//! Gumbel-perturbed relaxed sorting.
//!
//! Sorting `s + z` with `z` i.i.d. standard Gumbel draws a permutation from the
//! Plackett–Luce distribution with weights `exp(s)`. Replacing the hard sort by
//! a relaxed operator gives a reparameterized, differentiable sample.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::grad::Operator;
use crate::matrix::Matrix;
use crate::ops::{check_scores, RelaxedPermMatrix, Temperature};
use crate::rng::{stream, RngSeed};
use crate::math;

/// Uniform draws are clamped to `[EPS, 1 - EPS]` before the double log.
const UNIFORM_CLAMP: f64 = 1e-12;

/// Redraws allowed for one perturbed row before giving up.
const MAX_RESAMPLES: usize = 16;

/// `n_s x n` block of standard Gumbel samples, one row per perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    z: Matrix,
}

impl GumbelNoise {
    /// All-zero noise; perturbing with it reproduces the deterministic operator.
    pub fn zeros(n_s: usize, n: usize) -> Self {
        Self { z: Matrix::zeros(n_s, n) }
    }

    pub fn from_matrix(z: Matrix) -> Result<Self> {
        if z.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(invalid("gumbel noise must be finite"));
        }
        Ok(Self { z })
    }

    pub fn samples(&self) -> usize {
        self.z.rows()
    }

    pub fn n(&self) -> usize {
        self.z.cols()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.z.row(k)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.z
    }
}

/// One standard Gumbel draw, `-ln(-ln U)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -math::ln(-math::ln(u))
}

fn fill_gumbel<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for x in out {
        *x = gumbel(rng);
    }
}

/// Samples an `n_s x n` Gumbel block. Row `k` comes from its own stream of
/// `seed`, so rows do not depend on `n_s`.
pub fn sample_gumbel(n_s: usize, n: usize, seed: RngSeed) -> Result<GumbelNoise> {
    if n_s == 0 || n == 0 {
        return Err(invalid(alloc::format!("need n_s >= 1 and n >= 1, got n_s={n_s}, n={n}")));
    }
    let mut z = Matrix::zeros(n_s, n);
    for k in 0..n_s {
        fill_gumbel(&mut stream(seed, k as u64), z.row_mut(k));
    }
    Ok(GumbelNoise { z })
}

/// Relaxed sorts of `s + z_k` for each stored noise row.
///
/// Fails with [`Error::TiedScores`] if a perturbed row has a tie.
pub fn relaxed_sort_with_noise(
    s: &[f64],
    tau: Temperature,
    op: Operator,
    noise: &GumbelNoise,
) -> Result<Vec<RelaxedPermMatrix>> {
    check_scores(s)?;
    if noise.n() != s.len() {
        return Err(invalid(alloc::format!("noise has {} columns, scores have {}", noise.n(), s.len())));
    }
    let mut out = Vec::with_capacity(noise.samples());
    let mut perturbed = s.to_vec();
    for k in 0..noise.samples() {
        perturb(s, noise.row(k), &mut perturbed);
        if let Some((first, second)) = find_tie(&perturbed) {
            return Err(Error::TiedScores { first, second });
        }
        out.push(op.forward(&perturbed, tau)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StochasticSort {
    pub matrices: Vec<RelaxedPermMatrix>,
    /// The noise actually used, after any redraws.
    pub noise: GumbelNoise,
    /// Sample indices whose perturbed scores tied and were redrawn.
    pub resampled: Vec<usize>,
}

/// Draws `n_s` Gumbel perturbations of `s` and relaxes each with `op`.
pub fn stochastic_relaxed_sort(
    s: &[f64],
    tau: Temperature,
    op: Operator,
    n_s: usize,
    seed: RngSeed,
) -> Result<StochasticSort> {
    check_scores(s)?;
    let n = s.len();
    let mut noise = sample_gumbel(n_s, n, seed)?;
    let mut resampled = Vec::new();
    let mut matrices = Vec::with_capacity(n_s);
    let mut perturbed = s.to_vec();
    for k in 0..n_s {
        perturb(s, noise.row(k), &mut perturbed);
        if find_tie(&perturbed).is_some() {
            // Continue the row's own stream so the redraw stays deterministic.
            let mut rng = stream(seed, k as u64);
            for _ in 0..n {
                gumbel(&mut rng);
            }
            let mut attempts = 0;
            while find_tie(&perturbed).is_some() {
                attempts += 1;
                if attempts > MAX_RESAMPLES {
                    let (first, second) = find_tie(&perturbed).expect("tie present");
                    return Err(Error::TiedScores { first, second });
                }
                fill_gumbel(&mut rng, noise.z.row_mut(k));
                perturb(s, noise.row(k), &mut perturbed);
            }
            resampled.push(k);
        }
        matrices.push(op.forward(&perturbed, tau)?);
    }
    Ok(StochasticSort { matrices, noise, resampled })
}

fn perturb(s: &[f64], z: &[f64], out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(s).zip(z) {
        *o = a + b;
    }
}

fn find_tie(s: &[f64]) -> Option<(usize, usize)> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    idx.windows(2).find(|w| s[w[0]] == s[w[1]]).map(|w| (w[0].min(w[1]), w[0].max(w[1])))
}
