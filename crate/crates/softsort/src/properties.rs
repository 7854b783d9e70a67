//! Executable property suite: every operator, gradient, sampling, kNN and
//! training invariant, each checked at its stated tolerance.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use softsort_core::dknn::{dknn_prob, dknn_prob_for_label, neg_sq_distances, Embedding, Episode};
use softsort_core::grad::{gradcheck_with, sample_gapped_scores, GradCheckConfig};
use softsort_core::loss::{diag_cross_entropy, perm_cross_entropy};
use softsort_core::stochastic::{sample_gumbel, stochastic_relaxed_sort};
use softsort_core::tasks::{PaperOperator, SortYourself, SortYourselfConfig};
use softsort_core::{
    argsort_desc, neural_sort_logits, perm_matrix, sort_desc, Matrix, Operator, Permutation,
    RngSeed, SemiMetric, Temperature,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Urs,
    Limit,
    Equivariance,
    Rows,
    Complexity,
    Gradients,
    Stochastic,
    Dknn,
    Losses,
    Training,
}

impl Suite {
    pub const NAMES: [&'static str; 11] = [
        "all",
        "urs",
        "limit",
        "equivariance",
        "rows",
        "complexity",
        "gradients",
        "stochastic",
        "dknn",
        "losses",
        "training",
    ];

    const EACH: [Suite; 10] = [
        Suite::Urs,
        Suite::Limit,
        Suite::Equivariance,
        Suite::Rows,
        Suite::Complexity,
        Suite::Gradients,
        Suite::Stochastic,
        Suite::Dknn,
        Suite::Losses,
        Suite::Training,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Urs => "urs",
            Suite::Limit => "limit",
            Suite::Equivariance => "equivariance",
            Suite::Rows => "rows",
            Suite::Complexity => "complexity",
            Suite::Gradients => "gradients",
            Suite::Stochastic => "stochastic",
            Suite::Dknn => "dknn",
            Suite::Losses => "losses",
            Suite::Training => "training",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::EACH
            .iter()
            .chain([Suite::All].iter())
            .copied()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}`; expected one of {}", Suite::NAMES.join(", ")))
    }
}

/// Deliberate defects used to confirm the suite catches broken builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Doubles every output entry, so rows sum to 2. Doubling is exact and
    /// leaves every other property intact.
    RowNormalization,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<13} {:<48} {}", self.suite, self.name, self.detail)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PropertyOptions {
    pub seed: RngSeed,
    pub fault: Option<Fault>,
}

fn rng(seed: RngSeed, id: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn uniform_scores(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn tau(t: f64) -> Temperature {
    Temperature::new(t).expect("positive temperature")
}

const OPERATORS: [Operator; 3] =
    [Operator::SoftSort(SemiMetric::ABSOLUTE), Operator::SoftSort(SemiMetric::SQUARED), Operator::NeuralSort];

fn op_label(op: Operator) -> String {
    match op.metric_power() {
        Some(p) => format!("{} p={p}", op.name()),
        None => op.name().to_string(),
    }
}

struct Runner {
    opts: PropertyOptions,
    results: Vec<PropertyResult>,
}

impl Runner {
    /// Relaxed sort with any configured fault applied to the output.
    fn relax(&self, op: Operator, s: &[f64], t: f64) -> Matrix {
        let mut m = op.forward(s, tau(t)).expect("valid scores").into_matrix();
        if self.opts.fault == Some(Fault::RowNormalization) {
            m.as_mut_slice().iter_mut().for_each(|x| *x *= 2.0);
        }
        m
    }

    fn record(&mut self, suite: Suite, name: impl Into<String>, check: impl FnOnce(&Self) -> Result<String, String>) {
        let start = Instant::now();
        let outcome = check(self);
        let (pass, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.results.push(PropertyResult {
            suite: suite.name(),
            name: name.into(),
            pass,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

fn within(label: &str, err: f64, tol: f64) -> Result<String, String> {
    let msg = format!("{label} {err:.3e} (tol {tol:e})");
    if err <= tol {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn max_rel_err(a: &[f64], oracle: &[f64]) -> f64 {
    a.iter().zip(oracle).map(|(x, o)| ((x - o) / o).abs()).fold(0.0, f64::max)
}

/// Normalises `w` to sum to one.
fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

const URS_NS: [usize; 4] = [2, 5, 10, 50];
const URS_TAUS: [f64; 3] = [0.1, 1.0, 100.0];
const URS_TRIALS: usize = 1000;

fn urs(r: &mut Runner) {
    // Each property scans the same seeded inputs.
    let inputs = |seed| {
        let mut g = rng(seed, 1);
        URS_NS.iter().flat_map(move |&n| (0..URS_TRIALS).map(|_| uniform_scores(&mut g, n)).collect::<Vec<_>>())
    };
    let seed = r.opts.seed;
    r.record(Suite::Urs, "non-negativity", |r| {
        let mut worst = f64::INFINITY;
        for s in inputs(seed) {
            for op in OPERATORS {
                for t in URS_TAUS {
                    worst = worst.min(r.relax(op, &s, t).as_slice().iter().copied().fold(f64::INFINITY, f64::min));
                }
            }
        }
        if worst >= 0.0 {
            Ok(format!("min entry {worst:.3e}"))
        } else {
            Err(format!("negative entry {worst:.3e}"))
        }
    });
    r.record(Suite::Urs, "row affinity", |r| {
        let mut worst: f64 = 0.0;
        for s in inputs(seed) {
            for op in OPERATORS {
                for t in URS_TAUS {
                    for row in r.relax(op, &s, t).row_iter() {
                        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                }
            }
        }
        within("max |row sum - 1|", worst, 1e-9)
    });
    r.record(Suite::Urs, "argmax permutation equals argsort", |r| {
        let mut bad = 0;
        for s in inputs(seed) {
            let truth = argsort_desc(&s).unwrap();
            for op in OPERATORS {
                for t in URS_TAUS {
                    let m = r.relax(op, &s, t);
                    let arg: Vec<usize> = m
                        .row_iter()
                        .map(|row| (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b }))
                        .collect();
                    bad += usize::from(arg != truth.as_slice());
                }
            }
        }
        let total = URS_NS.len() * URS_TRIALS * OPERATORS.len() * URS_TAUS.len();
        if bad == 0 {
            Ok(format!("{total} matrices"))
        } else {
            Err(format!("{bad} of {total} matrices"))
        }
    });
}

fn limit(r: &mut Runner) {
    // p = 2 is excluded: a gap of 0.1 only suppresses off-peak weights to
    // exp(-0.01 / 1e-3) = 4.5e-5.
    for op in [Operator::SoftSort(SemiMetric::ABSOLUTE), Operator::NeuralSort] {
        let seed = r.opts.seed;
        r.record(Suite::Limit, format!("limit tau=1e-3 ({})", op_label(op)), |r| {
            let mut g = rng(seed, 2);
            let mut worst: f64 = 0.0;
            for trial in 0..100 {
                let s = sample_gapped_scores(&mut g, 2 + trial % 19, 0.1);
                let hard = perm_matrix(&argsort_desc(&s).unwrap()).to_dense();
                worst = worst.max(r.relax(op, &s, 1e-3).max_abs_diff(&hard));
            }
            within("max |P - P_sort|", worst, 1e-6)
        });
    }
}

fn equivariance(r: &mut Runner) {
    for op in OPERATORS {
        let seed = r.opts.seed;
        r.record(Suite::Equivariance, format!("f(s) = f(sort s) P ({})", op_label(op)), |r| {
            let mut g = rng(seed, 3);
            let mut worst: f64 = 0.0;
            for trial in 0..100 {
                let s = uniform_scores(&mut g, 1 + trial % 20);
                let p = perm_matrix(&argsort_desc(&s).unwrap()).to_dense();
                let rhs = r.relax(op, &sort_desc(&s).unwrap(), 1.0).matmul(&p).unwrap();
                worst = worst.max(r.relax(op, &s, 1.0).max_abs_diff(&rhs));
            }
            within("max abs diff", worst, 1e-12)
        });
    }
}

fn rows(r: &mut Runner) {
    let seed = r.opts.seed;
    r.record(Suite::Rows, "first row is softmax(s) (softsort p=1)", |r| {
        let mut g = rng(seed, 4);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let s = uniform_scores(&mut g, 10);
            let t = g.random_range(0.1..10.0);
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let oracle = normalized(s.iter().map(|x| ((x - max) / t).exp()).collect());
            let m = r.relax(Operator::SoftSort(SemiMetric::ABSOLUTE), &s, t);
            worst = m.row(0).iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
        within("max abs diff", worst, 1e-12)
    });
    for (p, label) in [(SemiMetric::ABSOLUTE, "Laplace rows (softsort p=1)"), (SemiMetric::SQUARED, "Gaussian rows (softsort p=2)")]
    {
        r.record(Suite::Rows, label, |r| {
            let mut g = rng(seed, 5);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let s = uniform_scores(&mut g, 10);
                let t = g.random_range(0.5..5.0);
                let sorted = sort_desc(&s).unwrap();
                let m = r.relax(Operator::SoftSort(p), &s, t);
                for (i, &anchor) in sorted.iter().enumerate() {
                    let oracle =
                        normalized(s.iter().map(|x| (-(anchor - x).abs().powf(p.power()) / t).exp()).collect());
                    worst = worst.max(max_rel_err(m.row(i), &oracle));
                }
            }
            within("max relative error", worst, 1e-9)
        });
    }
    r.record(Suite::Rows, "Gaussian rows (neuralsort, equally spaced)", |r| {
        let mut worst: f64 = 0.0;
        for (a, b, n, t) in [(1.0, 0.0, 8, 2.0), (0.5, 3.0, 12, 1.0), (2.0, -1.0, 6, 4.0)] {
            let s: Vec<f64> = (0..n).map(|k| b - a * k as f64).collect();
            let m = r.relax(Operator::NeuralSort, &s, t);
            // N(s_i, a τ / 2) density up to normalisation.
            for (i, si) in s.iter().enumerate() {
                let oracle = normalized(s.iter().map(|x| (-(si - x) * (si - x) / (a * t)).exp()).collect());
                worst = worst.max(max_rel_err(m.row(i), &oracle));
            }
        }
        within("max relative error", worst, 1e-9)
    });
    r.record(Suite::Rows, "shift invariance (softsort p=1)", |r| {
        let mut g = rng(seed, 6);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let s = uniform_scores(&mut g, 10);
            let c = g.random_range(-3.0..3.0);
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let op = Operator::SoftSort(SemiMetric::ABSOLUTE);
            worst = worst.max(r.relax(op, &s, 1.0).max_abs_diff(&r.relax(op, &shifted, 1.0)));
        }
        within("max abs diff", worst, 1e-12)
    });
}

/// Best-of-`reps` wall time of the NeuralSort logits at size `n`.
pub fn logits_seconds(n: usize, reps: usize, seed: RngSeed) -> f64 {
    let s = uniform_scores(&mut rng(seed, 7), n);
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(neural_sort_logits(std::hint::black_box(&s)).unwrap());
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn complexity(r: &mut Runner) {
    let seed = r.opts.seed;
    r.record(Suite::Complexity, "neuralsort logits scale quadratically", |_| {
        let small = logits_seconds(500, 15, seed);
        let large = logits_seconds(2000, 7, seed);
        within("time(2000)/time(500)", large / small, 25.0)
    });
}

fn gradients(r: &mut Runner) {
    let seed = r.opts.seed;
    for op in OPERATORS {
        r.record(Suite::Gradients, format!("VJP vs finite differences ({})", op_label(op)), |_| {
            let mut worst: f64 = 0.0;
            for t in [0.1, 1.0, 10.0] {
                for n in URS_NS {
                    let mut cfg = GradCheckConfig::new(op, n, 100, 1e-5, seed);
                    cfg.tau = t;
                    let rep = gradcheck_with(&cfg).map_err(|e| e.to_string())?;
                    worst = worst.max(rep.max_rel_err);
                }
            }
            within("max relative error", worst, 1e-5)
        });
    }
    r.record(Suite::Gradients, "row-sum conservation", |_| {
        let mut g = rng(seed, 8);
        let mut worst: f64 = 0.0;
        for op in OPERATORS {
            for _ in 0..20 {
                let n = 10;
                let s = sample_gapped_scores(&mut g, n, 0.05);
                for i in 0..n {
                    let mut u = Matrix::zeros(n, n);
                    u.row_mut(i).fill(1.0);
                    let grad = op.vjp(&s, tau(1.0), &u).map_err(|e| e.to_string())?;
                    worst = grad.d_s.iter().fold(worst, |w, x| w.max(x.abs()));
                }
            }
        }
        within("max |grad|", worst, 1e-10)
    });
    r.record(Suite::Gradients, "linearity in upstream", |_| {
        let mut g = rng(seed, 9);
        let mut worst: f64 = 0.0;
        for op in OPERATORS {
            for _ in 0..20 {
                let n = 10;
                let s = sample_gapped_scores(&mut g, n, 0.05);
                let mut random_upstream = || {
                    let data = (0..n * n).map(|_| g.random_range(-1.0..1.0)).collect();
                    Matrix::from_vec(n, n, data).unwrap()
                };
                let (u1, u2) = (random_upstream(), random_upstream());
                let (a, b) = (1.7, -0.4);
                let mixed = u1.lin_comb(a, &u2, b).unwrap();
                let g1 = op.vjp(&s, tau(1.0), &u1).map_err(|e| e.to_string())?.d_s;
                let g2 = op.vjp(&s, tau(1.0), &u2).map_err(|e| e.to_string())?.d_s;
                let gm = op.vjp(&s, tau(1.0), &mixed).map_err(|e| e.to_string())?.d_s;
                for k in 0..n {
                    worst = worst.max((gm[k] - (a * g1[k] + b * g2[k])).abs());
                }
            }
        }
        within("max abs diff", worst, 1e-10)
    });
    r.record(Suite::Gradients, "scale covariance (softsort p=1)", |_| {
        let mut g = rng(seed, 10);
        let op = Operator::SoftSort(SemiMetric::ABSOLUTE);
        let (mut fwd, mut bwd): (f64, f64) = (0.0, 0.0);
        for _ in 0..20 {
            let n = 10;
            let s = sample_gapped_scores(&mut g, n, 0.05);
            let c = g.random_range(0.2..5.0);
            let t = g.random_range(0.2..5.0);
            let cs: Vec<f64> = s.iter().map(|x| c * x).collect();
            let u = Matrix::from_vec(n, n, (0..n * n).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap();
            let p1 = op.forward(&s, tau(t)).unwrap();
            let p2 = op.forward(&cs, tau(c * t)).unwrap();
            fwd = fwd.max(p1.as_matrix().max_abs_diff(p2.as_matrix()));
            let g1 = op.vjp(&s, tau(t), &u).map_err(|e| e.to_string())?.d_s;
            let g2 = op.vjp(&cs, tau(c * t), &u).map_err(|e| e.to_string())?.d_s;
            for k in 0..n {
                bwd = bwd.max((g2[k] - g1[k] / c).abs());
            }
        }
        if fwd > 1e-12 {
            return Err(format!("forward max abs diff {fwd:.3e} (tol 1e-12)"));
        }
        within("gradient max abs diff", bwd, 1e-10)
    });
}

fn stochastic(r: &mut Runner) {
    let seed = r.opts.seed;
    r.record(Suite::Stochastic, "every sample is URS", |_| {
        let mut g = rng(seed, 11);
        for op in OPERATORS {
            for trial in 0..20 {
                let s = uniform_scores(&mut g, 2 + trial);
                let out = stochastic_relaxed_sort(&s, tau(1.0), op, 5, seed + trial as u64)
                    .map_err(|e| e.to_string())?;
                for m in &out.matrices {
                    m.check_urs(1e-9).map_err(|v| format!("{}: {v}", op_label(op)))?;
                }
            }
        }
        Ok("60 draws of 5 samples".into())
    });
    r.record(Suite::Stochastic, "seed determinism", |_| {
        let s = [2.0, 5.0, 4.0];
        for op in OPERATORS {
            let a = stochastic_relaxed_sort(&s, tau(1.0), op, 8, seed).map_err(|e| e.to_string())?;
            let b = stochastic_relaxed_sort(&s, tau(1.0), op, 8, seed).map_err(|e| e.to_string())?;
            let same = a.matrices.iter().zip(&b.matrices).all(|(x, y)| x.as_matrix().as_slice() == y.as_matrix().as_slice());
            if !same {
                return Err(format!("{} differs between runs", op_label(op)));
            }
        }
        Ok("bit-identical".into())
    });
    r.record(Suite::Stochastic, "Gumbel-max matches softmax", |_| {
        let s = [0.3, -1.0, 1.2, 0.0, 0.5];
        let draws = 200_000;
        let z = sample_gumbel(draws, s.len(), seed).map_err(|e| e.to_string())?;
        let mut counts = [0usize; 5];
        for k in 0..draws {
            let row = z.row(k);
            let best = (0..s.len()).fold(0, |b, j| if s[j] + row[j] > s[b] + row[b] { j } else { b });
            counts[best] += 1;
        }
        let probs = normalized(s.iter().map(|x| x.exp()).collect());
        let mut worst: f64 = 0.0;
        for (c, p) in counts.iter().zip(&probs) {
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            worst = worst.max((*c as f64 / draws as f64 - p).abs() / se);
        }
        within("max deviation in standard errors", worst, 3.0)
    });
    r.record(Suite::Stochastic, "Plackett-Luce first choice", |_| {
        let s = [2.0f64, 5.0, 4.0];
        let oracle = s[1].exp() / s.iter().map(|x| x.exp()).sum::<f64>();
        let out = stochastic_relaxed_sort(&s, tau(1e-3), Operator::SoftSort(SemiMetric::ABSOLUTE), 100_000, seed)
            .map_err(|e| e.to_string())?;
        let hits = out.matrices.iter().filter(|m| m.row_argmaxes()[0] == 1).count();
        within("|freq - oracle|", (hits as f64 / 1e5 - oracle).abs(), 0.01)
    });
}

fn random_episode(g: &mut ChaCha20Rng, n: usize, dim: usize, classes: usize) -> Episode {
    let point = |g: &mut ChaCha20Rng| (0..dim).map(|_| g.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let query = point(g);
    let cands: Vec<Vec<f64>> = (0..n).map(|_| point(g)).collect();
    let labels = (0..n).map(|_| g.random_range(0..classes)).collect();
    Episode::new(query, g.random_range(0..classes), Matrix::from_rows(&cands).unwrap(), labels).unwrap()
}

fn dknn(r: &mut Runner) {
    let seed = r.opts.seed;
    let d = SemiMetric::ABSOLUTE;
    r.record(Suite::Dknn, "matching-networks identity (k=1, tau=2)", |_| {
        let mut g = rng(seed, 12);
        let phi = Embedding::identity().with_unit_norm(true);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let ep = random_episode(&mut g, 10, 4, 3);
            let unit = |x: &[f64]| {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                x.iter().map(|v| v / norm).collect::<Vec<_>>()
            };
            let q = unit(&ep.query);
            let w: Vec<f64> = ep
                .candidates
                .row_iter()
                .map(|x| unit(x).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>().exp())
                .collect();
            let num: f64 = w.iter().zip(&ep.labels).filter(|(_, &y)| y == ep.query_label).map(|(w, _)| w).sum();
            let oracle = num / w.iter().sum::<f64>();
            let p = dknn_prob(&ep, &phi, 1, tau(2.0), d).map_err(|e| e.to_string())?;
            worst = worst.max((p - oracle).abs());
        }
        within("max abs diff", worst, 1e-10)
    });
    r.record(Suite::Dknn, "invariance to candidate order", |_| {
        let mut g = rng(seed, 13);
        let phi = Embedding::identity();
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let ep = random_episode(&mut g, 12, 3, 3);
            let mut order: Vec<usize> = (0..12).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut g);
            let rows: Vec<&[f64]> = order.iter().map(|&i| ep.candidates.row(i)).collect();
            let labels = order.iter().map(|&i| ep.labels[i]).collect();
            let shuffled =
                Episode::new(ep.query.clone(), ep.query_label, Matrix::from_rows(&rows).unwrap(), labels).unwrap();
            let a = dknn_prob(&ep, &phi, 3, tau(1.0), d).map_err(|e| e.to_string())?;
            let b = dknn_prob(&shuffled, &phi, 3, tau(1.0), d).map_err(|e| e.to_string())?;
            worst = worst.max((a - b).abs());
        }
        within("max abs diff", worst, 1e-12)
    });
    r.record(Suite::Dknn, "class probabilities sum to one", |_| {
        let mut g = rng(seed, 14);
        let phi = Embedding::identity();
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let ep = random_episode(&mut g, 12, 3, 4);
            let total: f64 = (0..4)
                .map(|c| dknn_prob_for_label(&ep, &phi, 5, tau(1.0), d, c))
                .sum::<softsort_core::Result<f64>>()
                .map_err(|e| e.to_string())?;
            worst = worst.max((total - 1.0).abs());
        }
        within("max |sum - 1|", worst, 1e-9)
    });
    r.record(Suite::Dknn, "unit-norm scores are 2 cos - 2", |_| {
        let mut g = rng(seed, 15);
        let phi = Embedding::identity().with_unit_norm(true);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let ep = random_episode(&mut g, 10, 4, 3);
            let s = neg_sq_distances(&ep, &phi).map_err(|e| e.to_string())?;
            let q = phi.embed(&ep.query).unwrap();
            for (x, si) in ep.candidates.row_iter().zip(&s) {
                let e = phi.embed(x).unwrap();
                let dot: f64 = e.iter().zip(&q).map(|(a, b)| a * b).sum();
                worst = worst.max((si - (2.0 * dot - 2.0)).abs());
            }
        }
        within("max abs diff", worst, 1e-12)
    });
}

fn losses(r: &mut Runner) {
    let seed = r.opts.seed;
    r.record(Suite::Losses, "diagonal cross-entropy is non-negative", |r| {
        let mut g = rng(seed, 16);
        for _ in 0..100 {
            let s = uniform_scores(&mut g, 8);
            let m = r.relax(Operator::SoftSort(SemiMetric::ABSOLUTE), &s, 0.5);
            let l = diag_cross_entropy(&m).map_err(|e| e.to_string())?;
            if !(l >= 0.0) {
                return Err(format!("loss {l}"));
            }
        }
        let zero = diag_cross_entropy(&Matrix::identity(6)).map_err(|e| e.to_string())?;
        if zero != 0.0 {
            return Err(format!("identity gives {zero}"));
        }
        Ok("100 matrices; identity gives 0".into())
    });
    r.record(Suite::Losses, "permutation consistency", |r| {
        let mut g = rng(seed, 17);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            use rand::seq::SliceRandom;
            let n = 7;
            let s = uniform_scores(&mut g, n);
            let p_hat = r.relax(Operator::NeuralSort, &s, 1.0);
            let mut t: Vec<usize> = (0..n).collect();
            t.shuffle(&mut g);
            let mut q: Vec<usize> = (0..n).collect();
            q.shuffle(&mut g);
            let truth = perm_matrix(&Permutation::new(t).unwrap());
            let q = perm_matrix(&Permutation::new(q).unwrap()).to_dense();
            let moved_truth = truth.to_dense().matmul(&q).unwrap();
            let moved_perm = hard_rows(&moved_truth);
            let lhs = perm_cross_entropy(&p_hat, &truth).map_err(|e| e.to_string())?;
            let rhs =
                perm_cross_entropy(&p_hat.matmul(&q).unwrap(), &perm_matrix(&moved_perm)).map_err(|e| e.to_string())?;
            worst = worst.max((lhs - rhs).abs());
        }
        within("max abs diff", worst, 1e-12)
    });
}

fn hard_rows(m: &Matrix) -> Permutation {
    Permutation::new(m.row_iter().map(|row| row.iter().position(|&x| x == 1.0).unwrap()).collect()).unwrap()
}

fn training(r: &mut Runner) {
    let seed = r.opts.seed;
    for n in [100, 500] {
        for op in [PaperOperator::SoftSort, PaperOperator::NeuralSort] {
            let cfg = SortYourselfConfig::paper(op, n, seed);
            let label = format!("sort-yourself n={n} ({})", cfg.operator.name());
            r.record(Suite::Training, label, |_| {
                let mut task = SortYourself::new(cfg.clone()).map_err(|e| e.to_string())?;
                for _ in 0..cfg.epochs {
                    task.step().map_err(|e| e.to_string())?;
                }
                let rho = task.spearman_per_row().map_err(|e| e.to_string())?;
                let min = rho.iter().copied().fold(f64::INFINITY, f64::min);
                if min == 1.0 {
                    Ok(format!("min row Spearman {min}"))
                } else {
                    Err(format!("min row Spearman {min} (want 1.0)"))
                }
            });
        }
    }
    r.record(Suite::Training, "benchmark determinism", |_| {
        let curve = || -> softsort_core::Result<Vec<u64>> {
            let mut cfg = SortYourselfConfig::paper(PaperOperator::SoftSort, 50, seed);
            cfg.epochs = 10;
            let mut task = SortYourself::new(cfg)?;
            let mut losses = Vec::new();
            for _ in 0..10 {
                losses.push(task.step()?.to_bits());
            }
            losses.extend(task.theta().as_slice().iter().map(|x| x.to_bits()));
            Ok(losses)
        };
        let a = curve().map_err(|e| e.to_string())?;
        let b = curve().map_err(|e| e.to_string())?;
        if a == b {
            Ok("loss curves bit-identical".into())
        } else {
            Err("loss curves differ".into())
        }
    });
}

pub fn run_properties(suite: Suite, opts: PropertyOptions) -> Vec<PropertyResult> {
    let mut r = Runner { opts, results: Vec::new() };
    let selected: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    for s in selected {
        match s {
            Suite::Urs => urs(&mut r),
            Suite::Limit => limit(&mut r),
            Suite::Equivariance => equivariance(&mut r),
            Suite::Rows => rows(&mut r),
            Suite::Complexity => complexity(&mut r),
            Suite::Gradients => gradients(&mut r),
            Suite::Stochastic => stochastic(&mut r),
            Suite::Dknn => dknn(&mut r),
            Suite::Losses => losses(&mut r),
            Suite::Training => training(&mut r),
            Suite::All => unreachable!(),
        }
    }
    r.results
}
