//! Timed sort-yourself runs and the operator speed table.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;
use softsort_core::tasks::{PaperOperator, SortYourself, SortYourselfConfig, ThetaInit};
use softsort_core::RngSeed;

use crate::Result;

/// Settings of one timed run. Constructed with [`SortYourselfConfig::paper`]
/// and adjusted as needed.
pub type BenchConfig = SortYourselfConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Loss at the start of the epoch, before the update.
    pub loss: f64,
    /// Mean Spearman correlation over batch rows after the update.
    pub spearman_mean: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub total_seconds: f64,
    /// Per-epoch wall time for every epoch after the first.
    pub epoch_seconds: Vec<f64>,
    pub mean_epoch_seconds: f64,
    pub stddev_seconds: f64,
    /// Spearman correlation of each row of the final `θ` with the decreasing target.
    pub final_spearman: Vec<f64>,
    pub curve: Vec<CurvePoint>,
}

impl BenchReport {
    pub fn final_spearman_min(&self) -> f64 {
        self.final_spearman.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// Trains for `cfg.epochs` epochs. The first epoch is burn-in and is left out
/// of the timing statistics; Spearman scoring runs outside the timed region.
pub fn run_sort_yourself(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut task = SortYourself::new(cfg.clone())?;
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs.saturating_sub(1));
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut total_seconds = 0.0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let loss = task.step()?;
        let elapsed = start.elapsed().as_secs_f64();
        total_seconds += elapsed;
        if epoch > 0 {
            epoch_seconds.push(elapsed);
        }
        let rho = task.spearman_per_row()?;
        curve.push(CurvePoint { epoch, loss, spearman_mean: rho.iter().sum::<f64>() / rho.len() as f64 });
    }
    let (mean_epoch_seconds, stddev_seconds) = mean_std(&epoch_seconds);
    Ok(BenchReport {
        config: cfg.clone(),
        total_seconds,
        epoch_seconds,
        mean_epoch_seconds,
        stddev_seconds,
        final_spearman: task.spearman_per_row()?,
        curve,
    })
}

/// One line of the speed table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    /// `softsort` or `neuralsort`, suffixed with `-reversed` for runs
    /// started from increasing rows.
    pub operator: String,
    pub n: usize,
    pub batch: usize,
    pub epochs: usize,
    pub tau: f64,
    /// Semi-metric power; empty for NeuralSort.
    pub p: Option<f64>,
    pub mean_epoch_seconds: f64,
    pub stddev_seconds: f64,
    pub final_spearman_min: f64,
}

impl BenchRow {
    pub fn from_report(r: &BenchReport) -> Self {
        let c = &r.config;
        let mut operator = c.operator.name().to_string();
        if c.init == ThetaInit::Reversed {
            operator.push_str("-reversed");
        }
        Self {
            operator,
            n: c.n,
            batch: c.batch,
            epochs: c.epochs,
            tau: c.tau,
            p: c.operator.metric_power(),
            mean_epoch_seconds: r.mean_epoch_seconds,
            stddev_seconds: r.stddev_seconds,
            final_spearman_min: r.final_spearman_min(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedCompareConfig {
    pub n_list: Vec<usize>,
    pub operators: Vec<PaperOperator>,
    pub batch: usize,
    pub epochs: usize,
    pub seed: RngSeed,
    /// Also time runs whose rows start in increasing order.
    pub include_reversed: bool,
}

impl Default for SpeedCompareConfig {
    fn default() -> Self {
        Self {
            n_list: vec![100, 500, 1000, 2000],
            operators: vec![PaperOperator::SoftSort, PaperOperator::NeuralSort],
            batch: 20,
            epochs: 100,
            seed: 0,
            include_reversed: false,
        }
    }
}

impl SpeedCompareConfig {
    /// Every cell this comparison will run, in table order.
    pub fn cells(&self) -> Vec<BenchConfig> {
        let inits: &[ThetaInit] =
            if self.include_reversed { &[ThetaInit::Uniform, ThetaInit::Reversed] } else { &[ThetaInit::Uniform] };
        let mut cells = Vec::new();
        for &init in inits {
            for &op in &self.operators {
                for &n in &self.n_list {
                    let mut cfg = SortYourselfConfig::paper(op, n, self.seed);
                    cfg.batch = self.batch;
                    cfg.epochs = self.epochs;
                    cfg.init = init;
                    cells.push(cfg);
                }
            }
        }
        cells
    }
}

/// Runs every (operator, n) cell with the same seed, so both operators start
/// from identical `θ`. Cells run one after another in this process.
pub fn run_speed_compare(cfg: &SpeedCompareConfig) -> Result<Vec<BenchReport>> {
    let cells = cfg.cells();
    for c in &cells {
        c.validate()?;
    }
    cells.iter().map(run_sort_yourself).collect()
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
