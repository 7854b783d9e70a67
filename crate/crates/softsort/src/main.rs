use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use softsort::bench::{run_sort_yourself, write_bench_csv, write_curve_csv, BenchRow, SpeedCompareConfig};
use softsort::config::{load_config, splice_args, take_config_flag};
use softsort::properties::{run_properties, Fault, PropertyOptions, Suite};
use softsort_core::dknn::{train_dknn, BlobSpec, DknnConfig, KnnLoss};
use softsort_core::grad::{gradcheck_with, GradCheckConfig};
use softsort_core::tasks::{run_learn_to_sort, LearnToSortConfig, PaperOperator};
use softsort_core::{argsort_desc, hard_project, Operator, RngSeed, SemiMetric, Temperature};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Differentiable sorting: SoftSort and NeuralSort relaxations of argsort.
///
/// Flags can also be read from a flat TOML file with `--config FILE` given
/// before the subcommand. Each `key = value` line stands for `--key value`;
/// flags on the command line override the file.
#[derive(Parser, Debug)]
#[command(name = "softsort", version, args_override_self = true)]
struct Cli {
    /// Flat TOML file of default flags for the subcommand.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the relaxed permutation matrix of a score vector.
    Demo(DemoArgs),
    /// Compare analytic gradients with finite differences; prints JSON.
    Gradcheck(GradcheckArgs),
    /// Time the sort-yourself benchmark and write a CSV table.
    Bench(BenchArgs),
    /// Train the differentiable kNN head on Gaussian blobs; prints JSON.
    Knn(KnnArgs),
    /// Run the property suite and print a pass/fail table.
    Properties(PropertiesArgs),
    /// Train a scalar scorer from permutation supervision; prints JSON.
    LearnSort(LearnSortArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OperatorArg {
    Softsort,
    Neuralsort,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OperatorsArg {
    Both,
    Softsort,
    Neuralsort,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    L1,
    L2,
}

impl MetricArg {
    fn semi_metric(self) -> SemiMetric {
        match self {
            MetricArg::L1 => SemiMetric::ABSOLUTE,
            MetricArg::L2 => SemiMetric::SQUARED,
        }
    }
}

fn operator(op: OperatorArg, metric: MetricArg) -> Operator {
    match op {
        OperatorArg::Softsort => Operator::SoftSort(metric.semi_metric()),
        OperatorArg::Neuralsort => Operator::NeuralSort,
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    Temperature::new(v).map(|t| t.get()).map_err(|e| e.to_string())
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a finite value >= 0, got {v}"))
    }
}

fn at_least<const MIN: usize>(s: &str) -> Result<usize, String> {
    let v: usize = s.trim().parse().map_err(|e| format!("`{}`: {e}", s.trim()))?;
    if v >= MIN {
        Ok(v)
    } else {
        Err(format!("expected a value >= {MIN}, got {v}"))
    }
}

fn finite(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("`{}`: {e}", s.trim()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{}` is not finite", s.trim()))
    }
}

#[derive(Args, Debug)]
struct SeedArg {
    /// Seed for every random draw.
    #[arg(long, env = "SOFTSORT_SEED", default_value_t = 0)]
    seed: RngSeed,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Comma-separated scores.
    #[arg(long, default_value = "2,5,4", value_delimiter = ',', allow_hyphen_values = true, value_parser = finite)]
    scores: Vec<f64>,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    tau: f64,
    /// Semi-metric for SoftSort: `l1` is |x - y|, `l2` is |x - y|^2.
    #[arg(long, value_enum, default_value_t = MetricArg::L1)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t = OperatorArg::Softsort)]
    operator: OperatorArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = OperatorArg::Softsort)]
    operator: OperatorArg,
    #[arg(long, value_enum, default_value_t = MetricArg::L1)]
    metric: MetricArg,
    #[arg(long, default_value_t = 10, value_parser = at_least::<1>)]
    n: usize,
    #[arg(long, default_value_t = 100, value_parser = at_least::<1>)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5, value_parser = non_negative)]
    tol: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    tau: f64,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated problem sizes.
    #[arg(long, default_value = "100,500,1000,2000", value_delimiter = ',',
          value_parser = at_least::<2>)]
    n_list: Vec<usize>,
    #[arg(long, value_enum, default_value_t = OperatorsArg::Both)]
    operators: OperatorsArg,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 20, value_parser = at_least::<1>)]
    batch: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    /// Also time runs whose rows start in increasing order.
    #[arg(long)]
    include_reversed: bool,
    /// Directory for one `epoch,loss,spearman_mean` CSV per run.
    #[arg(long, value_name = "DIR")]
    curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KnnArgs {
    #[arg(long, default_value_t = 3, value_parser = at_least::<2>)]
    classes: usize,
    #[arg(long, default_value_t = 2, value_parser = at_least::<1>)]
    dim: usize,
    #[arg(long, default_value_t = 3, value_parser = at_least::<1>)]
    k: usize,
    #[arg(long, default_value_t = 16.0, value_parser = positive)]
    tau: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = non_negative)]
    lr: f64,
    #[arg(long, default_value_t = 0.9, value_parser = non_negative)]
    momentum: f64,
    /// Distance between neighbouring class centres, in standard deviations.
    #[arg(long, default_value_t = 5.0, value_parser = positive)]
    separation: f64,
    /// Train with -log P instead of -P.
    #[arg(long)]
    cross_entropy: bool,
    #[command(flatten)]
    seed: SeedArg,
    /// Write per-epoch mean training loss as `epoch,loss` CSV.
    #[arg(long, value_name = "FILE")]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PropertiesArgs {
    /// One of: all, urs, limit, equivariance, rows, complexity, gradients,
    /// stochastic, dknn, losses, training.
    #[arg(long, default_value = "all")]
    suite: Suite,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, hide = true, value_parser = ["row-normalization"])]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct LearnSortArgs {
    #[arg(long, default_value_t = 5, value_parser = at_least::<2>)]
    n: usize,
    #[arg(long, default_value_t = 2000, value_parser = at_least::<1>)]
    train_size: usize,
    #[arg(long, default_value_t = 1000, value_parser = at_least::<1>)]
    test_size: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, value_enum, default_value_t = OperatorArg::Softsort)]
    operator: OperatorArg,
    #[arg(long, value_enum, default_value_t = MetricArg::L1)]
    metric: MetricArg,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    tau: f64,
    #[command(flatten)]
    seed: SeedArg,
}

/// Failure of a subcommand after its flags parsed.
enum Failure {
    Usage(String),
    Run(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.to_string())
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn demo(a: DemoArgs) -> CmdResult {
    if a.scores.is_empty() {
        return Err(Failure::Usage("--scores needs at least one value".into()));
    }
    let mut sorted = a.scores.clone();
    sorted.sort_by(f64::total_cmp);
    let tied = sorted.windows(2).any(|w| w[0] == w[1]);
    if tied {
        eprintln!("warning: scores contain ties; tied entries keep their input order");
    }
    let op = operator(a.operator, a.metric);
    let p = op.forward(&a.scores, Temperature::new(a.tau)?)?;
    let m = p.as_matrix();
    let fmt_row = |row: &[f64]| row.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    let body = m.row_iter().map(|r| format!("[{}]", fmt_row(r))).collect::<Vec<_>>().join(",\n ");
    println!("{} (tau = {}):", op.name(), a.tau);
    println!("[{body}]");
    // Tied rows share an argmax, so fall back to the stable hard sort.
    let perm = if tied { argsort_desc(&a.scores)? } else { hard_project(&p)? };
    let one_based: Vec<String> = perm.to_one_based().iter().map(|i| i.to_string()).collect();
    println!("hard permutation (1-based): [{}]", one_based.join(", "));
    println!("row sums: [{}]", fmt_row(&m.row_sums()));
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut cfg = GradCheckConfig::new(operator(a.operator, a.metric), a.n, a.trials, a.tol, a.seed.seed);
    cfg.tau = a.tau;
    let report = gradcheck_with(&cfg)?;
    print_json(&report)?;
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(EXIT_FAILURE) })
}

fn bench(a: BenchArgs) -> CmdResult {
    let operators = match a.operators {
        OperatorsArg::Both => vec![PaperOperator::SoftSort, PaperOperator::NeuralSort],
        OperatorsArg::Softsort => vec![PaperOperator::SoftSort],
        OperatorsArg::Neuralsort => vec![PaperOperator::NeuralSort],
    };
    let cfg = SpeedCompareConfig {
        n_list: a.n_list,
        operators,
        batch: a.batch,
        epochs: a.epochs,
        seed: a.seed.seed,
        include_reversed: a.include_reversed,
    };
    // Open outputs before any training so a bad path fails immediately.
    let file = File::create(&a.out).map_err(|e| Failure::Run(format!("cannot write {}: {e}", a.out.display())))?;
    if let Some(dir) = &a.curves {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Run(format!("cannot create {}: {e}", dir.display())))?;
    }
    let mut rows = Vec::new();
    for cell in cfg.cells() {
        cell.validate()?;
        let report = run_sort_yourself(&cell)?;
        let row = BenchRow::from_report(&report);
        eprintln!(
            "{:<20} n={:<5} {:.4}s/epoch (sd {:.4}) min spearman {}",
            row.operator, row.n, row.mean_epoch_seconds, row.stddev_seconds, row.final_spearman_min
        );
        if let Some(dir) = &a.curves {
            let path = dir.join(format!("{}_n{}.csv", row.operator, row.n));
            write_curve_csv(&report.curve, BufWriter::new(File::create(&path)?))?;
        }
        rows.push(row);
    }
    write_bench_csv(&rows, BufWriter::new(file))?;
    Ok(ExitCode::SUCCESS)
}

fn knn(a: KnnArgs) -> CmdResult {
    let cfg = DknnConfig {
        blobs: BlobSpec { classes: a.classes, dim: a.dim, separation: a.separation, ..BlobSpec::default() },
        k: a.k,
        tau: a.tau,
        epochs: a.epochs,
        learning_rate: a.lr,
        momentum: a.momentum,
        loss: if a.cross_entropy { KnnLoss::CrossEntropy } else { KnnLoss::NegProb },
        seed: a.seed.seed,
        ..DknnConfig::default()
    };
    if a.k > cfg.candidates {
        return Err(Failure::Usage(format!("--k must be at most {}", cfg.candidates)));
    }
    if a.momentum >= 1.0 {
        return Err(Failure::Usage("--momentum must be below 1".into()));
    }
    let file = match &a.curve {
        Some(p) => Some(File::create(p).map_err(|e| Failure::Run(format!("cannot write {}: {e}", p.display())))?),
        None => None,
    };
    let (_, report) = train_dknn(&cfg)?;
    if let Some(f) = file {
        let mut w = csv::Writer::from_writer(BufWriter::new(f));
        w.write_record(["epoch", "loss"])?;
        for (e, l) in report.epoch_losses.iter().enumerate() {
            w.write_record([e.to_string(), l.to_string()])?;
        }
        w.flush()?;
    }
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn properties(a: PropertiesArgs) -> CmdResult {
    let fault = a.inject_fault.map(|_| Fault::RowNormalization);
    let results = run_properties(a.suite, PropertyOptions { seed: a.seed.seed, fault });
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    println!("{} of {} properties passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed: {}", failed.join("; "));
        Ok(ExitCode::from(EXIT_FAILURE))
    }
}

fn learn_sort(a: LearnSortArgs) -> CmdResult {
    let cfg = LearnToSortConfig {
        n: a.n,
        train_size: a.train_size,
        test_size: a.test_size,
        epochs: a.epochs,
        operator: operator(a.operator, a.metric),
        tau: a.tau,
        seed: a.seed.seed,
        ..LearnToSortConfig::default()
    };
    let (_, report) = run_learn_to_sort(&cfg)?;
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let (args, config) = take_config_flag(std::env::args_os().collect());
    let args = match config.as_deref().map(load_config).transpose() {
        Ok(extra) => splice_args(args, extra.unwrap_or_default()),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Demo(a) => demo(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::Knn(a) => knn(a),
        Command::Properties(a) => properties(a),
        Command::LearnSort(a) => learn_sort(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
