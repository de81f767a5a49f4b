//! Command-line front end: evaluation of uncertainty files over repeated
//! splits, calibrate-then-predict, Monte Carlo coverage checks, and linear
//! quantile-regression heuristics.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error, 3 numerical failure.

pub mod calibrate;
pub mod error;
pub mod evaluate;
pub mod fit_quantile;
pub mod input;
pub mod output;
pub mod simulate;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use confforge::conditional::{BinSource, DEFAULT_MAX_BINS, DEFAULT_MIN_BIN_SIZE, DEFAULT_MIN_GROUP_SIZE};
use confforge::quantile_fit::TrainConfig;
use confforge::scores::ScoreKind;
use confforge::split::DEFAULT_CAL_SIZE;

use crate::calibrate::{cmd_calibrate_predict, CalibrateConfig};
use crate::error::{CliError, CliResult};
use crate::evaluate::{cmd_evaluate, EvaluateConfig};
use crate::fit_quantile::{cmd_fit_quantile, FitQuantileConfig};
use crate::simulate::{cmd_simulate, load_synth_config, SimulateConfig};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "CONFFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "confforge", version, about = "Conformal prediction intervals for regression uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare raw, affine-recalibrated and conformal intervals over repeated splits.
    Evaluate(EvaluateArgs),
    /// Fit on a calibration file and write intervals for a prediction file.
    Calibrate(CalibrateArgs),
    /// Monte Carlo check of conformal coverage on synthetic data.
    Simulate(SimulateArgs),
    /// Train quantile regressors and emit heuristic uncertainty records.
    FitQuantile(FitQuantileArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Symmetric,
    Asymmetric,
}

impl From<KindArg> for ScoreKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Symmetric => ScoreKind::Symmetric,
            KindArg::Asymmetric => ScoreKind::Asymmetric,
        }
    }
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie in (0, 1), got {a}"))
    }
}

/// `quality`, `uncertainty`, or the name of a record attribute.
fn parse_bin_attr(s: &str) -> Result<BinSource, String> {
    Ok(match s {
        "quality" => BinSource::GroundTruthQuality,
        "uncertainty" => BinSource::PredictedUncertainty,
        "" => return Err("empty attribute name".into()),
        other => BinSource::NamedAttr(
            other
                .strip_prefix("attr:")
                .or_else(|| other.strip_prefix("attr."))
                .unwrap_or(other)
                .to_string(),
        ),
    })
}

#[derive(Debug, Args)]
struct StratumArgs {
    /// Per-group quantiles keyed on the record field `group`.
    #[arg(long, value_name = "FIELD")]
    group_by: Option<String>,
    /// Mondrian bins over `quality`, `uncertainty`, or a named attribute.
    #[arg(long, value_name = "SOURCE", value_parser = parse_bin_attr)]
    bin_attr: Option<BinSource>,
    #[arg(long, default_value_t = DEFAULT_MIN_BIN_SIZE)]
    min_bin_size: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_BINS)]
    max_bins: usize,
    /// Groups with fewer calibration records use the pooled quantile.
    #[arg(long, default_value_t = DEFAULT_MIN_GROUP_SIZE)]
    min_group_size: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// JSON-Lines or CSV records with ground truth.
    #[arg(long)]
    input: PathBuf,
    /// Directory for report.json and the CSV tables.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1, value_parser = parse_alpha)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = DEFAULT_CAL_SIZE)]
    cal_size: usize,
    #[arg(long, value_enum, default_value_t = KindArg::Symmetric)]
    kind: KindArg,
    /// Sample the calibration set uniformly instead of equally per group.
    #[arg(long)]
    no_stratify: bool,
    #[command(flatten)]
    strata: StratumArgs,
    /// Number of confidence levels for ECE.
    #[arg(long, default_value_t = 19)]
    ece_levels: usize,
    #[arg(long)]
    allow_unbounded: bool,
    /// Clamp zero uncertainties to 1e-8 instead of rejecting them.
    #[arg(long)]
    clamp_zero: bool,
    /// Also write intervals.csv with one row per run, method and test record.
    #[arg(long)]
    intervals: bool,
    /// Also write splits.jsonl with the ids of every calibration/test split.
    #[arg(long)]
    emit_splits: bool,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    predict: PathBuf,
    /// Interval CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1, value_parser = parse_alpha)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = KindArg::Symmetric)]
    kind: KindArg,
    #[command(flatten)]
    strata: StratumArgs,
    /// Fail on groups without their own quantile instead of pooling.
    #[arg(long)]
    no_fallback: bool,
    #[arg(long)]
    allow_unbounded: bool,
    #[arg(long)]
    clamp_zero: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON experiment description; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_cal: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// JSON report to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV of per-trial coverages.
    #[arg(long)]
    trials_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitQuantileArgs {
    /// Training rows with feature columns and the target.
    #[arg(long)]
    train: PathBuf,
    /// Rows to emit records for; defaults to the training rows.
    #[arg(long)]
    apply: Option<PathBuf>,
    /// Comma-separated feature columns.
    #[arg(long, value_delimiter = ',', required = true)]
    features: Vec<String>,
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long, default_value_t = 0.1, value_parser = parse_alpha)]
    alpha: f64,
    /// Outer quantile miscoverage; defaults to alpha.
    #[arg(long, value_parser = parse_alpha)]
    tau: Option<f64>,
    /// Emit a single symmetric delta instead of delta_lo / delta_hi.
    #[arg(long)]
    symmetric: bool,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Text file for the fitted models.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// JSON-Lines records to write.
    #[arg(long)]
    out: PathBuf,
}

/// Apply `CONFFORGE_THREADS` to the global rayon pool.
fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // a pool that already exists (repeated calls within one process) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Evaluate(a) => {
            let config = EvaluateConfig {
                input: a.input,
                out_dir: a.out_dir,
                alpha: a.alpha,
                seed: a.seed,
                runs: a.runs,
                cal_size: a.cal_size,
                kind: a.kind.into(),
                stratify: !a.no_stratify,
                group_by: a.strata.group_by,
                bin_attr: a.strata.bin_attr,
                min_bin_size: a.strata.min_bin_size,
                max_bins: a.strata.max_bins,
                min_group_size: a.strata.min_group_size,
                ece_levels: a.ece_levels,
                allow_unbounded: a.allow_unbounded,
                clamp_zero: a.clamp_zero,
                write_intervals: a.intervals,
                emit_splits: a.emit_splits,
            };
            let evaluation = cmd_evaluate(&config)?;
            let report = &evaluation.report;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("{:<10} {:>9} {:>12}", "method", "coverage", "sharpness");
            for m in &report.summary {
                println!("{:<10} {:>9.4} {:>12.4}", m.method, m.mean_coverage, m.mean_sharpness.0);
            }
        }
        Command::Calibrate(a) => {
            let config = CalibrateConfig {
                calibration: a.calibration,
                predict: a.predict,
                out: a.out,
                alpha: a.alpha,
                kind: a.kind.into(),
                group_by: a.strata.group_by,
                bin_attr: a.strata.bin_attr,
                min_bin_size: a.strata.min_bin_size,
                max_bins: a.strata.max_bins,
                min_group_size: a.strata.min_group_size,
                fallback: !a.no_fallback,
                allow_unbounded: a.allow_unbounded,
                clamp_zero: a.clamp_zero,
            };
            let rows = cmd_calibrate_predict(&config)?;
            println!("wrote {} intervals to {}", rows.len(), config.out.display());
        }
        Command::Simulate(a) => {
            let mut synth = match &a.config {
                Some(p) => load_synth_config(p)?,
                None => Default::default(),
            };
            if let Some(v) = a.n_cal {
                synth.n_cal = v;
            }
            if let Some(v) = a.n_test {
                synth.n_test = v;
            }
            if let Some(v) = a.trials {
                synth.trials = v;
            }
            if let Some(v) = a.alpha {
                synth.alpha = v;
            }
            if let Some(v) = a.seed {
                synth.seed = v;
            }
            if let Some(v) = a.kind {
                synth.kind = v.into();
            }
            let config = SimulateConfig {
                synth,
                out: a.out,
                trials_csv: a.trials_csv,
            };
            let (report, _) = cmd_simulate(&config)?;
            println!(
                "mean coverage {:.5} (band [{:.5}, {:.5}], ci half-width {}) within band: {}",
                report.mean_coverage, report.coverage_band.0, report.coverage_band.1, report.ci_halfwidth, report.within_band
            );
        }
        Command::FitQuantile(a) => {
            let config = FitQuantileConfig {
                train: a.train,
                apply: a.apply,
                features: a.features,
                target: a.target,
                tau: a.tau.unwrap_or(a.alpha),
                symmetric: a.symmetric,
                train_config: TrainConfig {
                    lr: a.lr,
                    epochs: a.epochs,
                    batch: a.batch,
                    seed: a.seed,
                },
                model_out: a.model_out,
                out: Some(a.out),
            };
            let outcome = cmd_fit_quantile(&config)?;
            if outcome.crossings > 0 {
                eprintln!("warning: {} rows had crossing quantiles; deltas were clamped", outcome.crossings);
            }
            println!("wrote {} records", outcome.records.len());
        }
    }
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match init_threads().and_then(|_| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
