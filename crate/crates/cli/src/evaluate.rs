//! Repeated split evaluation: raw heuristic, affine-recalibrated and
//! conformal intervals on each of `k` random calibration/test splits.

use std::collections::BTreeMap;
use std::path::PathBuf;

use confforge::conditional::{fit_grouped, partition_bins, BinPartition, BinSource, BinSpec};
use confforge::conformal::{fit_split, interval_symmetric, PredictionInterval};
use confforge::metrics::{
    affine_calibrate, ece, BinCoverage, CoverageCell, EvalReport, GaussianResiduals, QHatSummary, Real, RunMeta,
};
use confforge::record::{RegressionRecord, UncertaintyEstimate, ValidationOptions};
use confforge::scores::{gaussian_sigma, heuristics_of, sigma_to_delta, ScoreKind};
use confforge::split::{split_harness, SplitPlan};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::input::read_records;
use crate::output::{csv_line, write_json, FORMAT_VERSION};

/// Test sets smaller than this get a warning in the report.
pub const SMALL_TEST_WARNING: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateConfig {
    pub input: PathBuf,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    pub alpha: f64,
    pub seed: u64,
    pub runs: usize,
    pub cal_size: usize,
    pub kind: ScoreKind,
    pub stratify: bool,
    pub group_by: Option<String>,
    pub bin_attr: Option<BinSource>,
    pub min_bin_size: usize,
    pub max_bins: usize,
    pub min_group_size: usize,
    pub ece_levels: usize,
    pub allow_unbounded: bool,
    pub clamp_zero: bool,
    pub write_intervals: bool,
    pub emit_splits: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            out_dir: None,
            alpha: 0.1,
            seed: 0,
            runs: 10,
            cal_size: confforge::split::DEFAULT_CAL_SIZE,
            kind: ScoreKind::Symmetric,
            stratify: true,
            group_by: None,
            bin_attr: None,
            min_bin_size: confforge::conditional::DEFAULT_MIN_BIN_SIZE,
            max_bins: confforge::conditional::DEFAULT_MAX_BINS,
            min_group_size: confforge::conditional::DEFAULT_MIN_GROUP_SIZE,
            ece_levels: 19,
            allow_unbounded: false,
            clamp_zero: false,
            write_intervals: false,
            emit_splits: false,
        }
    }
}

/// Levels `i / (m + 1)` for `i = 1..=m`.
pub fn ece_levels(m: usize) -> Vec<f64> {
    (1..=m).map(|i| i as f64 / (m + 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionReport {
    pub source: String,
    pub assignment: &'static str,
    pub boundaries: Vec<f64>,
    pub bin_means: Vec<f64>,
    pub bin_counts: Vec<usize>,
    pub bin_quantiles: Vec<Real>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineReport {
    pub a: f64,
    pub b: f64,
    pub cal_ece_before: f64,
    pub cal_ece_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub n_cal: usize,
    pub n_test: usize,
    pub affine_fit: Option<AffineReport>,
    pub fallback_groups: Option<Vec<String>>,
    pub partition: Option<PartitionReport>,
    pub methods: Vec<EvalReport>,
}

/// Mean over runs; coverage tables are micro-averaged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_coverage: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub mean_sharpness: Real,
    pub mean_ece: Option<f64>,
    pub mean_q_hat: Option<QHatSummary>,
    pub per_group_coverage: BTreeMap<String, CoverageCell>,
    pub per_bin_coverage: Option<Vec<BinCoverage>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub format_version: &'static str,
    pub command: &'static str,
    pub config: EvaluateConfig,
    pub n_records: usize,
    pub warnings: Vec<String>,
    pub summary: Vec<MethodSummary>,
    pub runs: Vec<RunReport>,
}

impl EvaluationReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|m| m.method == name)
    }
}

/// One per-record interval row of the optional interval table.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub run: usize,
    pub method: &'static str,
    pub id: String,
    pub group: String,
    pub stratum: String,
    pub y: f64,
    pub interval: PredictionInterval,
}

pub struct Evaluation {
    pub report: EvaluationReport,
    pub plans: Vec<SplitPlan>,
    pub intervals: Vec<IntervalRow>,
}

fn validate(config: &EvaluateConfig) -> CliResult<()> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(CliError::Usage(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    if config.runs == 0 {
        return Err(CliError::Usage("--runs must be >= 1".into()));
    }
    if config.ece_levels == 0 {
        return Err(CliError::Usage("--ece-levels must be >= 1".into()));
    }
    if let Some(g) = &config.group_by {
        if g != "group" {
            return Err(CliError::Usage(format!(
                "--group-by supports only the record field `group`, got {g:?}"
            )));
        }
    }
    Ok(())
}

/// Run the evaluation and, if an output directory is configured, write the
/// report and tables into it.
pub fn cmd_evaluate(config: &EvaluateConfig) -> CliResult<Evaluation> {
    validate(config)?;
    let records = read_records(
        &config.input,
        &ValidationOptions {
            clamp_zero: config.clamp_zero,
            ..Default::default()
        },
    )?;
    let evaluation = evaluate_records(config, &records)?;
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &evaluation, &records, config)?;
    }
    Ok(evaluation)
}

pub fn evaluate_records(config: &EvaluateConfig, records: &[RegressionRecord]) -> CliResult<Evaluation> {
    validate(config)?;
    for r in records {
        r.truth()?;
        heuristics_of(r, config.alpha, config.kind)?;
    }
    let plans = split_harness(records, config.runs, config.cal_size, config.seed, config.stratify)?;
    let gaussian = records
        .iter()
        .all(|r| !matches!(r.uncertainty, UncertaintyEstimate::Asymmetric { .. }));
    let levels = ece_levels(config.ece_levels);
    let outcomes: Vec<RunOutcome> = plans
        .par_iter()
        .map(|plan| evaluate_run(config, records, plan, gaussian, &levels))
        .collect::<CliResult<_>>()?;

    let mut warnings = Vec::new();
    let n_test = records.len() - config.cal_size;
    if n_test < SMALL_TEST_WARNING {
        warnings.push(format!(
            "test set has only {n_test} records per run; coverage estimates are noisy"
        ));
    }
    if !gaussian {
        warnings.push("affine baseline skipped: asymmetric uncertainties have no Gaussian sigma".into());
    }
    for o in &outcomes {
        for w in &o.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
    }
    if !config.allow_unbounded {
        for o in &outcomes {
            for m in &o.report.methods {
                if m.sharpness.is_infinite() {
                    return Err(CliError::Numerical(format!(
                        "run {}: method `{}` produced unbounded intervals (calibration stratum too small for alpha {}); pass --allow-unbounded to keep them",
                        o.report.run, m.meta.method, config.alpha
                    )));
                }
            }
        }
    }

    let runs: Vec<RunReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let summary = summarize(&runs);
    let intervals = outcomes.into_iter().flat_map(|o| o.intervals).collect();
    Ok(Evaluation {
        report: EvaluationReport {
            format_version: FORMAT_VERSION,
            command: "evaluate",
            config: config.clone(),
            n_records: records.len(),
            warnings,
            summary,
            runs,
        },
        plans,
        intervals,
    })
}

struct RunOutcome {
    report: RunReport,
    warnings: Vec<String>,
    intervals: Vec<IntervalRow>,
}

fn evaluate_run(
    config: &EvaluateConfig,
    records: &[RegressionRecord],
    plan: &SplitPlan,
    gaussian: bool,
    levels: &[f64],
) -> CliResult<RunOutcome> {
    let (cal, test) = plan.select(records);
    let alpha = config.alpha;
    let kind = config.kind;
    let meta = |method: &str| RunMeta {
        method: method.to_string(),
        seed: config.seed,
        run: plan.run_index,
        runs: config.runs,
    };
    let mut warnings = Vec::new();
    let mut methods = Vec::new();
    let mut rows = Vec::new();
    let keep = config.write_intervals;
    let mut push_rows = |method: &'static str, strata: &[String], ivs: &[PredictionInterval]| {
        if keep {
            for ((r, s), iv) in test.iter().zip(strata).zip(ivs) {
                rows.push(IntervalRow {
                    run: plan.run_index,
                    method,
                    id: r.id.clone(),
                    group: r.group.clone(),
                    stratum: s.clone(),
                    y: r.y_true.unwrap_or(f64::NAN),
                    interval: *iv,
                });
            }
        }
    };
    let none: Vec<String> = vec![String::new(); test.len()];

    // Bins are fitted first so every method can report per-bin coverage.
    let partition = match &config.bin_attr {
        Some(source) => {
            let spec = BinSpec {
                min_bin_size: config.min_bin_size,
                max_bins: config.max_bins,
            };
            let p = partition_bins(&cal, source, &spec, alpha, kind)?;
            warnings.extend(p.warnings.iter().cloned());
            Some(p)
        }
        None => None,
    };
    let test_bins: Option<Vec<usize>> = match &partition {
        Some(p) => Some(test.iter().map(|r| p.assign(r)).collect::<confforge::Result<_>>()?),
        None => None,
    };
    let bins = test_bins.as_deref();
    let heuristics: Vec<_> = test
        .iter()
        .map(|r| heuristics_of(r, alpha, kind))
        .collect::<confforge::Result<_>>()?;

    let original: Vec<PredictionInterval> = heuristics.iter().map(|h| h.interval(1.0)).collect();
    let mut report = EvalReport::evaluate(meta("original"), alpha, &test, &original, bins)?;
    if gaussian {
        report = report.with_ece(ece(&test, levels, alpha)?);
    }
    methods.push(report);
    push_rows("original", &none, &original);

    let affine_fit = if gaussian {
        let fit = affine_calibrate(&cal, levels, alpha)?;
        let ivs: Vec<PredictionInterval> = test
            .iter()
            .map(|r| {
                let sigma = fit.apply(gaussian_sigma(r, alpha)?);
                interval_symmetric(r.y_hat, sigma_to_delta(sigma, alpha)?, 1.0)
            })
            .collect::<confforge::Result<_>>()?;
        let test_ece = GaussianResiduals::from_records(&test, alpha)?.ece_affine(levels, fit.a, fit.b)?;
        methods.push(EvalReport::evaluate(meta("affine"), alpha, &test, &ivs, bins)?.with_ece(test_ece));
        push_rows("affine", &none, &ivs);
        Some(AffineReport {
            a: fit.a,
            b: fit.b,
            cal_ece_before: fit.ece_before,
            cal_ece_after: fit.ece_after,
        })
    } else {
        None
    };

    let split = fit_split(&cal, alpha, kind)?;
    let ivs: Vec<PredictionInterval> = heuristics.iter().map(|h| h.interval(split.q_hat)).collect();
    methods.push(
        EvalReport::evaluate(meta("conformal"), alpha, &test, &ivs, bins)?
            .with_q_hat(QHatSummary::Single(Real(split.q_hat))),
    );
    push_rows("conformal", &none, &ivs);

    let fallback_groups = if config.group_by.is_some() {
        let g = fit_grouped(&cal, alpha, kind, config.min_group_size)?;
        let mut strata = Vec::with_capacity(test.len());
        let mut ivs = Vec::with_capacity(test.len());
        for (r, h) in test.iter().zip(&heuristics) {
            let (stratum, q) = g.quantile_for(&r.group)?;
            strata.push(stratum.to_string());
            ivs.push(h.interval(q));
        }
        let mut q: BTreeMap<String, Real> = g.quantiles.iter().map(|(k, v)| (k.clone(), Real(v.q_hat))).collect();
        if let Some(f) = g.fallback {
            q.insert(confforge::conditional::Stratum::Fallback.to_string(), Real(f));
        }
        methods.push(
            EvalReport::evaluate(meta("grouped"), alpha, &test, &ivs, bins)?.with_q_hat(QHatSummary::PerStratum(q)),
        );
        push_rows("grouped", &strata, &ivs);
        if !g.fallback_groups.is_empty() {
            warnings.push(format!(
                "groups {:?} have fewer than {} calibration records in some run and use the pooled quantile",
                g.fallback_groups, config.min_group_size
            ));
        }
        Some(g.fallback_groups)
    } else {
        None
    };

    let partition_report = match (&partition, &test_bins) {
        (Some(p), Some(tb)) => {
            let ivs: Vec<PredictionInterval> = heuristics
                .iter()
                .zip(tb)
                .map(|(h, &b)| h.interval(p.bin_quantiles[b]))
                .collect();
            let q = p
                .bin_quantiles
                .iter()
                .enumerate()
                .map(|(b, &q)| (b.to_string(), Real(q)))
                .collect();
            methods.push(
                EvalReport::evaluate(meta("mondrian"), alpha, &test, &ivs, bins)?
                    .with_q_hat(QHatSummary::PerStratum(q)),
            );
            let strata: Vec<String> = tb.iter().map(|b| b.to_string()).collect();
            push_rows("mondrian", &strata, &ivs);
            Some(partition_summary(p))
        }
        _ => None,
    };

    Ok(RunOutcome {
        report: RunReport {
            run: plan.run_index,
            seed: plan.seed,
            n_cal: cal.len(),
            n_test: test.len(),
            affine_fit,
            fallback_groups,
            partition: partition_report,
            methods,
        },
        warnings,
        intervals: rows,
    })
}

fn partition_summary(p: &BinPartition) -> PartitionReport {
    PartitionReport {
        source: p.source.label(),
        assignment: p.source.assignment_rule(),
        boundaries: p.boundaries.clone(),
        bin_means: p.bin_means.clone(),
        bin_counts: p.bin_counts.clone(),
        bin_quantiles: p.bin_quantiles.iter().map(|&q| Real(q)).collect(),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn mean_q_hat<'a>(reports: impl Iterator<Item = &'a EvalReport> + Clone) -> Option<QHatSummary> {
    let first = reports.clone().next()?.q_hat_summary.as_ref()?;
    match first {
        QHatSummary::Single(_) => Some(QHatSummary::Single(Real(mean(reports.filter_map(|r| {
            match &r.q_hat_summary {
                Some(QHatSummary::Single(q)) => Some(q.0),
                _ => None,
            }
        }))))),
        QHatSummary::PerStratum(_) => {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in reports {
                if let Some(QHatSummary::PerStratum(m)) = &r.q_hat_summary {
                    for (k, q) in m {
                        acc.entry(k.clone()).or_default().push(q.0);
                    }
                }
            }
            Some(QHatSummary::PerStratum(
                acc.into_iter().map(|(k, v)| (k, Real(mean(v.into_iter())))).collect(),
            ))
        }
    }
}

fn summarize(runs: &[RunReport]) -> Vec<MethodSummary> {
    let names: Vec<String> = runs[0].methods.iter().map(|m| m.meta.method.clone()).collect();
    names
        .into_iter()
        .enumerate()
        .map(|(i, method)| {
            let reports: Vec<&EvalReport> = runs.iter().map(|r| &r.methods[i]).collect();
            let mut per_group: BTreeMap<String, CoverageCell> = BTreeMap::new();
            let mut per_bin: BTreeMap<usize, CoverageCell> = BTreeMap::new();
            for r in &reports {
                for (g, c) in &r.per_group_coverage {
                    let merged = per_group.get(g).map_or(*c, |acc| acc.merge(c));
                    per_group.insert(g.clone(), merged);
                }
                for b in r.per_bin_coverage.iter().flatten() {
                    let c = CoverageCell::from_counts(b.covered, b.count);
                    let merged = per_bin.get(&b.bin).map_or(c, |acc| acc.merge(&c));
                    per_bin.insert(b.bin, merged);
                }
            }
            let has_bins = reports[0].per_bin_coverage.is_some();
            let coverages = reports.iter().map(|r| r.coverage);
            MethodSummary {
                mean_coverage: mean(coverages.clone()),
                min_coverage: coverages.clone().fold(f64::INFINITY, f64::min),
                max_coverage: coverages.fold(f64::NEG_INFINITY, f64::max),
                mean_sharpness: Real(mean(reports.iter().map(|r| r.sharpness))),
                mean_ece: reports[0]
                    .ece
                    .map(|_| mean(reports.iter().filter_map(|r| r.ece))),
                mean_q_hat: mean_q_hat(reports.iter().copied()),
                per_group_coverage: per_group,
                per_bin_coverage: has_bins.then(|| {
                    per_bin
                        .into_iter()
                        .map(|(bin, c)| BinCoverage {
                            bin,
                            coverage: c.coverage,
                            count: c.count,
                            covered: c.covered,
                        })
                        .collect()
                }),
                method,
            }
        })
        .collect()
}

fn write_outputs(
    dir: &std::path::Path,
    evaluation: &Evaluation,
    records: &[RegressionRecord],
    config: &EvaluateConfig,
) -> CliResult<()> {
    let report = &evaluation.report;
    write_json(&dir.join("report.json"), report)?;

    let mut groups = String::from("method,group,coverage,count,covered\n");
    let mut bins = String::from("method,bin,coverage,count,covered\n");
    for m in &report.summary {
        for (g, c) in &m.per_group_coverage {
            groups.push_str(&csv_line(&[&m.method, g, &c.coverage.to_string(), &c.count.to_string(), &c.covered.to_string()]));
        }
        for b in m.per_bin_coverage.iter().flatten() {
            bins.push_str(&csv_line(&[
                &m.method,
                &b.bin.to_string(),
                &b.coverage.to_string(),
                &b.count.to_string(),
                &b.covered.to_string(),
            ]));
        }
    }
    crate::input::write_bytes(&dir.join("per_group.csv"), groups.as_bytes())?;
    if config.bin_attr.is_some() {
        crate::input::write_bytes(&dir.join("per_bin.csv"), bins.as_bytes())?;
    }

    if config.write_intervals {
        let mut out = String::from("run,method,id,group,stratum,y,lo,hi,covered\n");
        for row in &evaluation.intervals {
            out.push_str(&csv_line(&[
                &row.run.to_string(),
                row.method,
                &row.id,
                &row.group,
                &row.stratum,
                &row.y.to_string(),
                &row.interval.lo.to_string(),
                &row.interval.hi.to_string(),
                &(row.interval.contains(row.y) as u8).to_string(),
            ]));
        }
        crate::input::write_bytes(&dir.join("intervals.csv"), out.as_bytes())?;
    }

    if config.emit_splits {
        let mut out = Vec::new();
        for plan in &evaluation.plans {
            let ids = |idx: &[usize]| idx.iter().map(|&i| records[i].id.as_str()).collect::<Vec<_>>();
            let line = serde_json::json!({
                "run": plan.run_index,
                "seed": plan.seed,
                "calibration": ids(&plan.calibration),
                "test": ids(&plan.test),
            });
            out.extend(line.to_string().bytes());
            out.push(b'\n');
        }
        crate::input::write_bytes(&dir.join("splits.jsonl"), &out)?;
    }
    Ok(())
}
