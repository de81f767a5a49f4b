//! Fit a calibrator on one file and write intervals for another.

use std::collections::BTreeSet;
use std::path::PathBuf;

use confforge::conditional::{fit_grouped, partition_bins, predict_conditional, BinSource, BinSpec, Calibrator};
use confforge::conformal::fit_split;
use confforge::record::{RegressionRecord, ValidationOptions};
use confforge::scores::ScoreKind;
use confforge::Error as CoreError;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::input::read_records;
use crate::output::write_csv;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrateConfig {
    pub calibration: PathBuf,
    pub predict: PathBuf,
    pub out: PathBuf,
    pub alpha: f64,
    pub kind: ScoreKind,
    pub group_by: Option<String>,
    pub bin_attr: Option<BinSource>,
    pub min_bin_size: usize,
    pub max_bins: usize,
    pub min_group_size: usize,
    pub fallback: bool,
    pub allow_unbounded: bool,
    pub clamp_zero: bool,
}

/// One output row.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRecord {
    pub id: String,
    pub group: String,
    pub y_hat: f64,
    pub lo: f64,
    pub hi: f64,
    pub q_hat: f64,
    /// Group, bin index, or empty for the pooled calibrator.
    pub stratum: String,
}

pub fn fit_calibrator(config: &CalibrateConfig, cal: &[RegressionRecord]) -> CliResult<Calibrator> {
    if config.group_by.is_some() && config.bin_attr.is_some() {
        return Err(CliError::Usage("--group-by and --bin-attr are mutually exclusive here".into()));
    }
    if let Some(g) = &config.group_by {
        if g != "group" {
            return Err(CliError::Usage(format!(
                "--group-by supports only the record field `group`, got {g:?}"
            )));
        }
        let mut fitted = fit_grouped(cal, config.alpha, config.kind, config.min_group_size)?;
        if !config.fallback {
            fitted = fitted.without_fallback();
        }
        return Ok(Calibrator::Grouped(fitted));
    }
    if let Some(source) = &config.bin_attr {
        let spec = BinSpec {
            min_bin_size: config.min_bin_size,
            max_bins: config.max_bins,
        };
        return Ok(Calibrator::Mondrian(partition_bins(cal, source, &spec, config.alpha, config.kind)?));
    }
    Ok(Calibrator::Split(fit_split(cal, config.alpha, config.kind)?))
}

pub fn predict_records(calibrator: &Calibrator, records: &[RegressionRecord]) -> CliResult<Vec<IntervalRecord>> {
    if let Calibrator::Grouped(g) = calibrator {
        if g.fallback.is_none() {
            let unknown: BTreeSet<&str> = records
                .iter()
                .map(|r| r.group.as_str())
                .filter(|grp| !g.quantiles.contains_key(*grp))
                .collect();
            if !unknown.is_empty() {
                return Err(CoreError::UnknownGroup(unknown.into_iter().map(String::from).collect()).into());
            }
        }
    }
    records
        .iter()
        .map(|r| {
            let (stratum, pred) = predict_conditional(calibrator, r)?;
            Ok(IntervalRecord {
                id: r.id.clone(),
                group: r.group.clone(),
                y_hat: r.y_hat,
                lo: pred.interval.lo,
                hi: pred.interval.hi,
                q_hat: pred.q_hat,
                stratum: stratum.map(|s| s.to_string()).unwrap_or_default(),
            })
        })
        .collect()
}

pub fn cmd_calibrate_predict(config: &CalibrateConfig) -> CliResult<Vec<IntervalRecord>> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(CliError::Usage(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    let opts = ValidationOptions {
        clamp_zero: config.clamp_zero,
        ..Default::default()
    };
    let cal = read_records(&config.calibration, &opts)?;
    let targets = read_records(&config.predict, &opts)?;
    let calibrator = fit_calibrator(config, &cal)?;
    let rows = predict_records(&calibrator, &targets)?;
    if !config.allow_unbounded {
        if let Some(r) = rows.iter().find(|r| r.q_hat.is_infinite()) {
            return Err(CliError::Numerical(format!(
                "record {:?} gets an unbounded interval (calibration stratum too small for alpha {}); pass --allow-unbounded to keep it",
                r.id, config.alpha
            )));
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                r.group.clone(),
                r.y_hat.to_string(),
                r.lo.to_string(),
                r.hi.to_string(),
                r.q_hat.to_string(),
                r.stratum.clone(),
            ]
        })
        .collect();
    write_csv(&config.out, &["id", "group", "y_hat", "lo", "hi", "q_hat", "stratum"], &table)?;
    Ok(rows)
}
