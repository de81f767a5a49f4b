//! Coverage, sharpness and calibration error of interval predictions, plus
//! the affine sigma recalibration baseline.

use std::borrow::Borrow;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::conformal::PredictionInterval;
use crate::error::{Error, Result};
use crate::record::RegressionRecord;
use crate::scores::{gaussian_sigma, probit};

/// Covered fraction and size of one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageCell {
    pub coverage: f64,
    pub count: usize,
    pub covered: usize,
}

impl CoverageCell {
    pub fn from_counts(covered: usize, count: usize) -> Self {
        Self {
            coverage: if count == 0 { f64::NAN } else { covered as f64 / count as f64 },
            count,
            covered,
        }
    }

    pub fn merge(&self, other: &CoverageCell) -> CoverageCell {
        CoverageCell::from_counts(self.covered + other.covered, self.count + other.count)
    }
}

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(Error::Empty);
    }
    Ok(())
}

/// Fraction of targets inside their interval (inclusive).
pub fn coverage(intervals: &[PredictionInterval], ys: &[f64]) -> Result<f64> {
    check_lengths(intervals.len(), ys.len())?;
    let covered = intervals.iter().zip(ys).filter(|(iv, y)| iv.contains(**y)).count();
    Ok(covered as f64 / ys.len() as f64)
}

/// Coverage within each key's subset. Keys are given per position.
pub fn conditional_coverage<K: Ord + Clone>(
    keys: &[K],
    intervals: &[PredictionInterval],
    ys: &[f64],
) -> Result<BTreeMap<K, CoverageCell>> {
    check_lengths(intervals.len(), ys.len())?;
    if keys.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: keys.len(),
            right: ys.len(),
        });
    }
    let mut counts: BTreeMap<K, (usize, usize)> = BTreeMap::new();
    for ((k, iv), y) in keys.iter().zip(intervals).zip(ys) {
        let e = counts.entry(k.clone()).or_default();
        e.1 += 1;
        if iv.contains(*y) {
            e.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(k, (covered, count))| (k, CoverageCell::from_counts(covered, count)))
        .collect())
}

/// Per-group coverage of labelled records.
pub fn coverage_by_group<R: Borrow<RegressionRecord>>(
    records: &[R],
    intervals: &[PredictionInterval],
) -> Result<BTreeMap<String, CoverageCell>> {
    let ys = truths(records)?;
    let keys: Vec<String> = records.iter().map(|r| r.borrow().group.clone()).collect();
    conditional_coverage(&keys, intervals, &ys)
}

pub(crate) fn truths<R: Borrow<RegressionRecord>>(records: &[R]) -> Result<Vec<f64>> {
    records.iter().map(|r| r.borrow().truth()).collect()
}

/// Mean interval width; `+inf` if any interval is unbounded.
pub fn sharpness(intervals: &[PredictionInterval]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::Empty);
    }
    if intervals.iter().any(|iv| iv.unbounded) {
        return Ok(f64::INFINITY);
    }
    Ok(intervals.iter().map(PredictionInterval::width).sum::<f64>() / intervals.len() as f64)
}

/// Confidence levels 0.05, 0.10, ..., 0.95.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Residual magnitudes and Gaussian sigmas of labelled records, the inputs
/// of [`ece`]. `alpha` is only used to read `Delta` estimates as sigmas.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianResiduals {
    pub abs_residuals: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl GaussianResiduals {
    pub fn from_records<R: Borrow<RegressionRecord>>(records: &[R], alpha: f64) -> Result<Self> {
        let mut abs_residuals = Vec::with_capacity(records.len());
        let mut sigmas = Vec::with_capacity(records.len());
        for r in records {
            let r = r.borrow();
            abs_residuals.push((r.truth()? - r.y_hat).abs());
            sigmas.push(gaussian_sigma(r, alpha)?);
        }
        Ok(Self { abs_residuals, sigmas })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// ECE with every sigma replaced by `a * sigma + b`.
    pub fn ece_affine(&self, levels: &[f64], a: f64, b: f64) -> Result<f64> {
        let table = LevelTable::new(levels)?;
        Ok(table.ece(&self.abs_residuals, &self.sigmas, a, b))
    }
}

struct LevelTable {
    /// (gamma, z) sorted by gamma ascending.
    levels: Vec<(f64, f64)>,
}

impl LevelTable {
    fn new(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(&bad) = levels.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(Error::InvalidConfig(format!("confidence level {bad} not in (0, 1)")));
        }
        let mut levels: Vec<(f64, f64)> = levels.iter().map(|&g| (g, probit((1.0 + g) / 2.0))).collect();
        levels.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { levels })
    }

    fn ece(&self, abs_residuals: &[f64], sigmas: &[f64], a: f64, b: f64) -> f64 {
        let m = self.levels.len();
        // hist[j] counts records first covered at level j (z ascending)
        let mut hist = vec![0usize; m + 1];
        for (r, s) in abs_residuals.iter().zip(sigmas) {
            let scale = a * s + b;
            let j = self.levels.partition_point(|(_, z)| !(*r <= z * scale));
            hist[j] += 1;
        }
        let n = abs_residuals.len() as f64;
        let mut covered = 0usize;
        let mut total = 0.0;
        for (j, (gamma, _)) in self.levels.iter().enumerate() {
            covered += hist[j];
            total += (covered as f64 / n - gamma).abs();
        }
        total / m as f64
    }
}

/// Expected calibration error over Gaussian central intervals:
/// the mean over levels `g` of `|acc(g) - g|`, where `acc(g)` is the
/// fraction of records with `|y - y_hat| <= probit((1 + g) / 2) * sigma`.
pub fn ece<R: Borrow<RegressionRecord>>(records: &[R], levels: &[f64], alpha: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty);
    }
    GaussianResiduals::from_records(records, alpha)?.ece_affine(levels, 1.0, 0.0)
}

/// Fitted affine map `sigma' = a * sigma + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    pub ece_before: f64,
    pub ece_after: f64,
}

impl AffineFit {
    pub fn apply(&self, sigma: f64) -> f64 {
        self.a * sigma + self.b
    }
}

const COARSE_A_POINTS: usize = 41;
const COARSE_B_POINTS: usize = 21;
const REFINE: usize = 10;
/// Half-width of the refinement window, in coarse steps.
const REFINE_SPAN: usize = 2;

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Grid point with the smallest (ece, a, b), compared lexicographically so
/// the result does not depend on evaluation order.
fn grid_min(table: &LevelTable, data: &GaussianResiduals, grid: &[(f64, f64)]) -> (f64, f64, f64) {
    grid.par_iter()
        .map(|&(a, b)| (table.ece(&data.abs_residuals, &data.sigmas, a, b), a, b))
        .min_by(|x, y| {
            x.0.total_cmp(&y.0)
                .then_with(|| x.1.total_cmp(&y.1))
                .then_with(|| x.2.total_cmp(&y.2))
        })
        .expect("grid is non-empty")
}

/// Search `a` log-spaced over [1e-2, 1e2] and `b` over [0, 2 * median |y - y_hat|],
/// then refine at ten times the resolution within two coarse steps of the
/// coarse optimum.
pub fn affine_calibrate_residuals(data: &GaussianResiduals, levels: &[f64]) -> Result<AffineFit> {
    if data.len() < 2 {
        return Err(Error::DegenerateInput("affine calibration needs at least 2 records".into()));
    }
    if data.abs_residuals.iter().all(|&r| r == 0.0) {
        return Err(Error::DegenerateInput("all residuals are zero".into()));
    }
    let table = LevelTable::new(levels)?;
    let b_max = 2.0 * median(&data.abs_residuals);
    let a_step = 4.0 / (COARSE_A_POINTS - 1) as f64;
    let b_step = b_max / (COARSE_B_POINTS - 1) as f64;

    let log_a = |i: usize| -2.0 + 4.0 * i as f64 / (COARSE_A_POINTS - 1) as f64;
    let b_at = |j: usize| b_max * j as f64 / (COARSE_B_POINTS - 1) as f64;
    let b_count = if b_max > 0.0 { COARSE_B_POINTS } else { 1 };
    let coarse: Vec<(f64, f64)> = (0..COARSE_A_POINTS)
        .flat_map(|i| (0..b_count).map(move |j| (libm::pow(10.0, log_a(i)), b_at(j))))
        .collect();
    let (_, a0, b0) = grid_min(&table, data, &coarse);

    let center = libm::log10(a0);
    let r = (REFINE * REFINE_SPAN) as i64;
    let mut fine = Vec::with_capacity((2 * r as usize + 1) * (2 * r as usize + 1) + 1);
    for k in -r..=r {
        let a = libm::pow(10.0, center + a_step * k as f64 / REFINE as f64);
        for l in -r..=r {
            let b = b0 + b_step * l as f64 / REFINE as f64;
            if b >= 0.0 && (b_count > 1 || l == 0) {
                fine.push((a, b));
            }
        }
    }
    fine.push((a0, b0));
    let (ece_after, a, b) = grid_min(&table, data, &fine);
    Ok(AffineFit {
        a,
        b,
        ece_before: table.ece(&data.abs_residuals, &data.sigmas, 1.0, 0.0),
        ece_after,
    })
}

/// Fit the ECE-minimising affine map on labelled calibration records.
pub fn affine_calibrate<R: Borrow<RegressionRecord>>(cal: &[R], levels: &[f64], alpha: f64) -> Result<AffineFit> {
    affine_calibrate_residuals(&GaussianResiduals::from_records(cal, alpha)?, levels)
}

/// A real that may be infinite. Serializes finite values as numbers and
/// infinities as the strings `"inf"` / `"-inf"`, since JSON has no literal
/// for them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Real(pub f64);

impl Serialize for Real {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_extended(&self.0, s)
    }
}

pub fn serialize_extended<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_none()
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// The conformal quantile(s) behind a set of intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum QHatSummary {
    Single(Real),
    PerStratum(BTreeMap<String, Real>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinCoverage {
    pub bin: usize,
    pub coverage: f64,
    pub count: usize,
    pub covered: usize,
}

/// Identifies the run an [`EvalReport`] belongs to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub method: String,
    pub seed: u64,
    pub run: usize,
    pub runs: usize,
}

/// Evaluation of one set of test intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub meta: RunMeta,
    pub alpha: f64,
    pub n_test: usize,
    pub covered: usize,
    pub coverage: f64,
    #[serde(serialize_with = "serialize_extended")]
    pub sharpness: f64,
    pub per_group_coverage: BTreeMap<String, CoverageCell>,
    pub per_bin_coverage: Option<Vec<BinCoverage>>,
    pub ece: Option<f64>,
    pub q_hat_summary: Option<QHatSummary>,
}

impl EvalReport {
    /// Score `intervals` against the truths of `test`. `bins` gives each
    /// test record's bin when a Mondrian partition was used.
    pub fn evaluate<R: Borrow<RegressionRecord>>(
        meta: RunMeta,
        alpha: f64,
        test: &[R],
        intervals: &[PredictionInterval],
        bins: Option<&[usize]>,
    ) -> Result<Self> {
        let ys = truths(test)?;
        check_lengths(intervals.len(), ys.len())?;
        let covered = intervals.iter().zip(&ys).filter(|(iv, y)| iv.contains(**y)).count();
        let per_bin_coverage = match bins {
            Some(b) => Some(
                conditional_coverage(b, intervals, &ys)?
                    .into_iter()
                    .map(|(bin, c)| BinCoverage {
                        bin,
                        coverage: c.coverage,
                        count: c.count,
                        covered: c.covered,
                    })
                    .collect(),
            ),
            None => None,
        };
        Ok(Self {
            meta,
            alpha,
            n_test: ys.len(),
            covered,
            coverage: covered as f64 / ys.len() as f64,
            sharpness: sharpness(intervals)?,
            per_group_coverage: coverage_by_group(test, intervals)?,
            per_bin_coverage,
            ece: None,
            q_hat_summary: None,
        })
    }

    pub fn with_ece(mut self, ece: f64) -> Self {
        self.ece = Some(ece);
        self
    }

    pub fn with_q_hat(mut self, summary: QHatSummary) -> Self {
        self.q_hat_summary = Some(summary);
        self
    }
}
