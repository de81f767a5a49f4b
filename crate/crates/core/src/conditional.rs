//! Equalized coverage: per-group quantiles for discrete attributes and
//! Mondrian (binned) quantiles for continuous ones.
//!
//! Each group or bin gets its own conformal quantile computed only from its
//! calibration members, so coverage holds within every stratum and not just
//! on average.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conformal::{
    calibration_scores, conformal_quantile, conformal_rank, min_finite_size, ConformalCalibrator, PredictionInterval,
};
use crate::error::{Error, Result};
use crate::record::RegressionRecord;
use crate::scores::{check_alpha, heuristics_of, Heuristic, ScoreKind};

/// Default minimum number of calibration records per bin.
pub const DEFAULT_MIN_BIN_SIZE: usize = 200;
/// Default cap on the number of bins.
pub const DEFAULT_MAX_BINS: usize = 20;
/// Default minimum group size before falling back to the pooled quantile.
pub const DEFAULT_MIN_GROUP_SIZE: usize = 50;

/// Quantile and calibration count of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupQuantile {
    pub q_hat: f64,
    pub n_cal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupedCalibrator {
    pub alpha: f64,
    pub kind: ScoreKind,
    /// Groups large enough to carry their own quantile.
    pub quantiles: BTreeMap<String, GroupQuantile>,
    /// Pooled quantile for small or unseen groups; `None` disables fallback.
    pub fallback: Option<f64>,
    /// Calibration groups smaller than the minimum size, served by the fallback.
    pub fallback_groups: Vec<String>,
    pub min_group_size: usize,
}

/// Which quantile served a prediction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Stratum {
    Group(String),
    Fallback,
    Bin(usize),
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stratum::Group(g) => f.write_str(g),
            Stratum::Fallback => f.write_str("*pooled*"),
            Stratum::Bin(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionalPrediction {
    pub interval: PredictionInterval,
    pub q_hat: f64,
}

impl GroupedCalibrator {
    pub fn without_fallback(mut self) -> Self {
        self.fallback = None;
        self
    }

    /// The quantile a record of `group` is served with.
    pub fn quantile_for(&self, group: &str) -> Result<(Stratum, f64)> {
        if let Some(g) = self.quantiles.get(group) {
            return Ok((Stratum::Group(group.to_string()), g.q_hat));
        }
        match self.fallback {
            Some(q) => Ok((Stratum::Fallback, q)),
            None => Err(Error::UnknownGroup(vec![group.to_string()])),
        }
    }

    pub fn predict(&self, record: &RegressionRecord) -> Result<ConditionalPrediction> {
        let (_, q_hat) = self.quantile_for(&record.group)?;
        let h = heuristics_of(record, self.alpha, self.kind)?;
        Ok(ConditionalPrediction {
            interval: h.interval(q_hat),
            q_hat,
        })
    }
}

/// Fit one conformal quantile per group. Groups with fewer than
/// `min_group_size` calibration records use the pooled quantile instead.
pub fn fit_grouped<R: Borrow<RegressionRecord>>(
    cal: &[R],
    alpha: f64,
    kind: ScoreKind,
    min_group_size: usize,
) -> Result<GroupedCalibrator> {
    check_alpha(alpha)?;
    if cal.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let scores = calibration_scores(cal, alpha, kind)?;
    let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (r, s) in cal.iter().zip(&scores) {
        by_group.entry(r.borrow().group.as_str()).or_default().push(*s);
    }
    let pooled = conformal_quantile(&scores, alpha)?;
    let mut quantiles = BTreeMap::new();
    let mut fallback_groups = Vec::new();
    for (group, group_scores) in by_group {
        if group_scores.len() < min_group_size {
            fallback_groups.push(group.to_string());
            continue;
        }
        quantiles.insert(
            group.to_string(),
            GroupQuantile {
                q_hat: conformal_quantile(&group_scores, alpha)?,
                n_cal: group_scores.len(),
            },
        );
    }
    Ok(GroupedCalibrator {
        alpha,
        kind,
        quantiles,
        fallback: Some(pooled),
        fallback_groups,
        min_group_size,
    })
}

/// Variable a Mondrian partition is built over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinSource {
    /// Ground-truth quality on calibration; test records are assigned by
    /// their prediction's distance to each bin's mean quality.
    GroundTruthQuality,
    /// The record's scoring half-width (mean of both sides if asymmetric).
    PredictedUncertainty,
    /// A named entry of the record's `attrs`.
    NamedAttr(String),
}

impl BinSource {
    pub fn label(&self) -> String {
        match self {
            BinSource::GroundTruthQuality => "quality".to_string(),
            BinSource::PredictedUncertainty => "uncertainty".to_string(),
            BinSource::NamedAttr(name) => format!("attr:{name}"),
        }
    }

    /// How test records are matched to bins, for reports.
    pub fn assignment_rule(&self) -> &'static str {
        match self {
            BinSource::GroundTruthQuality => "assignment via prediction (nearest bin mean)",
            _ => "assignment by value",
        }
    }

    fn calibration_value(&self, record: &RegressionRecord, h: &Heuristic) -> Result<f64> {
        match self {
            BinSource::GroundTruthQuality => record.truth(),
            BinSource::PredictedUncertainty => Ok(h.spread()),
            BinSource::NamedAttr(name) => attr(record, name),
        }
    }
}

fn attr(record: &RegressionRecord, name: &str) -> Result<f64> {
    record.attrs.get(name).copied().ok_or_else(|| Error::MissingAttribute {
        id: record.id.clone(),
        attribute: name.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinSpec {
    pub min_bin_size: usize,
    pub max_bins: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            min_bin_size: DEFAULT_MIN_BIN_SIZE,
            max_bins: DEFAULT_MAX_BINS,
        }
    }
}

/// A fitted Mondrian partition of the calibration set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinPartition {
    pub alpha: f64,
    pub kind: ScoreKind,
    pub source: BinSource,
    /// Cut points between adjacent bins, strictly increasing. Bin `b` covers
    /// `[boundaries[b-1], boundaries[b])`; the outer bins extend to infinity.
    pub boundaries: Vec<f64>,
    /// Mean of the binning variable within each bin.
    pub bin_means: Vec<f64>,
    pub bin_quantiles: Vec<f64>,
    pub bin_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Bin sizes for `n` sorted records. Without the cap every bin holds
/// `min_bin_size` and the last bin absorbs the remainder; when the cap binds,
/// bins hold `n / max_bins` with the last one again taking the remainder.
pub fn bin_sizes(n: usize, spec: &BinSpec) -> Vec<usize> {
    let natural = n / spec.min_bin_size;
    let bins = natural.min(spec.max_bins.max(1));
    if bins == 0 {
        return Vec::new();
    }
    let per_bin = if bins < natural { n / bins } else { spec.min_bin_size };
    let mut sizes = vec![per_bin; bins];
    sizes[bins - 1] += n - per_bin * bins;
    sizes
}

/// Sort calibration records by the binning variable, cut them into
/// equal-count bins, and fit a conformal quantile inside each bin.
pub fn partition_bins<R: Borrow<RegressionRecord>>(
    cal: &[R],
    source: &BinSource,
    spec: &BinSpec,
    alpha: f64,
    kind: ScoreKind,
) -> Result<BinPartition> {
    check_alpha(alpha)?;
    let need = min_finite_size(alpha);
    if spec.min_bin_size < need {
        return Err(Error::MinBinTooSmall {
            min_bin_size: spec.min_bin_size,
            alpha,
            need,
        });
    }
    if cal.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let n = cal.len();
    if n < spec.min_bin_size {
        return Err(Error::InsufficientData(format!(
            "{n} calibration records cannot fill one bin of {}",
            spec.min_bin_size
        )));
    }

    let mut rows: Vec<(f64, f64)> = cal
        .iter()
        .map(|r| {
            let r = r.borrow();
            let y = r.truth()?;
            let h = heuristics_of(r, alpha, kind)?;
            Ok((source.calibration_value(r, &h)?, h.score(y)))
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut warnings = Vec::new();
    if n < 2 * spec.min_bin_size {
        warnings.push(format!(
            "only {n} calibration records for min_bin_size {}: using a single bin",
            spec.min_bin_size
        ));
    }

    // A cut inside a run of tied values moves forward to the end of the run;
    // if that leaves too few records for another bin, the tail is merged.
    let sizes = bin_sizes(n, spec);
    let mut cuts = Vec::new();
    let mut boundaries = Vec::new();
    let mut start = 0;
    for size in &sizes[..sizes.len() - 1] {
        let mut pos = start + size;
        while pos < n && rows[pos - 1].0 == rows[pos].0 {
            pos += 1;
        }
        if n - pos < spec.min_bin_size {
            break;
        }
        cuts.push(pos);
        let (below, above) = (rows[pos - 1].0, rows[pos].0);
        let mid = 0.5 * (below + above);
        boundaries.push(if mid > below { mid } else { above });
        start = pos;
    }
    if cuts.len() + 1 < sizes.len() {
        warnings.push(format!(
            "tied attribute values reduced {} bins to {}",
            sizes.len(),
            cuts.len() + 1
        ));
    }

    let mut bin_means = Vec::new();
    let mut bin_quantiles = Vec::new();
    let mut bin_counts = Vec::new();
    let mut start = 0;
    for end in cuts.iter().copied().chain(std::iter::once(n)) {
        let members = &rows[start..end];
        let scores: Vec<f64> = members.iter().map(|r| r.1).collect();
        bin_means.push(members.iter().map(|r| r.0).sum::<f64>() / members.len() as f64);
        bin_quantiles.push(conformal_quantile(&scores, alpha)?);
        bin_counts.push(members.len());
        start = end;
    }

    Ok(BinPartition {
        alpha,
        kind,
        source: source.clone(),
        boundaries,
        bin_means,
        bin_quantiles,
        bin_counts,
        warnings,
    })
}

impl BinPartition {
    pub fn n_bins(&self) -> usize {
        self.bin_counts.len()
    }

    /// Bin whose mean is nearest to `y_hat`; ties go to the lower index.
    pub fn assign_bin_by_mean(&self, y_hat: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (b, mean) in self.bin_means.iter().enumerate() {
            let d = (y_hat - mean).abs();
            if d < best_dist {
                best = b;
                best_dist = d;
            }
        }
        best
    }

    /// Bin whose `[lo, hi)` range contains `value`, clamped at both ends.
    pub fn assign_bin_by_value(&self, value: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= value)
    }

    /// Bin a test record falls into under this partition's source.
    pub fn assign(&self, record: &RegressionRecord) -> Result<usize> {
        Ok(match &self.source {
            BinSource::GroundTruthQuality => self.assign_bin_by_mean(record.y_hat),
            BinSource::PredictedUncertainty => {
                self.assign_bin_by_value(heuristics_of(record, self.alpha, self.kind)?.spread())
            }
            BinSource::NamedAttr(name) => self.assign_bin_by_value(attr(record, name)?),
        })
    }

    pub fn predict(&self, record: &RegressionRecord) -> Result<(usize, ConditionalPrediction)> {
        let bin = self.assign(record)?;
        let q_hat = self.bin_quantiles[bin];
        let h = heuristics_of(record, self.alpha, self.kind)?;
        Ok((
            bin,
            ConditionalPrediction {
                interval: h.interval(q_hat),
                q_hat,
            },
        ))
    }
}

/// Any fitted calibrator, for uniform prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator {
    Split(ConformalCalibrator),
    Grouped(GroupedCalibrator),
    Mondrian(BinPartition),
}

impl Calibrator {
    pub fn alpha(&self) -> f64 {
        match self {
            Calibrator::Split(c) => c.alpha,
            Calibrator::Grouped(c) => c.alpha,
            Calibrator::Mondrian(c) => c.alpha,
        }
    }
}

/// Predict with whichever calibrator is given, reporting the stratum used.
pub fn predict_conditional(
    calibrator: &Calibrator,
    record: &RegressionRecord,
) -> Result<(Option<Stratum>, ConditionalPrediction)> {
    match calibrator {
        Calibrator::Split(c) => Ok((
            None,
            ConditionalPrediction {
                interval: c.predict(record)?,
                q_hat: c.q_hat,
            },
        )),
        Calibrator::Grouped(c) => {
            let (stratum, _) = c.quantile_for(&record.group)?;
            Ok((Some(stratum), c.predict(record)?))
        }
        Calibrator::Mondrian(p) => {
            let (bin, pred) = p.predict(record)?;
            Ok((Some(Stratum::Bin(bin)), pred))
        }
    }
}

/// Finite-quantile check for a bin of `size` at `alpha`.
pub fn bin_quantile_is_finite(size: usize, alpha: f64) -> bool {
    conformal_rank(size, alpha) <= size
}
