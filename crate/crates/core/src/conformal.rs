//! Split conformal prediction.
//!
//! Calibration scores `s_1..s_n` are sorted and the `m`-th smallest, with
//! `m = ceil((n + 1)(1 - alpha))`, becomes `q_hat`. When `m > n` the
//! quantile is `+inf` and every interval is unbounded. Test intervals are
//! exactly the sets `{y : s(x, y) <= q_hat}`, endpoints included.

use std::borrow::Borrow;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::record::RegressionRecord;
use crate::scores::{check_alpha, heuristics_of, ScoreKind};

/// Rank `ceil((n + 1)(1 - alpha))` of the conformal order statistic.
///
/// Products that land within 1e-9 (relative) of an integer are snapped to it
/// so decimal alphas like 0.7 do not pick up a spurious extra rank from
/// binary rounding (`10 * (1 - 0.7) = 3.0000000000000004`).
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let target = (n as f64 + 1.0) * (1.0 - alpha);
    let nearest = target.round();
    let m = if (target - nearest).abs() <= 1e-9 * target.max(1.0) {
        nearest
    } else {
        target.ceil()
    };
    (m as usize).max(1)
}

/// Smallest calibration size whose conformal quantile is finite at `alpha`.
pub fn min_finite_size(alpha: f64) -> usize {
    let mut n = 1usize;
    while conformal_rank(n, alpha) > n {
        n += 1;
    }
    n
}

/// The conformal quantile of non-negative scores; `+inf` when the rank
/// exceeds the number of scores.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if let Some(&bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::InvalidScore(bad));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_of_sorted(&sorted, alpha))
}

pub(crate) fn quantile_of_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let m = conformal_rank(sorted.len(), alpha);
    if m > sorted.len() {
        f64::INFINITY
    } else {
        sorted[m - 1]
    }
}

/// A closed confidence interval. `unbounded` is set iff an endpoint is
/// infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictionInterval {
    pub lo: f64,
    pub hi: f64,
    pub unbounded: bool,
}

impl PredictionInterval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval [{lo}, {hi}] is reversed");
        Self {
            lo,
            hi,
            unbounded: lo.is_infinite() || hi.is_infinite(),
        }
    }

    pub fn unbounded() -> Self {
        Self::new(f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Inclusive at both ends.
    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

fn check_q(q_hat: f64) -> Result<()> {
    if q_hat >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidScore(q_hat))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveDelta(delta))
    }
}

fn to_ordered(x: f64) -> i128 {
    let bits = x.to_bits() as i64;
    i128::from(if bits < 0 { i64::MIN - bits } else { bits })
}

fn from_ordered(o: i128) -> f64 {
    let o = o as i64;
    f64::from_bits((if o < 0 { i64::MIN - o } else { o }) as u64)
}

/// Outermost float in the direction `outward` (+1 upper end, -1 lower end)
/// accepted by `inside`, searched by bisection over the ordered bit
/// representation. `anchor` (the point prediction) must be inside and the
/// accepted set must be contiguous around it.
fn snap_endpoint(nominal: f64, anchor: f64, outward: i128, inside: impl Fn(f64) -> bool) -> f64 {
    if !nominal.is_finite() {
        return nominal;
    }
    let limit = to_ordered(if outward > 0 { f64::MAX } else { -f64::MAX });
    let start = to_ordered(nominal);
    let (mut good, mut bad) = if inside(nominal) {
        let mut good = start;
        let mut step = 1i128;
        loop {
            let cand = if outward > 0 { (start + step).min(limit) } else { (start - step).max(limit) };
            if !inside(from_ordered(cand)) {
                break (good, cand);
            }
            if cand == limit {
                return from_ordered(cand);
            }
            good = cand;
            step *= 2;
        }
    } else {
        let floor = to_ordered(anchor);
        let mut bad = start;
        let mut step = 1i128;
        loop {
            let cand = if outward > 0 { (start - step).max(floor) } else { (start + step).min(floor) };
            if cand == floor || inside(from_ordered(cand)) {
                break (cand, bad);
            }
            bad = cand;
            step *= 2;
        }
    };
    while (bad - good).abs() > 1 {
        let mid = good + (bad - good) / 2;
        if inside(from_ordered(mid)) {
            good = mid;
        } else {
            bad = mid;
        }
    }
    from_ordered(good)
}

/// `[y_hat - q_hat * delta, y_hat + q_hat * delta]`, with endpoints snapped
/// so that membership agrees exactly with `|y - y_hat| / delta <= q_hat`.
pub fn interval_symmetric(y_hat: f64, delta: f64, q_hat: f64) -> Result<PredictionInterval> {
    interval_asymmetric(y_hat, delta, delta, q_hat)
}

/// `[y_hat - q_hat * delta_lo, y_hat + q_hat * delta_hi]`, snapped like
/// [`interval_symmetric`].
pub fn interval_asymmetric(y_hat: f64, delta_lo: f64, delta_hi: f64, q_hat: f64) -> Result<PredictionInterval> {
    check_delta(delta_lo)?;
    check_delta(delta_hi)?;
    check_q(q_hat)?;
    if q_hat.is_infinite() {
        return Ok(PredictionInterval::unbounded());
    }
    let hi = snap_endpoint(y_hat + q_hat * delta_hi, y_hat, 1, |y| (y - y_hat) / delta_hi <= q_hat);
    let lo = snap_endpoint(y_hat - q_hat * delta_lo, y_hat, -1, |y| (y_hat - y) / delta_lo <= q_hat);
    Ok(PredictionInterval::new(lo, hi))
}

/// Non-conformity scores of labelled calibration records.
pub fn calibration_scores<R: Borrow<RegressionRecord>>(cal: &[R], alpha: f64, kind: ScoreKind) -> Result<Vec<f64>> {
    cal.iter()
        .map(|r| {
            let r = r.borrow();
            let y = r.truth()?;
            Ok(heuristics_of(r, alpha, kind)?.score(y))
        })
        .collect()
}

/// Fitted split-conformal state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformalCalibrator {
    pub alpha: f64,
    pub kind: ScoreKind,
    /// `+inf` when the calibration set is too small for `alpha`.
    pub q_hat: f64,
    pub n_cal: usize,
    /// Calibration scores, ascending.
    #[serde(skip)]
    pub scores: Vec<f64>,
}

impl ConformalCalibrator {
    pub fn from_scores(mut scores: Vec<f64>, alpha: f64, kind: ScoreKind) -> Result<Self> {
        check_alpha(alpha)?;
        if scores.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if let Some(&bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::InvalidScore(bad));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self {
            alpha,
            kind,
            q_hat: quantile_of_sorted(&scores, alpha),
            n_cal: scores.len(),
            scores,
        })
    }

    pub fn rank(&self) -> usize {
        conformal_rank(self.n_cal, self.alpha)
    }

    pub fn is_bounded(&self) -> bool {
        self.q_hat.is_finite()
    }

    pub fn predict(&self, record: &RegressionRecord) -> Result<PredictionInterval> {
        Ok(heuristics_of(record, self.alpha, self.kind)?.interval(self.q_hat))
    }

    pub fn score(&self, record: &RegressionRecord, y: f64) -> Result<f64> {
        Ok(heuristics_of(record, self.alpha, self.kind)?.score(y))
    }
}

/// Fit split conformal prediction on labelled calibration records.
pub fn fit_split<R: Borrow<RegressionRecord>>(cal: &[R], alpha: f64, kind: ScoreKind) -> Result<ConformalCalibrator> {
    check_alpha(alpha)?;
    if cal.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    ConformalCalibrator::from_scores(calibration_scores(cal, alpha, kind)?, alpha, kind)
}

pub fn predict(calibrator: &ConformalCalibrator, record: &RegressionRecord) -> Result<PredictionInterval> {
    calibrator.predict(record)
}
