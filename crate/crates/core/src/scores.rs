//! Uncertainty heuristics and non-conformity scores.
//!
//! Every uncertainty representation is reduced to either a symmetric
//! half-width `delta` or a pair `(delta_lo, delta_hi)` around the point
//! prediction. Scores are residuals normalised by those half-widths:
//!
//! - symmetric: `|y - y_hat| / delta`
//! - asymmetric: `(y - y_hat) / delta_hi` above the prediction,
//!   `(y_hat - y) / delta_lo` below it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conformal::{interval_asymmetric, interval_symmetric, PredictionInterval};
use crate::error::{Error, Result};
use crate::record::{RegressionRecord, UncertaintyEstimate, DELTA_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Symmetric,
    Asymmetric,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Symmetric => "symmetric",
            ScoreKind::Asymmetric => "asymmetric",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Arithmetic mean and unbiased (n - 1) standard deviation of a sample set.
pub fn samples_to_moments(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::EmptySamples(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, (ss / (n - 1) as f64).sqrt()))
}

/// Inverse of the standard normal CDF (Wichura's AS 241, PPND16).
///
/// Relative accuracy is about 1e-16 over the open unit interval; `p = 0`
/// and `p = 1` map to the infinities.
pub fn probit(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_4e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-libm::log(tail)).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_879e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Gaussian half-width covering the central `1 - alpha` mass:
/// `probit(1 - alpha / 2) * sigma`.
pub fn sigma_to_delta(sigma: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::NonPositiveDelta(sigma));
    }
    Ok(probit(1.0 - alpha / 2.0) * sigma)
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveDelta(delta))
    }
}

pub fn score_symmetric(y: f64, y_hat: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok((y - y_hat).abs() / delta)
}

pub fn score_asymmetric(y: f64, y_hat: f64, delta_lo: f64, delta_hi: f64) -> Result<f64> {
    check_delta(delta_lo)?;
    check_delta(delta_hi)?;
    Ok(if y >= y_hat {
        (y - y_hat) / delta_hi
    } else {
        (y_hat - y) / delta_lo
    })
}

/// A point prediction together with the half-width(s) used for scoring.
/// Deltas are always at least [`DELTA_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Heuristic {
    Symmetric { y_hat: f64, delta: f64 },
    Asymmetric { y_hat: f64, delta_lo: f64, delta_hi: f64 },
}

impl Heuristic {
    pub fn y_hat(&self) -> f64 {
        match *self {
            Heuristic::Symmetric { y_hat, .. } | Heuristic::Asymmetric { y_hat, .. } => y_hat,
        }
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            Heuristic::Symmetric { .. } => ScoreKind::Symmetric,
            Heuristic::Asymmetric { .. } => ScoreKind::Asymmetric,
        }
    }

    /// Scalar uncertainty used for binning: `delta`, or the mean of the two
    /// sides for asymmetric heuristics.
    pub fn spread(&self) -> f64 {
        match *self {
            Heuristic::Symmetric { delta, .. } => delta,
            Heuristic::Asymmetric { delta_lo, delta_hi, .. } => 0.5 * (delta_lo + delta_hi),
        }
    }

    pub fn score(&self, y: f64) -> f64 {
        // deltas are floored at construction, so the checks cannot fail
        match *self {
            Heuristic::Symmetric { y_hat, delta } => (y - y_hat).abs() / delta,
            Heuristic::Asymmetric { y_hat, delta_lo, delta_hi } => {
                if y >= y_hat {
                    (y - y_hat) / delta_hi
                } else {
                    (y_hat - y) / delta_lo
                }
            }
        }
    }

    /// The interval `{y : score(y) <= q_hat}`.
    pub fn interval(&self, q_hat: f64) -> PredictionInterval {
        match *self {
            Heuristic::Symmetric { y_hat, delta } => interval_symmetric(y_hat, delta, q_hat),
            Heuristic::Asymmetric { y_hat, delta_lo, delta_hi } => {
                interval_asymmetric(y_hat, delta_lo, delta_hi, q_hat)
            }
        }
        .expect("heuristic deltas are positive and q_hat is validated by callers")
    }
}

/// Reduce a record's uncertainty to a heuristic of the requested kind.
///
/// Samples collapse to their standard deviation and are then handled like
/// `Sigma`; the record's own `y_hat` stays the point prediction. Sigma is
/// converted with [`sigma_to_delta`] at `alpha`. A symmetric estimate under
/// the asymmetric kind uses the same delta on both sides.
pub fn heuristics_of(record: &RegressionRecord, alpha: f64, kind: ScoreKind) -> Result<Heuristic> {
    check_alpha(alpha)?;
    let y_hat = record.y_hat;
    let symmetric_delta = match &record.uncertainty {
        UncertaintyEstimate::Sigma(sigma) => Some(sigma_to_delta(*sigma, alpha)?),
        UncertaintyEstimate::Delta(delta) => Some(*delta),
        UncertaintyEstimate::Samples(values) => {
            let (_, sigma) = samples_to_moments(values)?;
            Some(probit(1.0 - alpha / 2.0) * sigma)
        }
        UncertaintyEstimate::Asymmetric { .. } => None,
    };
    match (kind, symmetric_delta, &record.uncertainty) {
        (ScoreKind::Symmetric, Some(delta), _) => Ok(Heuristic::Symmetric {
            y_hat,
            delta: delta.max(DELTA_FLOOR),
        }),
        (ScoreKind::Symmetric, None, _) => Err(Error::KindMismatch {
            id: record.id.clone(),
            kind: ScoreKind::Symmetric.as_str(),
        }),
        (ScoreKind::Asymmetric, Some(delta), _) => {
            let d = delta.max(DELTA_FLOOR);
            Ok(Heuristic::Asymmetric {
                y_hat,
                delta_lo: d,
                delta_hi: d,
            })
        }
        (ScoreKind::Asymmetric, None, UncertaintyEstimate::Asymmetric { lo, hi }) => {
            Ok(Heuristic::Asymmetric {
                y_hat,
                delta_lo: lo.max(DELTA_FLOOR),
                delta_hi: hi.max(DELTA_FLOOR),
            })
        }
        (ScoreKind::Asymmetric, None, _) => unreachable!("only asymmetric estimates lack a symmetric delta"),
    }
}

/// Gaussian sigma implied by a record, where one exists. `Delta` estimates
/// are read as central `1 - alpha` Gaussian half-widths.
pub fn gaussian_sigma(record: &RegressionRecord, alpha: f64) -> Result<f64> {
    match &record.uncertainty {
        UncertaintyEstimate::Sigma(s) => Ok(*s),
        UncertaintyEstimate::Delta(d) => {
            check_alpha(alpha)?;
            Ok(d / probit(1.0 - alpha / 2.0))
        }
        UncertaintyEstimate::Samples(v) => Ok(samples_to_moments(v)?.1),
        UncertaintyEstimate::Asymmetric { .. } => Err(Error::UnsupportedUncertainty(record.id.clone())),
    }
}
