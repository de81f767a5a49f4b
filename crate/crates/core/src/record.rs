//! Scored regression instances and their validation.
//!
//! A [`RegressionRecord`] is the reduced form of one evaluated input: the
//! point prediction, an optional ground truth, exactly one uncertainty
//! representation, a group label and a bag of continuous attributes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to zero uncertainties when clamping is enabled and
/// to every delta produced by the scoring layer.
pub const DELTA_FLOOR: f64 = 1e-8;

/// One uncertainty representation attached to a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyEstimate {
    /// Gaussian standard deviation; converted to a delta with the probit.
    Sigma(f64),
    /// Symmetric half-width used as-is (e.g. a symmetric quantile heuristic).
    Delta(f64),
    /// Left and right half-widths.
    Asymmetric { lo: f64, hi: f64 },
    /// Raw predictive samples (MC dropout passes, ensemble members).
    Samples(Vec<f64>),
}

impl UncertaintyEstimate {
    pub fn label(&self) -> &'static str {
        match self {
            UncertaintyEstimate::Sigma(_) => "sigma",
            UncertaintyEstimate::Delta(_) => "delta",
            UncertaintyEstimate::Asymmetric { .. } => "asymmetric",
            UncertaintyEstimate::Samples(_) => "samples",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRecord {
    pub id: String,
    /// Subgroup label such as a language pair. May be empty.
    pub group: String,
    pub y_true: Option<f64>,
    pub y_hat: f64,
    pub uncertainty: UncertaintyEstimate,
    pub attrs: BTreeMap<String, f64>,
}

impl RegressionRecord {
    pub fn new(id: impl Into<String>, y_hat: f64, uncertainty: UncertaintyEstimate) -> Self {
        Self {
            id: id.into(),
            group: String::new(),
            y_true: None,
            y_hat,
            uncertainty,
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_truth(mut self, y: f64) -> Self {
        self.y_true = Some(y);
        self
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = group.into();
        self
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: f64) -> Self {
        self.attrs.insert(name.into(), value);
        self
    }

    /// Ground truth, or an error naming the record.
    pub fn truth(&self) -> Result<f64> {
        self.y_true.ok_or_else(|| Error::MissingGroundTruth(self.id.clone()))
    }
}

/// Record fields as parsed from one input row, before validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    pub y_hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attrs: Option<BTreeMap<String, f64>>,
}

impl From<&RegressionRecord> for RawRecord {
    fn from(r: &RegressionRecord) -> Self {
        let mut raw = RawRecord {
            id: Some(r.id.clone()),
            group: (!r.group.is_empty()).then(|| r.group.clone()),
            y: r.y_true,
            y_hat: r.y_hat,
            attrs: (!r.attrs.is_empty()).then(|| r.attrs.clone()),
            ..Default::default()
        };
        match &r.uncertainty {
            UncertaintyEstimate::Sigma(s) => raw.sigma = Some(*s),
            UncertaintyEstimate::Delta(d) => raw.delta = Some(*d),
            UncertaintyEstimate::Asymmetric { lo, hi } => {
                raw.delta_lo = Some(*lo);
                raw.delta_hi = Some(*hi);
            }
            UncertaintyEstimate::Samples(v) => raw.samples = Some(v.clone()),
        }
        raw
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    /// Clamp zero sigma / zero-zero delta pairs to `floor` instead of rejecting.
    pub clamp_zero: bool,
    pub floor: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            clamp_zero: false,
            floor: DELTA_FLOOR,
        }
    }
}

fn finite(id: &str, field: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            id: id.to_string(),
            field: field.to_string(),
        })
    }
}

/// Turn a parsed row into a well-formed record. `fallback_id` names rows
/// that carry no explicit id (typically the 1-based line number).
pub fn validate_record(
    raw: RawRecord,
    fallback_id: &str,
    opts: &ValidationOptions,
) -> Result<RegressionRecord> {
    let id = raw.id.unwrap_or_else(|| fallback_id.to_string());

    let y_hat = finite(&id, "y_hat", raw.y_hat)?;
    let y_true = raw.y.map(|y| finite(&id, "y", y)).transpose()?;
    let attrs = raw.attrs.unwrap_or_default();
    for (name, v) in &attrs {
        finite(&id, &format!("attrs.{name}"), *v)?;
    }

    // An asymmetric pair counts as one representation even when only one
    // side is given; the missing side is then reported as non-finite.
    let has_pair = raw.delta_lo.is_some() || raw.delta_hi.is_some();
    let found = usize::from(raw.sigma.is_some())
        + usize::from(raw.delta.is_some())
        + usize::from(has_pair)
        + usize::from(raw.samples.is_some());
    if found != 1 {
        return Err(Error::MissingUncertainty { id, found });
    }

    let uncertainty = if let Some(sigma) = raw.sigma {
        let sigma = finite(&id, "sigma", sigma)?;
        UncertaintyEstimate::Sigma(positive(&id, sigma, opts)?)
    } else if let Some(delta) = raw.delta {
        let delta = finite(&id, "delta", delta)?;
        UncertaintyEstimate::Delta(positive(&id, delta, opts)?)
    } else if has_pair {
        let lo = finite(&id, "delta_lo", raw.delta_lo.unwrap_or(f64::NAN))?;
        let hi = finite(&id, "delta_hi", raw.delta_hi.unwrap_or(f64::NAN))?;
        if lo < 0.0 || hi < 0.0 {
            return Err(Error::NegativeDelta { id, lo, hi });
        }
        if lo == 0.0 && hi == 0.0 {
            if !opts.clamp_zero {
                return Err(Error::NonPositiveSigma { id, value: 0.0 });
            }
            UncertaintyEstimate::Asymmetric {
                lo: opts.floor,
                hi: opts.floor,
            }
        } else {
            UncertaintyEstimate::Asymmetric { lo, hi }
        }
    } else {
        let samples = raw.samples.unwrap_or_default();
        for v in &samples {
            finite(&id, "samples", *v)?;
        }
        if samples.len() < 2 {
            return Err(Error::EmptySamples(samples.len()));
        }
        UncertaintyEstimate::Samples(samples)
    };

    Ok(RegressionRecord {
        id,
        group: raw.group.unwrap_or_default(),
        y_true,
        y_hat,
        uncertainty,
        attrs,
    })
}

fn positive(id: &str, v: f64, opts: &ValidationOptions) -> Result<f64> {
    if v > 0.0 {
        Ok(v)
    } else if v == 0.0 && opts.clamp_zero {
        Ok(opts.floor)
    } else {
        Err(Error::NonPositiveSigma {
            id: id.to_string(),
            value: v,
        })
    }
}
