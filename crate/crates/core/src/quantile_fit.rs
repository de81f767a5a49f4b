//! Linear quantile regression trained on the pinball loss, and the
//! quantile-based interval heuristics built from three fitted levels.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::record::DELTA_FLOOR;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTau(tau))
    }
}

/// `(y_hat - y) * (1{y <= y_hat} - tau)`.
pub fn pinball_loss(y_hat: f64, y: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(pinball(y_hat, y, tau))
}

fn pinball(y_hat: f64, y: f64, tau: f64) -> f64 {
    let ind = if y <= y_hat { 1.0 } else { 0.0 };
    (y_hat - y) * (ind - tau)
}

/// Subgradient of the pinball loss in `y_hat`. At the kink the `y < y_hat`
/// branch is taken.
pub fn pinball_subgradient(y_hat: f64, y: f64, tau: f64) -> f64 {
    if y <= y_hat {
        1.0 - tau
    } else {
        -tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 200,
            batch: 256,
            seed: 0,
        }
    }
}

/// Per-feature centring and scaling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let dim = check_features(features)?;
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in features {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in features {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let first = features.first().ok_or(Error::Empty)?;
    let dim = first.len();
    for row in features {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
    }
    Ok(dim)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileModel {
    pub tau: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

const MODEL_HEADER: &str = "confforge-quantile-model v1";
const TRIPLE_HEADER: &str = "confforge-quantile-triple v1";

impl QuantileModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MODEL_HEADER}").unwrap();
        self.write_body(&mut out);
        out
    }

    fn write_body(&self, out: &mut String) {
        writeln!(out, "tau {:?}", self.tau).unwrap();
        writeln!(out, "dim {}", self.weights.len()).unwrap();
        writeln!(out, "weights{}", join(&self.weights)).unwrap();
        writeln!(out, "bias {:?}", self.bias).unwrap();
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        lines.expect_header(MODEL_HEADER)?;
        let model = Self::read_body(&mut lines)?;
        lines.expect_end()?;
        Ok(model)
    }

    fn read_body(lines: &mut Lines<'_>) -> Result<Self> {
        let tau = lines.scalar("tau")?;
        check_tau(tau)?;
        let dim = lines.scalar("dim")? as usize;
        let weights = lines.vector("weights")?;
        if weights.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: weights.len(),
            });
        }
        let bias = lines.scalar("bias")?;
        Ok(Self { tau, weights, bias })
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!(" {v:?}")).collect()
}

struct Lines<'a> {
    inner: std::iter::Filter<std::str::Lines<'a>, fn(&&str) -> bool>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        fn keep(l: &&str) -> bool {
            !l.trim().is_empty()
        }
        Self {
            inner: text.lines().filter(keep as fn(&&str) -> bool),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        self.inner
            .next()
            .map(str::trim)
            .ok_or_else(|| Error::ModelFormat("unexpected end of model text".into()))
    }

    fn expect_header(&mut self, header: &str) -> Result<()> {
        let line = self.next_line()?;
        if line == header {
            Ok(())
        } else {
            Err(Error::ModelFormat(format!("expected header {header:?}, found {line:?}")))
        }
    }

    fn expect_end(&mut self) -> Result<()> {
        match self.inner.next() {
            None => Ok(()),
            Some(extra) => Err(Error::ModelFormat(format!("trailing content {extra:?}"))),
        }
    }

    fn vector(&mut self, key: &str) -> Result<Vec<f64>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::ModelFormat(format!("expected `{key}`, found {line:?}")));
        }
        parts
            .map(|p| {
                p.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::ModelFormat(format!("bad number {p:?} in `{key}`")))
            })
            .collect()
    }

    fn scalar(&mut self, key: &str) -> Result<f64> {
        let v = self.vector(key)?;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::ModelFormat(format!("`{key}` takes one value"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileFit {
    pub model: QuantileModel,
    /// Mean training pinball loss after each epoch.
    pub loss_trace: Vec<f64>,
}

fn mean_loss(features: &[Vec<f64>], ys: &[f64], tau: f64, w: &[f64], b: f64) -> f64 {
    features
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let p = b + w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            pinball(p, *y, tau)
        })
        .sum::<f64>()
        / ys.len() as f64
}

/// Lower empirical `tau`-quantile, the pinball minimiser over constants.
fn empirical_quantile(ys: &[f64], tau: f64) -> f64 {
    let mut v = ys.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((tau * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// Train a linear `tau`-quantile model by mini-batch subgradient descent on
/// the pinball loss, starting from zero weights and the empirical
/// `tau`-quantile of `ys` as bias. The step size is `lr / sqrt(epoch)`; the returned
/// weights average the iterates of the final epoch.
pub fn fit_quantile(features: &[Vec<f64>], ys: &[f64], tau: f64, cfg: &TrainConfig) -> Result<QuantileFit> {
    check_tau(tau)?;
    let dim = check_features(features)?;
    if ys.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: ys.len(),
        });
    }
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("epochs, batch and lr must be positive".into()));
    }
    let n = ys.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut w = vec![0.0; dim];
    let mut b = empirical_quantile(ys, tau);
    let mut grad_w = vec![0.0; dim];
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut avg_w = vec![0.0; dim];
    let mut avg_b = 0.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr / (epoch as f64).sqrt();
        let last = epoch == cfg.epochs;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &i in chunk {
                let x = &features[i];
                let p = b + w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                let g = pinball_subgradient(p, ys[i], tau);
                for (gw, v) in grad_w.iter_mut().zip(x) {
                    *gw += g * v;
                }
                grad_b += g;
            }
            let scale = lr / chunk.len() as f64;
            for (wi, g) in w.iter_mut().zip(&grad_w) {
                *wi -= scale * g;
            }
            b -= scale * grad_b;
            if last {
                steps += 1;
                for (a, wi) in avg_w.iter_mut().zip(&w) {
                    *a += (wi - *a) / steps as f64;
                }
                avg_b += (b - avg_b) / steps as f64;
            }
        }
        let (lw, lb) = if last { (&avg_w[..], avg_b) } else { (&w[..], b) };
        let loss = mean_loss(features, ys, tau, lw, lb);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        loss_trace.push(loss);
    }
    Ok(QuantileFit {
        model: QuantileModel {
            tau,
            weights: avg_w,
            bias: avg_b,
        },
        loss_trace,
    })
}

/// Three quantile models at `tau / 2`, 0.5 and `1 - tau / 2`, sharing one
/// feature standardizer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileTriple {
    pub tau: f64,
    pub standardizer: Standardizer,
    pub lo: QuantileModel,
    pub med: QuantileModel,
    pub hi: QuantileModel,
}

/// Raw quantile predictions at the three levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantilePrediction {
    pub q_lo: f64,
    pub q_med: f64,
    pub q_hi: f64,
}

pub fn fit_triple(features: &[Vec<f64>], ys: &[f64], tau: f64, cfg: &TrainConfig) -> Result<QuantileTriple> {
    check_tau(tau)?;
    let standardizer = Standardizer::fit(features)?;
    let scaled: Vec<Vec<f64>> = features.iter().map(|r| standardizer.apply(r)).collect::<Result<_>>()?;
    let lo = fit_quantile(&scaled, ys, tau / 2.0, cfg)?.model;
    let med = fit_quantile(&scaled, ys, 0.5, cfg)?.model;
    let hi = fit_quantile(&scaled, ys, 1.0 - tau / 2.0, cfg)?.model;
    Ok(QuantileTriple {
        tau,
        standardizer,
        lo,
        med,
        hi,
    })
}

impl QuantileTriple {
    pub fn predict(&self, x: &[f64]) -> Result<QuantilePrediction> {
        let z = self.standardizer.apply(x)?;
        Ok(QuantilePrediction {
            q_lo: self.lo.predict(&z),
            q_med: self.med.predict(&z),
            q_hi: self.hi.predict(&z),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{TRIPLE_HEADER}").unwrap();
        writeln!(out, "tau {:?}", self.tau).unwrap();
        writeln!(out, "mean{}", join(&self.standardizer.mean)).unwrap();
        writeln!(out, "scale{}", join(&self.standardizer.scale)).unwrap();
        for (name, m) in [("lo", &self.lo), ("med", &self.med), ("hi", &self.hi)] {
            writeln!(out, "model {name}").unwrap();
            m.write_body(&mut out);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        lines.expect_header(TRIPLE_HEADER)?;
        let tau = lines.scalar("tau")?;
        check_tau(tau)?;
        let mean = lines.vector("mean")?;
        let scale = lines.vector("scale")?;
        if scale.len() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: scale.len(),
            });
        }
        let mut models = Vec::with_capacity(3);
        for name in ["lo", "med", "hi"] {
            let line = lines.next_line()?;
            if line != format!("model {name}") {
                return Err(Error::ModelFormat(format!("expected `model {name}`, found {line:?}")));
            }
            let m = QuantileModel::read_body(&mut lines)?;
            if m.weights.len() != mean.len() {
                return Err(Error::DimensionMismatch {
                    expected: mean.len(),
                    got: m.weights.len(),
                });
            }
            models.push(m);
        }
        lines.expect_end()?;
        let hi = models.pop().unwrap();
        let med = models.pop().unwrap();
        let lo = models.pop().unwrap();
        Ok(Self {
            tau,
            standardizer: Standardizer { mean, scale },
            lo,
            med,
            hi,
        })
    }
}

/// Non-symmetric quantile heuristic: the median is the point prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymmetricHeuristic {
    pub y_hat: f64,
    pub delta_lo: f64,
    pub delta_hi: f64,
    /// Set when the fitted quantiles crossed and a delta was clamped.
    pub crossing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetricHeuristic {
    pub y_hat: f64,
    pub delta: f64,
    pub crossing: bool,
}

pub fn qnt_heuristics_nonsym(q_lo: f64, q_med: f64, q_hi: f64) -> AsymmetricHeuristic {
    let up = q_hi - q_med;
    let down = q_med - q_lo;
    AsymmetricHeuristic {
        y_hat: q_med,
        delta_lo: down.max(DELTA_FLOOR),
        delta_hi: up.max(DELTA_FLOOR),
        crossing: up < DELTA_FLOOR || down < DELTA_FLOOR,
    }
}

pub fn qnt_heuristics_sym(q_lo: f64, q_hi: f64) -> SymmetricHeuristic {
    let half = (q_hi - q_lo) / 2.0;
    SymmetricHeuristic {
        y_hat: (q_lo + q_hi) / 2.0,
        delta: half.max(DELTA_FLOOR),
        crossing: half < DELTA_FLOOR,
    }
}
