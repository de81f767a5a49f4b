//! Exchangeable synthetic data and Monte Carlo coverage experiments.
//!
//! Each record draws a latent covariate `x ~ U(0, 1)` and a group, then
//!
//! ```text
//! y      = f(x) + noise * sigma_true(x)
//! y_hat  = f(x) + bias
//! sigma  = misreport * sigma_true(x) ^ misreport_power
//! ```
//!
//! Records are i.i.d. within a trial, so any calibration/test split is
//! exchangeable.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditional::{fit_grouped, partition_bins, BinSource, BinSpec, Calibrator};
use crate::conformal::fit_split;
use crate::error::{Error, Result};
use crate::record::{RegressionRecord, UncertaintyEstimate};
use crate::scores::{check_alpha, heuristics_of, ScoreKind};
use crate::split::derive_seed;

/// `sigma_true` as a function of the latent covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    Constant(f64),
    /// `base + slope * x`.
    Linear { base: f64, slope: f64 },
}

impl NoiseScale {
    pub fn at(&self, x: f64) -> f64 {
        match *self {
            NoiseScale::Constant(s) => s,
            NoiseScale::Linear { base, slope } => base + slope * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseShape {
    Gaussian,
    /// Student-t with `df` degrees of freedom, scaled to unit variance.
    StudentT { df: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupSpec {
    pub name: String,
    /// Relative frequency of the group.
    pub weight: f64,
    /// `f(x) = slope * x + intercept`.
    pub slope: f64,
    pub intercept: f64,
    pub noise: NoiseScale,
    pub shape: NoiseShape,
    pub bias: f64,
    pub misreport: f64,
    pub misreport_power: f64,
}

impl Default for GroupSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            weight: 1.0,
            slope: 1.0,
            intercept: 0.0,
            noise: NoiseScale::Constant(1.0),
            shape: NoiseShape::Gaussian,
            bias: 0.0,
            misreport: 1.0,
            misreport_power: 1.0,
        }
    }
}

impl GroupSpec {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMethod {
    Split,
    Grouped { min_group_size: usize },
    Mondrian { source: BinSource, min_bin_size: usize, max_bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cal: usize,
    pub n_test: usize,
    pub trials: usize,
    pub alpha: f64,
    pub seed: u64,
    pub kind: ScoreKind,
    pub method: ExperimentMethod,
    pub groups: Vec<GroupSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cal: 999,
            n_test: 1000,
            trials: 1000,
            alpha: 0.1,
            seed: 0,
            kind: ScoreKind::Symmetric,
            method: ExperimentMethod::Split,
            groups: vec![GroupSpec::default()],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.n_cal == 0 || self.n_test == 0 || self.trials == 0 {
            return Err(Error::InvalidConfig("n_cal, n_test and trials must be >= 1".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::InvalidConfig("at least one group is required".into()));
        }
        for g in &self.groups {
            if !(g.weight > 0.0) || !(g.misreport > 0.0) || !g.misreport_power.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "group {:?}: weight and misreport must be > 0",
                    g.name
                )));
            }
            if let NoiseShape::StudentT { df } = g.shape {
                if !(df > 2.0) {
                    return Err(Error::InvalidConfig(format!("group {:?}: Student-t df must be > 2", g.name)));
                }
            }
            for x in [0.0, 1.0] {
                if !(g.noise.at(x) > 0.0) {
                    return Err(Error::InvalidConfig(format!("group {:?}: noise scale must stay > 0", g.name)));
                }
            }
        }
        Ok(())
    }
}

/// Draw `n_cal + n_test` i.i.d. records for one trial. The first `n_cal`
/// serve as calibration data. Each record carries its latent covariate as
/// attribute `x`.
pub fn gen_heteroscedastic(config: &SynthConfig, trial_index: usize) -> Vec<RegressionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, trial_index as u64));
    let total_weight: f64 = config.groups.iter().map(|g| g.weight).sum();
    let students: Vec<Option<(StudentT<f64>, f64)>> = config
        .groups
        .iter()
        .map(|g| match g.shape {
            NoiseShape::Gaussian => None,
            NoiseShape::StudentT { df } => {
                Some((StudentT::new(df).expect("df validated"), ((df - 2.0) / df).sqrt()))
            }
        })
        .collect();
    let n = config.n_cal + config.n_test;
    (0..n)
        .map(|i| {
            let mut pick = rng.random::<f64>() * total_weight;
            let mut gi = config.groups.len() - 1;
            for (j, g) in config.groups.iter().enumerate() {
                if pick < g.weight {
                    gi = j;
                    break;
                }
                pick -= g.weight;
            }
            let g = &config.groups[gi];
            let x: f64 = rng.random();
            let sigma_true = g.noise.at(x);
            let z: f64 = match &students[gi] {
                None => StandardNormal.sample(&mut rng),
                Some((t, unit)) => t.sample(&mut rng) * unit,
            };
            let f = g.slope * x + g.intercept;
            let sigma = g.misreport * sigma_true.powf(g.misreport_power);
            RegressionRecord::new(format!("t{trial_index}-{i}"), f + g.bias, UncertaintyEstimate::Sigma(sigma))
                .with_truth(f + z * sigma_true)
                .with_group(g.name.clone())
                .with_attr("x", x)
        })
        .collect()
}

/// Covered and total counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub covered: usize,
    pub count: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.count += 1;
        self.covered += usize::from(hit);
    }

    fn merge(&mut self, other: &Tally) {
        self.count += other.count;
        self.covered += other.covered;
    }

    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub coverage: f64,
    /// Coverage of the raw heuristic intervals (`q_hat = 1`) on the same test set.
    pub original_coverage: f64,
    pub sharpness: f64,
    pub per_group: BTreeMap<String, Tally>,
    pub per_bin: BTreeMap<usize, Tally>,
    pub unbounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageExperiment {
    pub mean_coverage: f64,
    pub mean_original_coverage: f64,
    pub mean_sharpness: f64,
    pub per_trial_coverages: Vec<f64>,
    /// Pooled over all trials.
    pub per_group_coverage: BTreeMap<String, Tally>,
    pub per_bin_coverage: BTreeMap<usize, Tally>,
    /// Three Monte Carlo standard errors of the mean coverage; `None` for a
    /// single trial.
    pub ci_halfwidth: Option<f64>,
    /// `[1 - alpha, 1 - alpha + 1 / (n_cal + 1)]`.
    pub coverage_band: (f64, f64),
    pub unbounded_trials: usize,
}

impl CoverageExperiment {
    /// Whether the mean coverage is inside the theoretical band widened by
    /// the Monte Carlo half-width.
    pub fn within_band(&self) -> bool {
        let eps = self.ci_halfwidth.unwrap_or(0.0);
        self.mean_coverage >= self.coverage_band.0 - eps && self.mean_coverage <= self.coverage_band.1 + eps
    }
}

fn fit_method(config: &SynthConfig, cal: &[RegressionRecord]) -> Result<Calibrator> {
    Ok(match &config.method {
        ExperimentMethod::Split => Calibrator::Split(fit_split(cal, config.alpha, config.kind)?),
        ExperimentMethod::Grouped { min_group_size } => {
            Calibrator::Grouped(fit_grouped(cal, config.alpha, config.kind, *min_group_size)?)
        }
        ExperimentMethod::Mondrian {
            source,
            min_bin_size,
            max_bins,
        } => Calibrator::Mondrian(partition_bins(
            cal,
            source,
            &BinSpec {
                min_bin_size: *min_bin_size,
                max_bins: *max_bins,
            },
            config.alpha,
            config.kind,
        )?),
    })
}

/// One generate/fit/evaluate cycle.
pub fn run_trial(config: &SynthConfig, trial_index: usize) -> Result<TrialOutcome> {
    let records = gen_heteroscedastic(config, trial_index);
    let (cal, test) = records.split_at(config.n_cal);
    let calibrator = fit_method(config, cal)?;
    let mut total = Tally::default();
    let mut original = Tally::default();
    let mut width = 0.0;
    let mut unbounded = false;
    let mut per_group: BTreeMap<String, Tally> = BTreeMap::new();
    let mut per_bin: BTreeMap<usize, Tally> = BTreeMap::new();
    for r in test {
        let y = r.truth()?;
        let h = heuristics_of(r, config.alpha, config.kind)?;
        original.add(h.interval(1.0).contains(y));
        let (stratum, pred) = crate::conditional::predict_conditional(&calibrator, r)?;
        let hit = pred.interval.contains(y);
        total.add(hit);
        unbounded |= pred.interval.unbounded;
        width += pred.interval.width();
        per_group.entry(r.group.clone()).or_default().add(hit);
        if let Some(crate::conditional::Stratum::Bin(b)) = stratum {
            per_bin.entry(b).or_default().add(hit);
        }
    }
    Ok(TrialOutcome {
        coverage: total.coverage(),
        original_coverage: original.coverage(),
        sharpness: width / test.len() as f64,
        per_group,
        per_bin,
        unbounded,
    })
}

/// Run all trials (in parallel) and aggregate in trial order.
pub fn run_coverage_experiment(config: &SynthConfig) -> Result<CoverageExperiment> {
    config.validate()?;
    let outcomes: Vec<TrialOutcome> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect::<Result<_>>()?;
    let trials = outcomes.len() as f64;
    let per_trial_coverages: Vec<f64> = outcomes.iter().map(|o| o.coverage).collect();
    let mean_coverage = per_trial_coverages.iter().sum::<f64>() / trials;
    let mean_original_coverage = outcomes.iter().map(|o| o.original_coverage).sum::<f64>() / trials;
    let mean_sharpness = outcomes.iter().map(|o| o.sharpness).sum::<f64>() / trials;
    let ci_halfwidth = (outcomes.len() > 1).then(|| {
        let var = per_trial_coverages
            .iter()
            .map(|c| (c - mean_coverage) * (c - mean_coverage))
            .sum::<f64>()
            / (trials - 1.0);
        3.0 * (var / trials).sqrt()
    });
    let mut per_group_coverage: BTreeMap<String, Tally> = BTreeMap::new();
    let mut per_bin_coverage: BTreeMap<usize, Tally> = BTreeMap::new();
    for o in &outcomes {
        for (g, t) in &o.per_group {
            per_group_coverage.entry(g.clone()).or_default().merge(t);
        }
        for (b, t) in &o.per_bin {
            per_bin_coverage.entry(*b).or_default().merge(t);
        }
    }
    let lo = 1.0 - config.alpha;
    Ok(CoverageExperiment {
        mean_coverage,
        mean_original_coverage,
        mean_sharpness,
        per_trial_coverages,
        per_group_coverage,
        per_bin_coverage,
        ci_halfwidth,
        coverage_band: (lo, lo + 1.0 / (config.n_cal as f64 + 1.0)),
        unbounded_trials: outcomes.iter().filter(|o| o.unbounded).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual_std(records: &[RegressionRecord]) -> f64 {
        let r: Vec<f64> = records.iter().map(|r| r.y_true.unwrap() - r.y_hat).collect();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (r.len() - 1) as f64).sqrt()
    }

    #[test]
    fn constant_noise_moment() {
        let cfg = SynthConfig {
            n_cal: 50_000,
            n_test: 50_000,
            ..Default::default()
        };
        let recs = gen_heteroscedastic(&cfg, 0);
        assert_eq!(recs.len(), 100_000);
        let sd = residual_std(&recs);
        assert!((0.99..=1.01).contains(&sd), "{sd}");
    }

    #[test]
    fn per_group_noise_moments() {
        let mut wide = GroupSpec::named("wide");
        wide.noise = NoiseScale::Constant(3.0);
        let cfg = SynthConfig {
            n_cal: 20_000,
            n_test: 20_000,
            groups: vec![GroupSpec::named("narrow"), wide],
            ..Default::default()
        };
        let recs = gen_heteroscedastic(&cfg, 3);
        let (narrow, wide): (Vec<_>, Vec<_>) = recs.into_iter().partition(|r| r.group == "narrow");
        assert!((residual_std(&narrow) - 1.0).abs() < 0.03);
        assert!((residual_std(&wide) - 3.0).abs() < 0.09);
        let share = narrow.len() as f64 / 40_000.0;
        assert!((share - 0.5).abs() < 0.02);
    }

    #[test]
    fn student_noise_has_unit_variance() {
        let mut g = GroupSpec::named("t");
        g.shape = NoiseShape::StudentT { df: 5.0 };
        let cfg = SynthConfig {
            n_cal: 100_000,
            n_test: 100_000,
            groups: vec![g],
            ..Default::default()
        };
        let sd = residual_std(&gen_heteroscedastic(&cfg, 1));
        assert!((sd - 1.0).abs() < 0.03, "{sd}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            n_cal: 10,
            n_test: 10,
            ..Default::default()
        };
        assert_eq!(gen_heteroscedastic(&cfg, 4), gen_heteroscedastic(&cfg, 4));
        assert_ne!(gen_heteroscedastic(&cfg, 4), gen_heteroscedastic(&cfg, 5));
    }

    #[test]
    fn small_experiment_is_reproducible() {
        let cfg = SynthConfig {
            n_cal: 99,
            n_test: 200,
            trials: 50,
            seed: 11,
            ..Default::default()
        };
        let a = run_coverage_experiment(&cfg).unwrap();
        let b = run_coverage_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_trial_coverages.len(), 50);
        assert!(a.ci_halfwidth.unwrap() > 0.0);
        assert_eq!(a.coverage_band, (0.9, 0.9 + 0.01));
    }

    #[test]
    fn single_trial_has_no_halfwidth() {
        let cfg = SynthConfig {
            n_cal: 99,
            n_test: 100,
            trials: 1,
            ..Default::default()
        };
        assert_eq!(run_coverage_experiment(&cfg).unwrap().ci_halfwidth, None);
    }

    #[test]
    fn tiny_calibration_band() {
        let cfg = SynthConfig {
            n_cal: 9,
            n_test: 200,
            trials: 2000,
            seed: 5,
            ..Default::default()
        };
        let exp = run_coverage_experiment(&cfg).unwrap();
        assert_eq!(exp.coverage_band, (0.9, 1.0));
        assert!(exp.mean_coverage >= 0.9 - exp.ci_halfwidth.unwrap() && exp.mean_coverage <= 1.0);
        assert_eq!(exp.unbounded_trials, 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.alpha = 1.5;
        assert_eq!(cfg.validate(), Err(Error::InvalidAlpha(1.5)));
        let mut cfg = SynthConfig::default();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.groups[0].noise = NoiseScale::Linear { base: 0.0, slope: 1.0 };
        assert!(cfg.validate().is_err());
    }
}
