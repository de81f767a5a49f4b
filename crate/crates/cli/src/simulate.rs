//! Monte Carlo coverage experiments on synthetic data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use confforge::metrics::Real;
use confforge::synth::{run_coverage_experiment, CoverageExperiment, SynthConfig, Tally};
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::output::{write_csv, write_json, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub synth: SynthConfig,
    pub out: Option<PathBuf>,
    pub trials_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub format_version: &'static str,
    pub command: &'static str,
    pub config: SynthConfig,
    pub mean_coverage: f64,
    pub mean_original_coverage: f64,
    pub mean_sharpness: Real,
    /// A number, or `"not_applicable"` for a single trial.
    pub ci_halfwidth: Value,
    pub coverage_band: (f64, f64),
    pub within_band: bool,
    pub unbounded_trials: usize,
    pub per_group_coverage: BTreeMap<String, Tally>,
    pub per_bin_coverage: BTreeMap<usize, Tally>,
}

impl SimulationReport {
    fn new(config: &SynthConfig, e: &CoverageExperiment) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            command: "simulate",
            config: config.clone(),
            mean_coverage: e.mean_coverage,
            mean_original_coverage: e.mean_original_coverage,
            mean_sharpness: Real(e.mean_sharpness),
            ci_halfwidth: e
                .ci_halfwidth
                .map_or_else(|| Value::String("not_applicable".into()), |h| serde_json::json!(h)),
            coverage_band: e.coverage_band,
            within_band: e.within_band(),
            unbounded_trials: e.unbounded_trials,
            per_group_coverage: e.per_group_coverage.clone(),
            per_bin_coverage: e.per_bin_coverage.clone(),
        }
    }
}

/// Load a synthetic-experiment description from JSON.
pub fn load_synth_config(path: &Path) -> CliResult<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn cmd_simulate(config: &SimulateConfig) -> CliResult<(SimulationReport, CoverageExperiment)> {
    config.synth.validate()?;
    let experiment = run_coverage_experiment(&config.synth)?;
    let report = SimulationReport::new(&config.synth, &experiment);
    if let Some(out) = &config.out {
        write_json(out, &report)?;
    }
    if let Some(path) = &config.trials_csv {
        let rows: Vec<Vec<String>> = experiment
            .per_trial_coverages
            .iter()
            .enumerate()
            .map(|(i, c)| vec![i.to_string(), c.to_string()])
            .collect();
        write_csv(path, &["trial", "coverage"], &rows)?;
    }
    Ok((report, experiment))
}
