//! Train linear quantile regressors and turn their predictions into
//! heuristic uncertainty records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use confforge::quantile_fit::{fit_triple, qnt_heuristics_nonsym, qnt_heuristics_sym, QuantileTriple, TrainConfig};
use confforge::record::RawRecord;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::input::{read_table, write_bytes, write_records_jsonl, Table};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitQuantileConfig {
    pub train: PathBuf,
    /// Rows to emit heuristics for; the training rows when absent.
    pub apply: Option<PathBuf>,
    pub features: Vec<String>,
    pub target: String,
    /// Miscoverage of the outer quantiles; the models sit at
    /// `tau / 2`, 0.5 and `1 - tau / 2`.
    pub tau: f64,
    pub symmetric: bool,
    pub train_config: TrainConfig,
    pub model_out: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub struct FitQuantileOutcome {
    pub triple: QuantileTriple,
    pub records: Vec<RawRecord>,
    /// Rows whose fitted quantiles crossed and had a delta clamped.
    pub crossings: usize,
}

fn feature_matrix(table: &Table, path: &Path, names: &[String]) -> CliResult<Vec<Vec<f64>>> {
    let columns: Vec<Vec<f64>> = names.iter().map(|n| table.numeric(path, n)).collect::<CliResult<_>>()?;
    Ok((0..table.rows.len())
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect())
}

fn has_column(table: &Table, name: &str) -> bool {
    table.rows.iter().any(|r| r.contains_key(name))
}

pub fn cmd_fit_quantile(config: &FitQuantileConfig) -> CliResult<FitQuantileOutcome> {
    if config.features.is_empty() {
        return Err(CliError::Usage("--features needs at least one column".into()));
    }
    if !(config.tau > 0.0 && config.tau < 1.0) {
        return Err(CliError::Usage(format!("tau must lie in (0, 1), got {}", config.tau)));
    }
    let train = read_table(&config.train)?;
    let x = feature_matrix(&train, &config.train, &config.features)?;
    let y = train.numeric(&config.train, &config.target)?;
    let triple = fit_triple(&x, &y, config.tau, &config.train_config)?;
    if let Some(path) = &config.model_out {
        write_bytes(path, triple.to_text().as_bytes())?;
    }

    let (table, path) = match &config.apply {
        Some(p) => (read_table(p)?, p.as_path()),
        None => (train, config.train.as_path()),
    };
    let x = feature_matrix(&table, path, &config.features)?;
    let ys = if has_column(&table, &config.target) {
        Some(table.numeric(path, &config.target)?)
    } else {
        None
    };
    let mut crossings = 0;
    let mut records = Vec::with_capacity(x.len());
    for (i, row) in x.iter().enumerate() {
        let q = triple.predict(row)?;
        let mut raw = RawRecord {
            id: Some(table.text(i, "id").unwrap_or_else(|| table.lines[i].to_string())),
            group: table.text(i, "group"),
            y: ys.as_ref().map(|v| v[i]),
            attrs: Some(
                config
                    .features
                    .iter()
                    .map(|f| f.strip_prefix("attr.").unwrap_or(f).to_string())
                    .zip(row.iter().copied())
                    .collect::<BTreeMap<_, _>>(),
            ),
            ..Default::default()
        };
        if config.symmetric {
            let h = qnt_heuristics_sym(q.q_lo, q.q_hi);
            raw.y_hat = h.y_hat;
            raw.delta = Some(h.delta);
            crossings += usize::from(h.crossing);
        } else {
            let h = qnt_heuristics_nonsym(q.q_lo, q.q_med, q.q_hi);
            raw.y_hat = h.y_hat;
            raw.delta_lo = Some(h.delta_lo);
            raw.delta_hi = Some(h.delta_hi);
            crossings += usize::from(h.crossing);
        }
        records.push(raw);
    }
    if let Some(out) = &config.out {
        write_records_jsonl(out, &records)?;
    }
    Ok(FitQuantileOutcome {
        triple,
        records,
        crossings,
    })
}
