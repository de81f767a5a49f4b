//! Record and table readers for JSON-Lines and CSV files.
//!
//! A path ending in `.csv` is read as CSV; anything else as JSON-Lines. In
//! CSV, `samples` is a `|`-separated cell, attributes are `attr.<name>`
//! columns, and an empty cell means the field is absent.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use confforge::record::{validate_record, RawRecord, RegressionRecord, ValidationOptions};
use serde_json::Value;

use crate::error::{CliError, CliResult};

const ATTR_PREFIX: &str = "attr.";
const RECORD_COLUMNS: [&str; 9] = ["id", "group", "y", "y_hat", "sigma", "delta", "delta_lo", "delta_hi", "samples"];

pub fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Read and validate every row, failing on the first bad one.
pub fn read_records(path: &Path, opts: &ValidationOptions) -> CliResult<Vec<RegressionRecord>> {
    let raws = if is_csv(path) { read_csv_raw(path)? } else { read_jsonl_raw(path)? };
    let records: Vec<RegressionRecord> = raws
        .into_iter()
        .map(|(line, raw)| {
            validate_record(raw, &line.to_string(), opts)
                .map_err(|e| CliError::Data(format!("{}:{line}: {e}", path.display())))
        })
        .collect::<CliResult<_>>()?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no records", path.display())));
    }
    Ok(records)
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Parsed rows tagged with their 1-based line number.
fn read_jsonl_raw(path: &Path) -> CliResult<Vec<(usize, RawRecord)>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|raw| (i + 1, raw))
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn open_csv(path: &Path) -> CliResult<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))
}

fn parse_number(path: &Path, line: usize, column: &str, cell: &str) -> CliResult<f64> {
    cell.parse::<f64>().map_err(|_| {
        CliError::Data(format!(
            "{}:{line}: column `{column}` is not numeric: {cell:?}",
            path.display()
        ))
    })
}

fn read_csv_raw(path: &Path) -> CliResult<Vec<(usize, RawRecord)>> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| CliError::io(path, e))?.clone();
    for h in headers.iter() {
        if !RECORD_COLUMNS.contains(&h) && !h.starts_with(ATTR_PREFIX) {
            return Err(CliError::Data(format!(
                "{}: unknown column `{h}` (attributes need the `{ATTR_PREFIX}` prefix)",
                path.display()
            )));
        }
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CliError::io(path, e))?;
        let mut raw = RawRecord::default();
        let mut has_y_hat = false;
        let mut attrs = BTreeMap::new();
        for (h, cell) in headers.iter().zip(row.iter()) {
            if cell.is_empty() {
                continue;
            }
            let num = |c: &str| parse_number(path, line, h, c);
            match h {
                "id" => raw.id = Some(cell.to_string()),
                "group" => raw.group = Some(cell.to_string()),
                "y" => raw.y = Some(num(cell)?),
                "y_hat" => {
                    raw.y_hat = num(cell)?;
                    has_y_hat = true;
                }
                "sigma" => raw.sigma = Some(num(cell)?),
                "delta" => raw.delta = Some(num(cell)?),
                "delta_lo" => raw.delta_lo = Some(num(cell)?),
                "delta_hi" => raw.delta_hi = Some(num(cell)?),
                "samples" => raw.samples = Some(cell.split('|').map(|c| num(c.trim())).collect::<CliResult<_>>()?),
                _ => {
                    attrs.insert(h[ATTR_PREFIX.len()..].to_string(), num(cell)?);
                }
            }
        }
        if !has_y_hat {
            return Err(CliError::Data(format!("{}:{line}: missing `y_hat`", path.display())));
        }
        if !attrs.is_empty() {
            raw.attrs = Some(attrs);
        }
        out.push((line, raw));
    }
    Ok(out)
}

/// Rows of loosely typed values, for feature extraction.
#[derive(Debug, Clone)]
pub struct Table {
    pub rows: Vec<BTreeMap<String, Value>>,
    /// 1-based source line of each row.
    pub lines: Vec<usize>,
}

impl Table {
    /// Numeric column `name`, looked up directly or as an attribute.
    pub fn numeric(&self, path: &Path, name: &str) -> CliResult<Vec<f64>> {
        let attr = format!("{ATTR_PREFIX}{name}");
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(row, &line)| {
                let v = row.get(name).or_else(|| row.get(&attr)).ok_or_else(|| {
                    CliError::Data(format!("{}:{line}: column `{name}` is missing", path.display()))
                })?;
                let parsed = match v {
                    Value::Number(n) => n.as_f64(),
                    Value::String(s) => s.parse::<f64>().ok(),
                    _ => None,
                };
                match parsed {
                    Some(x) if x.is_finite() => Ok(x),
                    _ => Err(CliError::Data(format!(
                        "{}:{line}: column `{name}` is not numeric: {v}",
                        path.display()
                    ))),
                }
            })
            .collect()
    }

    /// String column `name`, if present in a row.
    pub fn text(&self, row: usize, name: &str) -> Option<String> {
        match self.rows[row].get(name)? {
            Value::String(s) if !s.is_empty() => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        }
    }
}

/// Read any JSON-Lines or CSV file as a table. JSON `attrs` objects are
/// flattened into `attr.<name>` columns.
pub fn read_table(path: &Path) -> CliResult<Table> {
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    if is_csv(path) {
        let mut reader = open_csv(path)?;
        let headers = reader.headers().map_err(|e| CliError::io(path, e))?.clone();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| CliError::io(path, e))?;
            rows.push(
                headers
                    .iter()
                    .zip(row.iter())
                    .map(|(h, c)| (h.to_string(), Value::String(c.to_string())))
                    .collect(),
            );
            lines.push(i + 2);
        }
    } else {
        for (i, l) in read_text(path)?.lines().enumerate() {
            if l.trim().is_empty() {
                continue;
            }
            let obj: BTreeMap<String, Value> = serde_json::from_str(l)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let mut row = BTreeMap::new();
            for (k, v) in obj {
                match (k.as_str(), v) {
                    ("attrs", Value::Object(m)) => {
                        for (a, av) in m {
                            row.insert(format!("{ATTR_PREFIX}{a}"), av);
                        }
                    }
                    (_, v) => {
                        row.insert(k, v);
                    }
                }
            }
            rows.push(row);
            lines.push(i + 1);
        }
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no rows", path.display())));
    }
    Ok(Table { rows, lines })
}

/// Write records as JSON-Lines.
pub fn write_records_jsonl(path: &Path, records: &[RawRecord]) -> CliResult<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| CliError::write(path, e))?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::write(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::write(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::write(path, e))
}
