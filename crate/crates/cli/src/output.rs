//! Shared report writers.

use std::path::Path;

use serde::Serialize;

use crate::error::CliResult;
use crate::input::write_bytes;

/// Version tag carried by every JSON report.
pub const FORMAT_VERSION: &str = "1";

/// Pretty-printed JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize infallibly");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_bytes(path, to_json(value).as_bytes())
}

/// One CSV row, quoted where needed, ending in `\n`.
pub fn csv_line(fields: &[&str]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("writing to memory cannot fail");
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("fields are UTF-8")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut out = csv_line(header);
    for r in rows {
        let fields: Vec<&str> = r.iter().map(String::as_str).collect();
        out.push_str(&csv_line(&fields));
    }
    write_bytes(path, out.as_bytes())
}
