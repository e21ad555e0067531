//! CSV reports with a field-for-field JSON mirror.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use crate::config::Outcome;

#[derive(Debug, Serialize)]
pub struct Metric {
    pub metric: String,
    pub value: String,
}

pub fn metric(name: &str, value: impl ToString) -> Metric {
    Metric {
        metric: name.to_string(),
        value: value.to_string(),
    }
}

/// Writes `<name>.csv` and `<name>.json`. The CSV header is written even
/// when there are no rows.
pub fn table<T: Serialize>(dir: &Path, name: &str, header: &[&str], rows: &[T]) -> Outcome {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(format!("{name}.csv")))?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let json = BufWriter::new(File::create(dir.join(format!("{name}.json")))?);
    serde_json::to_writer_pretty(json, rows)?;
    Ok(())
}

pub fn metrics(dir: &Path, name: &str, rows: &[Metric]) -> Outcome {
    table(dir, name, &["metric", "value"], rows)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
