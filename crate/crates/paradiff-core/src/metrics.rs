//! Append-only JSONL metrics log and small CSV helpers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// One JSON record per line. Records are also kept in memory so callers can
/// inspect what was logged.
pub struct JsonlWriter {
    file: Option<BufWriter<File>>,
    pub records: Vec<serde_json::Value>,
}

impl JsonlWriter {
    /// Log to a file (parent directories created).
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(JsonlWriter {
            file: Some(BufWriter::new(File::create(path)?)),
            records: Vec::new(),
        })
    }

    /// In-memory only.
    pub fn memory() -> Self {
        JsonlWriter {
            file: None,
            records: Vec::new(),
        }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let value = serde_json::to_value(record)?;
        if let Some(f) = self.file.as_mut() {
            serde_json::to_writer(&mut *f, &value)?;
            f.write_all(b"\n")?;
        }
        self.records.push(value);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

/// Write rows of `(header, records)` as CSV.
pub fn write_csv<P: AsRef<Path>>(path: P, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::Error::Serde(e.to_string()))?;
    w.write_record(header)
        .map_err(|e| crate::Error::Serde(e.to_string()))?;
    for row in rows {
        w.write_record(row)
            .map_err(|e| crate::Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
