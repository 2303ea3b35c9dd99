//! Newline-delimited JSON metrics log, one [`MetricsRecord`] per line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use stratdiff_core::harness::{MetricsRecord, METRICS_SCHEMA};

use crate::error::{LabError, Result};

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Starts an empty log, replacing any previous file.
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| LabError::io(path, e))?;
        Ok(Self { path: path.to_owned(), out: BufWriter::new(f) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| LabError::io(path, e))?;
        Ok(Self { path: path.to_owned(), out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("metrics records always serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| LabError::io(&self.path, e))
    }
}

pub fn parse(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(line)
            .map_err(|e| LabError::format(path, format!("line {}: {e}", i + 1)))?;
        if rec.schema != METRICS_SCHEMA {
            return Err(LabError::format(
                path,
                format!("line {}: schema {} is not {METRICS_SCHEMA}", i + 1, rec.schema),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse(&text, path)
}
