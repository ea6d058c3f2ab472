//! Append-only JSONL metrics: one self-describing record per line.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DfaError, Result};
use crate::lossless;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Epoch,
    Attack,
    Ood,
    Analysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Logical clock: position of the record in its file, starting at 0.
    pub timestamp: u64,
    pub config_hash: String,
    pub kind: RecordKind,
    /// Attack label, epoch number, or analysis name.
    pub name: String,
    /// Label of the model the record describes.
    pub model: String,
    /// Config hash of the checkpoint evaluated, when different from `config_hash`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    #[serde(with = "lossless::f64_map")]
    pub fields: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty", with = "lossless::f64_series")]
    pub series: BTreeMap<String, Vec<f64>>,
}

impl MetricsRecord {
    pub fn new(kind: RecordKind, name: impl Into<String>, model: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            timestamp: 0,
            config_hash: config_hash.into(),
            kind,
            name: name.into(),
            model: model.into(),
            model_hash: None,
            fields: BTreeMap::new(),
            series: BTreeMap::new(),
        }
    }

    pub fn field(mut self, key: &str, value: f64) -> Self {
        self.fields.insert(key.to_string(), value);
        self
    }

    pub fn with_series(mut self, key: &str, values: Vec<f64>) -> Self {
        self.series.insert(key.to_string(), values);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.fields.get(key).copied()
    }
}

/// Parses a whole metrics file. Blank lines are skipped.
pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let record = serde_json::from_str(body).map_err(|e| DfaError::Format {
                path: path.to_path_buf(),
                offset: offset as u64,
                reason: format!("bad metrics record: {e}"),
            })?;
            out.push(record);
        }
        offset += line.len();
    }
    Ok(out)
}

/// Reads a metrics file; a missing file reads as empty.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_metrics(&text, path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(DfaError::io(path, e)),
    }
}

/// Appends records, continuing the timestamp sequence of an existing file.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    next: u64,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let next = read_metrics(path)?.last().map_or(0, |r| r.timestamp + 1);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| DfaError::io(dir, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            next,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Stamps and appends one record, flushing it as a single line.
    pub fn append(&mut self, mut record: MetricsRecord) -> Result<MetricsRecord> {
        record.timestamp = self.next;
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| DfaError::io(&self.path, e))?;
        file.write_all(line.as_bytes()).map_err(|e| DfaError::io(&self.path, e))?;
        self.next += 1;
        Ok(record)
    }
}
