//! JSONL records and CSV tables.
//!
//! JSONL files hold one record per line, UTF-8, keys in struct declaration
//! order, numbers in shortest round-trip form. Every write goes to a sibling
//! temporary file that is then renamed into place.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use selfcontrast_core::corpus::{PreferenceRecord, PromptRecord, ResponseSet};
use selfcontrast_core::dpo::TraceRow;
use selfcontrast_core::eval::EvalRow;
use selfcontrast_core::filter::DiagnosticRow;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: duplicate id {id:?} (first on line {first})", path.display())]
    DuplicateId { path: PathBuf, line: usize, id: String, first: usize },
    #[error("{}: {message}", path.display())]
    Csv { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Json { path: PathBuf, message: String },
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io { path: path.to_path_buf(), source }
    }
}

/// A record with a dataset-unique id and optional semantic checks run on read.
pub trait Keyed {
    fn key(&self) -> &str;

    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

impl Keyed for PromptRecord {
    fn key(&self) -> &str {
        &self.id
    }

    fn check(&self) -> Result<(), String> {
        self.validate().map_err(|e| e.to_string())
    }
}

impl Keyed for ResponseSet {
    fn key(&self) -> &str {
        &self.id
    }
}

impl Keyed for PreferenceRecord {
    fn key(&self) -> &str {
        &self.id
    }

    fn check(&self) -> Result<(), String> {
        self.validate().map_err(|e| e.to_string())
    }
}

/// Serializes records as JSONL text.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSONL text. `origin` only labels errors.
pub fn parse_jsonl<T: DeserializeOwned + Keyed>(text: &str, origin: &Path) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |message: String| FormatError::Parse { path: origin.to_path_buf(), line: line_no, message };
        let record: T = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        record.check().map_err(parse_err)?;
        if let Some(&first) = seen.get(record.key()) {
            return Err(FormatError::DuplicateId {
                path: origin.to_path_buf(),
                line: line_no,
                id: record.key().to_string(),
                first,
            });
        }
        seen.insert(record.key().to_string(), line_no);
        out.push(record);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned + Keyed>(path: &Path) -> Result<Vec<T>, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FormatError> {
    let text = to_jsonl(records).map_err(|e| FormatError::Json { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, text.as_bytes())
}

/// Reads JSONL lines as loosely typed values, for formats without ids.
pub fn read_jsonl_values<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let file = fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FormatError::io(path, e))?;
        let value = serde_json::from_str(&line).map_err(|e| FormatError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| FormatError::Json { path: path.to_path_buf(), message: e.to_string() })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Json { path: path.to_path_buf(), message: e.to_string() })
}

/// Writes `rows` as CSV with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), FormatError> {
    let csv_err = |e: csv::Error| FormatError::Csv { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| FormatError::Csv { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let csv_err = |e: csv::Error| FormatError::Csv { path: path.to_path_buf(), message: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| FormatError::io(path, e))
}

/// Diagnostics CSV row: `id, rank, similarity, selected_flag`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct DiagnosticCsvRow {
    pub id: String,
    pub rank: usize,
    pub similarity: f64,
    pub selected_flag: u8,
}

impl From<&DiagnosticRow> for DiagnosticCsvRow {
    fn from(r: &DiagnosticRow) -> Self {
        DiagnosticCsvRow { id: r.id.clone(), rank: r.rank, similarity: r.similarity, selected_flag: r.selected as u8 }
    }
}

pub fn write_diagnostics(path: &Path, rows: &[DiagnosticRow]) -> Result<(), FormatError> {
    let rows: Vec<DiagnosticCsvRow> = rows.iter().map(DiagnosticCsvRow::from).collect();
    write_csv(path, &rows)
}

/// Loss trace CSV: `epoch, step, mean_loss, mean_margin`.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), FormatError> {
    write_csv(path, rows)
}

/// Per-prompt evaluation CSV: `id, reward_target, reward_response, win`.
pub fn write_eval_rows(path: &Path, rows: &[EvalRow]) -> Result<(), FormatError> {
    write_csv(path, rows)
}
