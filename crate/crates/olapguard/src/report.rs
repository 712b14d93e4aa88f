//! Report files: one series file per table plus `summary.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    /// Comma-separated values with a header line.
    #[default]
    Csv,
    /// One JSON object per line.
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: &'static str, columns: &[&'static str]) -> Self {
        Self {
            name,
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, mut row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len(), "{}", self.name);
        row.iter_mut().for_each(tidy);
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> Result<Vec<u8>> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let csv_err = |e: csv::Error| Error::io(self.name, e.into());
                w.write_record(&self.columns).map_err(csv_err)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(cell)).map_err(csv_err)?;
                }
                w.into_inner().map_err(|e| Error::io(self.name, e.into_error()))
            }
            Format::Jsonl => {
                let mut out = Vec::new();
                for row in &self.rows {
                    let obj: serde_json::Map<String, Value> = self
                        .columns
                        .iter()
                        .map(|c| c.to_string())
                        .zip(row.iter().cloned())
                        .collect();
                    serde_json::to_writer(&mut out, &obj).expect("in-memory write");
                    out.push(b'\n');
                }
                Ok(out)
            }
        }
    }
}

/// Rounds floats to nine decimals so tick arithmetic noise stays out of the
/// files.
pub fn tidy(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            if x.abs() < 1e9 {
                *v = Value::from((x * 1e9).round() / 1e9);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(tidy),
        Value::Object(m) => m.values_mut().for_each(tidy),
        _ => {}
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Everything a subcommand produces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub tables: Vec<Table>,
    pub summary: serde_json::Map<String, Value>,
    /// Extra files written verbatim.
    pub files: Vec<(String, String)>,
    /// Safety breaches found during the run.
    pub violations: Vec<String>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the report into `out`, creating it if needed. Returns the written
/// paths in order.
pub fn emit_report(report: &Report, out: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for t in &report.tables {
        let bytes = t.render(format)?;
        written.push(write(out.join(format!("{}.{}", t.name, format.extension())), &bytes)?);
    }
    for (name, text) in &report.files {
        written.push(write(out.join(name), text.as_bytes())?);
    }
    let mut tidied = Value::Object(report.summary.clone());
    tidy(&mut tidied);
    let mut summary = serde_json::to_vec_pretty(&tidied).expect("summary serializes");
    summary.push(b'\n');
    written.push(write(out.join("summary.json"), &summary)?);
    Ok(written)
}
