use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::normalize::normalize_series;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SensorColumn {
    pub name: String,
    pub unit: String,
    pub values: Vec<f64>,
}

/// Column-oriented sensor readings, rows aligned across columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTable {
    columns: Vec<SensorColumn>,
    timestamps: Option<Vec<f64>>,
}

impl SensorTable {
    pub fn new(columns: Vec<SensorColumn>, timestamps: Option<Vec<f64>>) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.values.len());
        if let Some(bad) = columns.iter().find(|c| c.values.len() != rows) {
            return Err(Error::InvalidInput(format!(
                "column {} has {} rows, expected {rows}",
                bad.name,
                bad.values.len()
            )));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != rows {
                return Err(Error::InvalidInput(format!(
                    "{} timestamps for {rows} rows",
                    ts.len()
                )));
            }
            if ts.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidInput("timestamps decrease".into()));
            }
        }
        Ok(Self {
            columns,
            timestamps,
        })
    }

    /// Read a CSV with a header row. Rows are ordered by `timestamp_column`
    /// when one is given; units come from `units` keyed by column name.
    pub fn from_csv(
        path: &Path,
        timestamp_column: Option<&str>,
        units: &HashMap<String, String>,
    ) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::malformed("csv", format!("row {}: {f:?} is not a number", line + 2))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }

        let ts_idx = match timestamp_column {
            Some(name) => Some(
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::MissingColumn(name.to_owned()))?,
            ),
            None => None,
        };
        if let Some(i) = ts_idx {
            rows.sort_by(|a, b| a[i].total_cmp(&b[i]));
        }

        let columns = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != ts_idx)
            .map(|(i, name)| SensorColumn {
                name: name.clone(),
                unit: units.get(name).cloned().unwrap_or_default(),
                values: rows.iter().map(|r| r[i]).collect(),
            })
            .collect();
        let timestamps = ts_idx.map(|i| rows.iter().map(|r| r[i]).collect());
        Self::new(columns, timestamps)
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }

    pub fn columns(&self) -> &[SensorColumn] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&SensorColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }
}

/// Raw-value range mapped onto 0–100 for one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplateConfig {
    /// Leading description of units and data range.
    pub context_text: String,
    pub column_order: Vec<String>,
    #[serde(default = "default_separator")]
    pub separator: String,
    /// Consecutive rows rendered into one document; `None` puts the whole
    /// table into a single document.
    #[serde(default)]
    pub rows_per_document: Option<usize>,
}

fn default_separator() -> String {
    "\n".to_owned()
}

impl PromptTemplateConfig {
    /// Context sentence listing each column's unit and raw range.
    pub fn describe_units(
        table: &SensorTable,
        column_order: &[String],
        ranges: &HashMap<String, NormRange>,
    ) -> String {
        let parts: Vec<String> = column_order
            .iter()
            .filter_map(|name| {
                let col = table.column(name)?;
                let r = ranges.get(name)?;
                let unit = if col.unit.is_empty() {
                    String::new()
                } else {
                    format!(" in {}", col.unit)
                };
                Some(format!("{name}{unit} from {} to {}", r.lo, r.hi))
            })
            .collect();
        format!(
            "Sensor readings: {}. Values are scaled to integers from 0 to 100.",
            parts.join(", ")
        )
    }
}

/// Collapse space/tab runs, trim every line, drop control characters other
/// than newlines and drop empty lines at the ends.
pub fn clean_text(text: &str) -> String {
    let lines: Vec<String> = text
        .lines()
        .map(|line| {
            let mut out = String::with_capacity(line.len());
            let mut pending_space = false;
            for c in line.chars() {
                if c == ' ' || c == '\t' {
                    pending_space = !out.is_empty();
                } else if c.is_control() {
                    continue;
                } else {
                    if pending_space {
                        out.push(' ');
                        pending_space = false;
                    }
                    out.push(c);
                }
            }
            out
        })
        .collect();
    lines.join("\n").trim().to_owned()
}

/// Render each row group as `context` followed by one `Name: [v1, v2, …]`
/// line per column in `column_order`.
pub fn transform_table(
    table: &SensorTable,
    tmpl: &PromptTemplateConfig,
    norm_ranges: &HashMap<String, NormRange>,
) -> Result<Vec<String>> {
    if table.rows() == 0 {
        return Err(Error::EmptyTable);
    }
    let mut normalized = Vec::with_capacity(tmpl.column_order.len());
    for name in &tmpl.column_order {
        let col = table
            .column(name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        let range = norm_ranges.get(name).ok_or_else(|| {
            Error::InvalidConfig(format!("no normalization range for column {name}"))
        })?;
        normalized.push((name, normalize_series(&col.values, range.lo, range.hi)?));
    }

    let group = match tmpl.rows_per_document {
        Some(0) => return Err(Error::InvalidConfig("rows_per_document must be ≥ 1".into())),
        Some(n) => n,
        None => table.rows(),
    };
    let docs = (0..table.rows())
        .step_by(group)
        .map(|start| {
            let end = (start + group).min(table.rows());
            let lines: Vec<String> = normalized
                .iter()
                .map(|(name, vals)| {
                    let joined: Vec<String> = vals[start..end].iter().map(u32::to_string).collect();
                    format!("{name}: [{}]", joined.join(", "))
                })
                .collect();
            let body = lines.join(&tmpl.separator);
            let doc = if tmpl.context_text.trim().is_empty() {
                body
            } else {
                format!("{}\n{body}", tmpl.context_text)
            };
            clean_text(&doc)
        })
        .collect();
    Ok(docs)
}

/// One document per blank-line-separated block.
pub fn split_text_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(clean_text(&current));
                current.clear();
            }
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.is_empty() {
        docs.push(clean_text(&current));
    }
    docs.retain(|d| !d.is_empty());
    docs
}

#[derive(Serialize, Deserialize)]
struct DocLine {
    text: String,
}

/// Documents as JSON lines, `{"text": …}` per line.
pub fn write_documents(path: &Path, docs: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for text in docs {
        serde_json::to_writer(&mut w, &DocLine { text: text.clone() })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `.jsonl` written by [`write_documents`]; any other extension is
/// treated as plain text split on blank lines.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut docs = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            docs.push(serde_json::from_str::<DocLine>(&line)?.text);
        }
        Ok(docs)
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(split_text_documents(&text))
    }
}
