//! Experiment reports and their CSV / JSON serializations.
//!
//! A report is a table (`columns` plus `rows` of typed cells), a summary of one
//! numeric column, named checks, and an overall pass flag. CSV output is the
//! table only; JSON output is the whole report. Both are pure functions of the
//! report, so equal reports give byte-identical files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Output format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => arg_err(format!("unknown format {other:?}; expected csv or json")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

/// One table cell. Non-finite floats are stored as `Null` so JSON stays valid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    pub fn float(v: f64) -> Cell {
        if v.is_finite() {
            Cell::Float(v)
        } else {
            Cell::Null
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Int(v) => Some(v as f64),
            Cell::Float(v) => Some(v),
            _ => None,
        }
    }

    fn csv_field(&self) -> String {
        match self {
            Cell::Null => String::new(),
            Cell::Bool(b) => b.to_string(),
            Cell::Int(v) => v.to_string(),
            // Shortest round-tripping form, with an exponent for tiny or huge values.
            Cell::Float(v) => format!("{v:?}"),
            Cell::Text(t) => t.clone(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("null"),
            other => f.write_str(&other.csv_field()),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::float(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        i64::try_from(v).map_or_else(|_| Cell::Text(v.to_string()), Cell::Int)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::from(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Null, Into::into)
    }
}

/// Mean, sample standard deviation, min and max of the numeric cells in one column.
/// Statistics are `None` when the column has no numeric cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub column: String,
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Summary {
    pub fn of_values(column: &str, values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                column: column.to_owned(),
                count: 0,
                mean: None,
                std: None,
                min: None,
                max: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Summary {
            column: column.to_owned(),
            count: n,
            mean: Some(mean),
            std: Some(var.sqrt()),
            min: Some(min),
            max: Some(max),
        }
    }
}

/// A named threshold check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// The measured quantity the threshold is applied to.
    pub value: Cell,
    /// Human-readable threshold, e.g. `"< 1e-3"`.
    pub threshold: String,
    pub pass: bool,
}

/// A labelled curve of `(x, y)` points for plotting. JSON only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    /// Echo of the configuration that produced the report.
    pub config: serde_json::Value,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub summary: Summary,
    pub checks: Vec<Check>,
    #[serde(default)]
    pub series: Vec<Series>,
    pub pass: bool,
}

impl Report {
    /// Empty report; `summary_column` must be one of `columns`.
    pub fn new(
        experiment: &str,
        config: serde_json::Value,
        columns: &[&str],
        summary_column: &str,
    ) -> Result<Report> {
        if !columns.contains(&summary_column) {
            return arg_err(format!(
                "summary column {summary_column:?} not in {columns:?}"
            ));
        }
        Ok(Report {
            experiment: experiment.to_owned(),
            config,
            columns: columns.iter().map(|c| (*c).to_owned()).collect(),
            rows: Vec::new(),
            summary: Summary::of_values(summary_column, &[]),
            checks: Vec::new(),
            series: Vec::new(),
            pass: true,
        })
    }

    pub fn push_row(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return arg_err(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric cells of a column, in row order.
    pub fn column_values(&self, name: &str) -> Vec<f64> {
        match self.column_index(name) {
            Some(i) => self.rows.iter().filter_map(|r| r[i].as_f64()).collect(),
            None => Vec::new(),
        }
    }

    pub fn recompute_summary(&self) -> Summary {
        Summary::of_values(
            &self.summary.column,
            &self.column_values(&self.summary.column),
        )
    }

    pub fn add_check(&mut self, name: &str, value: impl Into<Cell>, threshold: &str, pass: bool) {
        self.checks.push(Check {
            name: name.to_owned(),
            value: value.into(),
            threshold: threshold.to_owned(),
            pass,
        });
    }

    /// Fill in the summary and the overall pass flag (all checks pass).
    pub fn finish(mut self) -> Report {
        self.summary = self.recompute_summary();
        self.pass = self.checks.iter().all(|c| c.pass);
        self
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv_field))
                .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Report> {
        serde_json::from_str(s).map_err(|e| Error::Argument(format!("invalid report JSON: {e}")))
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }
}

/// Write a report to `path`.
pub fn emit_report(report: &Report, path: &Path, format: Format) -> Result<()> {
    std::fs::write(path, report.render(format)?)?;
    Ok(())
}
