//! Report tables written as matching CSV and JSON files.

use std::fmt;
use std::io;
use std::path::Path;

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("row has {got} cells, table has {want} columns")]
    RowWidth { got: usize, want: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Real(f64),
    Bool(bool),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Text(s) => f.write_str(s),
            Cell::Int(i) => write!(f, "{i}"),
            Cell::Real(x) if x.is_finite() => write!(f, "{x}"),
            Cell::Real(_) => Ok(()),
            Cell::Bool(b) => f.write_str(if *b { "True" } else { "False" }),
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Cell::Text(t) => s.serialize_str(t),
            Cell::Int(i) => s.serialize_i64(*i),
            Cell::Real(x) if x.is_finite() => s.serialize_f64(*x),
            Cell::Real(_) => s.serialize_none(),
            Cell::Bool(b) => s.serialize_bool(*b),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_owned())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<u64> for Cell {
    fn from(i: u64) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

/// Where a row's numbers came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub stage: String,
    pub seed: Option<u64>,
    pub epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub sources: Vec<Source>,
}

struct RowObject<'a> {
    columns: &'a [String],
    cells: &'a [Cell],
}

impl Serialize for RowObject<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.columns.len()))?;
        for (c, v) in self.columns.iter().zip(self.cells) {
            m.serialize_entry(c, v)?;
        }
        m.end()
    }
}

struct Rows<'a>(&'a Table);

impl Serialize for Rows<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.rows.len()))?;
        for r in &self.0.rows {
            seq.serialize_element(&RowObject {
                columns: &self.0.columns,
                cells: r,
            })?;
        }
        seq.end()
    }
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_owned(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn push(&mut self, cells: Vec<Cell>, source: Source) -> Result<(), ReportError> {
        if cells.len() != self.columns.len() {
            return Err(ReportError::RowWidth {
                got: cells.len(),
                want: self.columns.len(),
            });
        }
        self.rows.push(cells);
        self.sources.push(source);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|c| c.to_string()))?;
        }
        w.into_inner().map_err(|e| ReportError::Io(e.into_error()))
    }

    /// `{"table": name, "columns": [...], "rows": [{column: value}]}`;
    /// non-finite reals become `null`.
    pub fn to_json(&self) -> Result<Vec<u8>, ReportError> {
        #[derive(Serialize)]
        struct Doc<'a> {
            table: &'a str,
            columns: &'a [String],
            rows: Rows<'a>,
        }
        let mut out = serde_json::to_vec_pretty(&Doc {
            table: &self.name,
            columns: &self.columns,
            rows: Rows(self),
        })?;
        out.push(b'\n');
        Ok(out)
    }

    /// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        std::fs::write(dir.join(format!("{}.csv", self.name)), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{}.json", self.name)), self.to_json()?)?;
        Ok(())
    }
}
