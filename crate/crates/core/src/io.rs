//! Plain-text numeric I/O: dense matrices and column tables as CSV.
//!
//! Numbers are written with 17 significant digits so that a write/read round
//! trip is lossless.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}, line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn csv(path: &Path, source: csv::Error) -> Self {
        IoError::Csv {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Lossless decimal representation (17 significant digits).
pub fn format_f64(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    format!("{x:.16e}")
}

fn parse_f64(s: &str) -> Option<f64> {
    let t = s.trim();
    match t {
        "inf" | "+inf" | "Infinity" => Some(f64::INFINITY),
        "-inf" | "-Infinity" => Some(f64::NEG_INFINITY),
        _ => t.parse().ok(),
    }
}

/// A table of numeric columns with an optional header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NumericTable {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn ncols(&self) -> usize {
        self.rows
            .first()
            .map(|r| r.len())
            .or_else(|| self.header.as_ref().map(|h| h.len()))
            .unwrap_or(0)
    }

    /// Index of a named column (requires a header).
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.as_ref()?.iter().position(|h| h == name)
    }

    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[idx]).collect()
    }
}

/// Reads a comma-separated numeric table. A first row that does not parse as
/// numbers is treated as a header. Blank lines are skipped; all rows must have
/// the same width.
pub fn read_numeric_csv(path: &Path) -> Result<NumericTable, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| IoError::csv(path, e))?;
    let mut table = NumericTable::default();
    let mut width: Option<usize> = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| IoError::csv(path, e))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Option<Vec<f64>> = rec.iter().map(parse_f64).collect();
        match parsed {
            Some(row) => {
                if let Some(w) = width {
                    if row.len() != w {
                        return Err(IoError::Parse {
                            path: path.to_path_buf(),
                            line: i + 1,
                            msg: format!("expected {w} fields, found {}", row.len()),
                        });
                    }
                }
                width = Some(row.len());
                table.rows.push(row);
            }
            None if table.rows.is_empty() && table.header.is_none() => {
                table.header = Some(rec.iter().map(str::to_string).collect());
                width = Some(rec.len());
            }
            None => {
                return Err(IoError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("non-numeric field in {:?}", rec.iter().collect::<Vec<_>>()),
                })
            }
        }
    }
    Ok(table)
}

pub fn write_numeric_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| IoError::io(path, e);
    if !header.is_empty() {
        writeln!(w, "{}", header.join(",")).map_err(io)?;
    }
    for row in rows {
        let line: Vec<String> = row.iter().map(|&x| format_f64(x)).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Row-major dense matrix, no header.
pub fn write_matrix_csv(path: &Path, a: &DMatrix<f64>) -> Result<(), IoError> {
    let rows: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
    write_numeric_csv(path, &[], &rows)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, IoError> {
    let table = read_numeric_csv(path)?;
    if table.rows.is_empty() {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "empty matrix".into(),
        });
    }
    let (r, c) = (table.rows.len(), table.ncols());
    let flat: Vec<f64> = table.rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

/// Two-column `iter,loss` curve (header optional; extra columns ignored
/// unless a column named `loss`/`loss_avg_time` exists).
pub fn read_loss_curve(path: &Path) -> Result<Vec<(usize, f64)>, IoError> {
    let table = read_numeric_csv(path)?;
    let bad = |msg: &str| IoError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.into(),
    };
    if table.ncols() < 2 {
        return Err(bad(
            "loss curve needs an iteration column and a loss column",
        ));
    }
    let loss_col = ["loss_avg_time", "loss"]
        .iter()
        .find_map(|n| table.column_index(n))
        .unwrap_or(1);
    let iter_col = table.column_index("iter").unwrap_or(0);
    table
        .rows
        .iter()
        .map(|r| {
            let k = r[iter_col];
            if k < 0.0 || k.fract() != 0.0 {
                return Err(bad("iteration index must be a non-negative integer"));
            }
            Ok((k as usize, r[loss_col]))
        })
        .collect()
}

/// Serde adapter writing non-finite floats as the strings `"inf"`, `"-inf"`
/// and `"nan"` (plain JSON has no representation for them).
pub mod json_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&super::format_f64(*x))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
            Null(()),
        }
        match Raw::deserialize(d)? {
            Raw::N(x) => Ok(x),
            Raw::Null(()) => Ok(f64::NAN),
            Raw::S(s) => super::parse_f64(&s)
                .or_else(|| (s == "nan").then_some(f64::NAN))
                .ok_or_else(|| serde::de::Error::custom(format!("not a number: '{s}'"))),
        }
    }
}
