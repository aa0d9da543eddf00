use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::io::read_numeric_csv;

/// `S` samples with `n_x` features each, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    n_x: usize,
    y: Vec<f64>,
    labels: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(features: &DMatrix<f64>, targets: &DVector<f64>) -> Result<Self, DataError> {
        if features.nrows() != targets.len() {
            return Err(DataError::InvalidDataset(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        let x: Vec<f64> = features
            .row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
            .collect();
        Self::from_rows(x, features.ncols(), targets.iter().copied().collect())
    }

    /// `x` is row-major with `n_x` entries per sample.
    pub fn from_rows(x: Vec<f64>, n_x: usize, y: Vec<f64>) -> Result<Self, DataError> {
        if y.is_empty() {
            return Err(DataError::InvalidDataset("no samples".into()));
        }
        if n_x == 0 || x.len() != n_x * y.len() {
            return Err(DataError::InvalidDataset(format!(
                "feature buffer of length {} does not hold {} rows of width {n_x}",
                x.len(),
                y.len()
            )));
        }
        if let Some(i) = x.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(DataError::InvalidDataset(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(Dataset {
            x,
            n_x,
            y,
            labels: None,
        })
    }

    /// Attaches class labels used by [`super::split_by_label`].
    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self, DataError> {
        if labels.len() != self.len() {
            return Err(DataError::InvalidDataset(format!(
                "{} labels for {} samples",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_x
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_x..(i + 1) * self.n_x]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn features_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.n_x, &self.x)
    }

    /// Rescales every feature column to zero mean and unit variance
    /// (constant columns are only centered).
    pub fn standardized(&self) -> Dataset {
        let s = self.len() as f64;
        let mut out = self.clone();
        for f in 0..self.n_x {
            let mean = (0..self.len())
                .map(|i| self.x[i * self.n_x + f])
                .sum::<f64>()
                / s;
            let var = (0..self.len())
                .map(|i| (self.x[i * self.n_x + f] - mean).powi(2))
                .sum::<f64>()
                / s;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.len() {
                out.x[i * self.n_x + f] = (self.x[i * self.n_x + f] - mean) / sd;
            }
        }
        out
    }
}

/// Which column holds the target.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TargetColumn {
    #[default]
    Last,
    Index(usize),
    Name(String),
}

impl Serialize for TargetColumn {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TargetColumn::Last => s.serialize_str("last"),
            TargetColumn::Index(i) => s.serialize_u64(*i as u64),
            TargetColumn::Name(n) => s.serialize_str(n),
        }
    }
}

impl<'de> Deserialize<'de> for TargetColumn {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Index(i) => TargetColumn::Index(i),
            Raw::Name(n) if n == "last" => TargetColumn::Last,
            Raw::Name(n) => TargetColumn::Name(n),
        })
    }
}

/// Column roles for CSV ingestion: dropped columns, the target column, and
/// every other column is a feature.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ColumnRoles {
    #[serde(default)]
    pub drop: Vec<usize>,
    #[serde(default)]
    pub target: TargetColumn,
    /// Optional column holding integer class labels (kept out of the features).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset, DataError> {
    let table = read_numeric_csv(path)?;
    let width = table.ncols();
    if table.rows.is_empty() || width < 2 {
        return Err(DataError::InvalidDataset(format!(
            "{}: need at least one row with a feature and a target",
            path.display()
        )));
    }
    let target = match &roles.target {
        TargetColumn::Last => width - 1,
        TargetColumn::Index(i) => *i,
        TargetColumn::Name(n) => table.column_index(n).ok_or_else(|| {
            DataError::InvalidDataset(format!("{}: no column named {n:?}", path.display()))
        })?,
    };
    if target >= width || roles.drop.iter().any(|&c| c >= width) {
        return Err(DataError::InvalidDataset(format!(
            "{}: column index out of range (width {width})",
            path.display()
        )));
    }
    let feature_cols: Vec<usize> = (0..width)
        .filter(|c| *c != target && !roles.drop.contains(c) && Some(*c) != roles.label)
        .collect();
    if feature_cols.is_empty() {
        return Err(DataError::InvalidDataset("no feature columns left".into()));
    }
    let mut x = Vec::with_capacity(table.rows.len() * feature_cols.len());
    let mut y = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        x.extend(feature_cols.iter().map(|&c| row[c]));
        y.push(row[target]);
    }
    let ds = Dataset::from_rows(x, feature_cols.len(), y)?;
    match roles.label {
        Some(c) => {
            let labels = table.rows.iter().map(|r| r[c].round() as i64).collect();
            ds.with_labels(labels)
        }
        None => Ok(ds),
    }
}
