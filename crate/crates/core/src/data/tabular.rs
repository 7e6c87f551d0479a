use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FeatureScaling, Result};
use crate::scalar::Scalar;

/// Which column of a CSV row holds the integer class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelColumn {
    First,
    Last,
    /// Zero-based column index.
    Index(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvOptions {
    pub label_column: LabelColumn,
    pub has_header: bool,
    /// Standardize every feature column to zero mean and unit variance.
    pub standardize: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            label_column: LabelColumn::Last,
            has_header: false,
            standardize: false,
        }
    }
}

/// Parses a rectangular numeric table. Error positions are 1-based and
/// count data rows only (a header row is not counted).
pub fn parse_csv<S: Scalar, R: Read>(name: &str, reader: R, options: CsvOptions) -> Result<Dataset<S>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Cell {
            row,
            col: 0,
            message: e.to_string(),
        })?;
        let n = record.len();
        let expected = *width.get_or_insert(n);
        if n != expected {
            return Err(DataError::Ragged {
                row,
                expected,
                found: n,
            });
        }
        if n < 2 {
            return Err(DataError::Cell {
                row,
                col: 1,
                message: "need at least one feature column and a label column".into(),
            });
        }
        let label_at = match options.label_column {
            LabelColumn::First => 0,
            LabelColumn::Last => n - 1,
            LabelColumn::Index(c) if c < n => c,
            LabelColumn::Index(c) => {
                return Err(DataError::Cell {
                    row,
                    col: c + 1,
                    message: format!("label column missing from a row of {n} fields"),
                })
            }
        };
        for (c, cell) in record.iter().enumerate() {
            let col = c + 1;
            if c == label_at {
                let label = cell.parse::<usize>().map_err(|_| DataError::Cell {
                    row,
                    col,
                    message: format!("label {cell:?} is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let v = cell.parse::<f64>().map_err(|_| DataError::Cell {
                    row,
                    col,
                    message: format!("{cell:?} is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Cell {
                        row,
                        col,
                        message: format!("{cell:?} is not finite"),
                    });
                }
                values.push(v);
            }
        }
    }
    let Some(width) = width else {
        return Err(DataError::Empty(name.to_string()));
    };
    let cols = width - 1;
    let mut features = Array2::from_shape_vec((labels.len(), cols), values).expect("rows checked rectangular");
    let mut scaling = FeatureScaling::None;
    if options.standardize {
        let n = labels.len() as f64;
        let mean: Vec<f64> = features.columns().into_iter().map(|c| c.sum() / n).collect();
        let std: Vec<f64> = features
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        for mut row in features.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        scaling = FeatureScaling::Standardized { mean, std };
    }
    Ok(Dataset::new(name, features.mapv(S::of), labels)?.with_scaling(scaling))
}

/// Loads a labeled CSV file. See [`parse_csv`].
pub fn load_csv<S: Scalar>(path: impl AsRef<Path>, options: CsvOptions) -> Result<Dataset<S>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&name, file, options)
}
