//! Datasets, loaders and the open-set split.

mod blobs;
pub mod idx;
mod split;
mod tabular;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use blobs::{synth_blobs, BlobSpec};
pub use idx::load_idx;
pub use split::{
    apply_manifest, open_split, KnownClasses, OpenSetSplit, SplitManifest, SplitMode, SplitOptions, SplitSource,
    TestSet,
};
pub use tabular::{load_csv, parse_csv, CsvOptions, LabelColumn};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("image file has {images} images but label file has {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("row {row}, column {col}: {message}")]
    Cell { row: usize, col: usize, message: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("{0} is empty")]
    Empty(String),
    #[error("features and labels disagree: {rows} rows, {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid blob specification: {0}")]
    Blobs(String),
    #[error("cannot encode as IDX: {0}")]
    Encode(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// How raw features were transformed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureScaling {
    None,
    /// 8-bit pixels divided by 255; images of `rows x cols` flattened row-major.
    Pixels {
        rows: usize,
        cols: usize,
    },
    /// Per-column `(x - mean) / std`.
    Standardized {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

/// Labeled instances. Rows of `features` are instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub name: String,
    pub features: Array2<S>,
    pub labels: Vec<usize>,
    pub scaling: FeatureScaling,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(name: impl Into<String>, features: Array2<S>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(DataError::LabelCount {
                rows: features.nrows(),
                labels: labels.len(),
            });
        }
        if let Some(((row, col), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite { row, col });
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            scaling: FeatureScaling::None,
        })
    }

    pub fn with_scaling(mut self, scaling: FeatureScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Instance count per label, ascending by label.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.class_counts().into_keys().collect()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            scaling: self.scaling.clone(),
        }
    }

    /// Rewrites every label through `map`.
    pub fn relabel(mut self, map: impl Fn(usize) -> usize) -> Self {
        self.labels.iter_mut().for_each(|l| *l = map(*l));
        self
    }
}
