//! IDX (MNIST) binary format.
//!
//! Big-endian. Image files start with magic 2051 (`00 00 08 03`: unsigned
//! bytes, three dimensions) followed by count, rows and cols; label files
//! with magic 2049 (`00 00 08 01`) followed by count. The payload is raw
//! bytes.

use std::path::Path;

use ndarray::Array2;

use super::{DataError, Dataset, FeatureScaling, Result};
use crate::scalar::Scalar;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

/// Raw contents of an IDX image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            what,
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, "magic number")?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            what: "image data",
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "label header")? as usize;
    if bytes.len() != 8 + count {
        return Err(DataError::Truncated {
            what: "label data",
            expected: 8 + count,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from parsed IDX contents, scaling pixels to `[0, 1]`.
pub fn dataset_from_idx<S: Scalar>(name: &str, images: &IdxImages, labels: &[u8]) -> Result<Dataset<S>> {
    if images.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let dim = images.rows * images.cols;
    let features = Array2::from_shape_vec(
        (images.count, dim),
        images.pixels.iter().map(|&p| S::of(p as f64 / 255.0)).collect(),
    )
    .expect("pixel count checked by parser");
    Ok(
        Dataset::new(name, features, labels.iter().map(|&l| l as usize).collect())?.with_scaling(
            FeatureScaling::Pixels {
                rows: images.rows,
                cols: images.cols,
            },
        ),
    )
}

/// Inverse of [`dataset_from_idx`]: image and label file bytes.
pub fn to_idx_bytes<S: Scalar>(data: &Dataset<S>) -> Result<(Vec<u8>, Vec<u8>)> {
    let FeatureScaling::Pixels { rows, cols } = data.scaling else {
        return Err(DataError::Encode("dataset was not loaded from pixels".into()));
    };
    if rows * cols != data.num_features() {
        return Err(DataError::Encode(format!(
            "{rows}x{cols} images but {} features",
            data.num_features()
        )));
    }
    let mut pixels = Vec::with_capacity(data.features.len());
    for &v in data.features.iter() {
        let p = (v.widen() * 255.0).round();
        if !(0.0..=255.0).contains(&p) {
            return Err(DataError::Encode(format!("feature {} is not a pixel", v.widen())));
        }
        pixels.push(p as u8);
    }
    let mut labels = Vec::with_capacity(data.len());
    for &l in &data.labels {
        labels.push(u8::try_from(l).map_err(|_| DataError::Encode(format!("label {l} exceeds a byte")))?);
    }
    let images = IdxImages {
        count: data.len(),
        rows,
        cols,
        pixels,
    };
    Ok((encode_images(&images), encode_labels(&labels)))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an uncompressed IDX image/label file pair.
pub fn load_idx<S: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<S>> {
    let images_path = images_path.as_ref();
    let images = parse_images(&read(images_path)?)?;
    let labels = parse_labels(&read(labels_path.as_ref())?)?;
    let name = images_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    dataset_from_idx(&name, &images, &labels)
}
