//! Model file format.
//!
//! ```text
//! magic          8 bytes   "IIMODEL\0"
//! header_length  u64 LE
//! header         JSON, header_length bytes
//! arrays         little-endian f64, in the order listed by header.arrays
//! ```
//!
//! The header carries the format version, scalar type, network and training
//! configuration, class ids and counts, and the name and shape of every
//! array. All floating point state (weights, running statistics, class
//! means, threshold, loss curves) lives in the array section so the round
//! trip is bit-exact.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{IterationRecord, TrainConfig, TrainMetadata, TrainRegime, TrainedModel};
use crate::losses::ClassMeans;
use crate::nn::{BatchNorm, Dense, Layer, Network, NetworkConfig, NnError};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"IIMODEL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("file truncated while reading {field}")]
    Truncated { field: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("format_version: file has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("scalar: file stores {found} parameters, requested {expected}")]
    Scalar { found: String, expected: &'static str },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("{0} trailing bytes after the last array")]
    TrailingBytes(usize),
    #[error(transparent)]
    Network(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    scalar: String,
    regime: TrainRegime,
    network: NetworkConfig,
    train: TrainConfig,
    optimizer_steps: u64,
    train_instances: usize,
    class_ids: Vec<usize>,
    class_counts: Vec<usize>,
    curve_length: usize,
    curve_has_ce: bool,
    arrays: Vec<ArrayEntry>,
}

/// Array names and shapes in canonical order.
fn array_layout<S: Scalar>(model: &TrainedModel<S>) -> Vec<ArrayEntry> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push(ArrayEntry { name, shape });
    for (i, layer) in model.network.layers().iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                push(format!("layers.{i}.weight"), d.weight.shape().to_vec());
                push(format!("layers.{i}.bias"), vec![d.bias.len()]);
            }
            Layer::Batchnorm(bn) => {
                let w = bn.gamma.len();
                for part in ["gamma", "beta", "running_mean", "running_var"] {
                    push(format!("layers.{i}.{part}"), vec![w]);
                }
            }
            Layer::Relu | Layer::Dropout { .. } => {}
        }
    }
    if let Some(h) = model.network.head() {
        push("head.weight".into(), h.weight.shape().to_vec());
        push("head.bias".into(), vec![h.bias.len()]);
    }
    push("class_means".into(), model.class_means.means.shape().to_vec());
    push("threshold".into(), vec![1]);
    let n = model.metadata.curve.len();
    for part in ["intra_spread", "inter_separation", "ii_loss"] {
        push(format!("curve.{part}"), vec![n]);
    }
    if model.metadata.curve.first().is_some_and(|r| r.ce_loss.is_some()) {
        push("curve.ce_loss".into(), vec![n]);
    }
    out
}

fn array_values<S: Scalar>(model: &TrainedModel<S>) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    let mut ext = |it: &mut dyn Iterator<Item = S>| v.extend(it.map(Scalar::widen));
    for layer in model.network.layers() {
        match layer {
            Layer::Dense(d) => {
                ext(&mut d.weight.iter().copied());
                ext(&mut d.bias.iter().copied());
            }
            Layer::Batchnorm(bn) => {
                for a in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    ext(&mut a.iter().copied());
                }
            }
            Layer::Relu | Layer::Dropout { .. } => {}
        }
    }
    if let Some(h) = model.network.head() {
        ext(&mut h.weight.iter().copied());
        ext(&mut h.bias.iter().copied());
    }
    ext(&mut model.class_means.means.iter().copied());
    ext(&mut std::iter::once(model.threshold));
    let curve = &model.metadata.curve;
    v.extend(curve.iter().map(|r| r.intra_spread));
    v.extend(curve.iter().map(|r| r.inter_separation));
    v.extend(curve.iter().map(|r| r.ii_loss));
    if curve.first().is_some_and(|r| r.ce_loss.is_some()) {
        v.extend(curve.iter().map(|r| r.ce_loss.unwrap_or(f64::NAN)));
    }
    v
}

/// Serializes a model to bytes.
pub fn write_model<S: Scalar>(model: &TrainedModel<S>) -> Vec<u8> {
    let curve = &model.metadata.curve;
    let header = Header {
        format_version: FORMAT_VERSION,
        scalar: S::NAME.to_string(),
        regime: model.regime,
        network: model.network.config().clone(),
        train: model.metadata.train.clone(),
        optimizer_steps: model.metadata.optimizer_steps,
        train_instances: model.metadata.train_instances,
        class_ids: model.class_means.class_ids.clone(),
        class_counts: model.class_means.counts.clone(),
        curve_length: curve.len(),
        curve_has_ce: curve.first().is_some_and(|r| r.ce_loss.is_some()),
        arrays: array_layout(model),
    };
    let json = serde_json::to_vec(&header).expect("header is plain data");
    let values = array_values(model);
    let mut out = Vec::with_capacity(16 + json.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], ModelFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelFileError::Truncated {
                field: field.to_string(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn floats(&mut self, n: usize, field: &str) -> Result<Vec<f64>, ModelFileError> {
        let raw = self.take(
            n.checked_mul(8).ok_or_else(|| field_err(field, "size overflow"))?,
            field,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn field_err(field: &str, message: impl Into<String>) -> ModelFileError {
    ModelFileError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Arrays read back from the file, consumed in declared order.
struct Arrays {
    entries: std::vec::IntoIter<(ArrayEntry, Vec<f64>)>,
}

impl Arrays {
    fn next<S: Scalar>(&mut self, name: &str, shape: &[usize]) -> Result<Vec<S>, ModelFileError> {
        let (entry, data) = self
            .entries
            .next()
            .ok_or_else(|| field_err(name, "array missing from header"))?;
        if entry.name != name {
            return Err(field_err(
                name,
                format!("expected array {name}, header lists {}", entry.name),
            ));
        }
        if entry.shape != shape {
            return Err(field_err(
                name,
                format!("shape {:?} does not match configuration {shape:?}", entry.shape),
            ));
        }
        Ok(data.into_iter().map(S::of).collect())
    }

    fn vector<S: Scalar>(&mut self, name: &str, len: usize) -> Result<Array1<S>, ModelFileError> {
        Ok(Array1::from_vec(self.next(name, &[len])?))
    }

    fn matrix<S: Scalar>(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<S>, ModelFileError> {
        let v = self.next(name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("shape checked"))
    }
}

/// Parses a model from bytes produced by [`write_model`].
pub fn read_model<S: Scalar>(bytes: &[u8]) -> Result<TrainedModel<S>, ModelFileError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic").map_err(|_| ModelFileError::BadMagic)? != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let len = u64::from_le_bytes(cur.take(8, "header_length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| field_err("header_length", "too large"))?;
    let raw = cur.take(len, "header")?;
    let value: serde_json::Value = serde_json::from_slice(raw).map_err(|e| ModelFileError::Header(e.to_string()))?;
    // check the version before the full schema, which may differ across versions
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(ModelFileError::Version {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(ModelFileError::Header("missing field `format_version`".into())),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| ModelFileError::Header(e.to_string()))?;
    if header.scalar != S::NAME {
        return Err(ModelFileError::Scalar {
            found: header.scalar,
            expected: S::NAME,
        });
    }

    let mut entries = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let n = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| field_err(&entry.name, "shape overflows"))?;
        let data = cur.floats(n, &entry.name)?;
        entries.push((entry.clone(), data));
    }
    if cur.pos != bytes.len() {
        return Err(ModelFileError::TrailingBytes(bytes.len() - cur.pos));
    }
    let mut arrays = Arrays {
        entries: entries.into_iter(),
    };

    let config = header.network.clone();
    config.validate()?;
    let mut layers = Vec::with_capacity(config.layers.len());
    let mut width = config.input_dim;
    for (i, spec) in config.layers.iter().enumerate() {
        use crate::nn::LayerSpec;
        layers.push(match *spec {
            LayerSpec::Dense { width: out } => {
                let weight = arrays.matrix(&format!("layers.{i}.weight"), width, out)?;
                let bias = arrays.vector(&format!("layers.{i}.bias"), out)?;
                width = out;
                Layer::Dense(Dense { weight, bias })
            }
            LayerSpec::Batchnorm => Layer::Batchnorm(BatchNorm {
                gamma: arrays.vector(&format!("layers.{i}.gamma"), width)?,
                beta: arrays.vector(&format!("layers.{i}.beta"), width)?,
                running_mean: arrays.vector(&format!("layers.{i}.running_mean"), width)?,
                running_var: arrays.vector(&format!("layers.{i}.running_var"), width)?,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Dropout { keep_prob } => Layer::Dropout { keep_prob },
        });
    }
    let head = match config.ce_head {
        Some(k) => Some(Dense {
            weight: arrays.matrix("head.weight", config.z_dim, k)?,
            bias: arrays.vector("head.bias", k)?,
        }),
        None => None,
    };
    let network = Network::from_parts(config.clone(), layers, head)?;

    let k = header.class_ids.len();
    if header.class_counts.len() != k {
        return Err(field_err(
            "class_counts",
            format!("{} counts for {k} classes", header.class_counts.len()),
        ));
    }
    let means = arrays.matrix("class_means", k, config.z_dim)?;
    let threshold = arrays.next::<S>("threshold", &[1])?[0];
    let n = header.curve_length;
    let intra: Vec<f64> = arrays.next("curve.intra_spread", &[n])?;
    let inter: Vec<f64> = arrays.next("curve.inter_separation", &[n])?;
    let ii: Vec<f64> = arrays.next("curve.ii_loss", &[n])?;
    let ce: Option<Vec<f64>> = if header.curve_has_ce {
        Some(arrays.next("curve.ce_loss", &[n])?)
    } else {
        None
    };
    if let Some((extra, _)) = arrays.entries.next() {
        return Err(field_err(&extra.name, "unexpected array"));
    }
    let curve = (0..n)
        .map(|i| IterationRecord {
            intra_spread: intra[i],
            inter_separation: inter[i],
            ii_loss: ii[i],
            ce_loss: ce.as_ref().map(|c| c[i]),
        })
        .collect();

    Ok(TrainedModel {
        network,
        class_means: ClassMeans {
            means,
            counts: header.class_counts,
            class_ids: header.class_ids,
        },
        threshold,
        regime: header.regime,
        metadata: TrainMetadata {
            train: header.train,
            optimizer_steps: header.optimizer_steps,
            train_instances: header.train_instances,
            curve,
        },
    })
}

pub fn save_model<S: Scalar>(model: &TrainedModel<S>, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    let path = path.as_ref();
    std::fs::write(path, write_model(model)).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<TrainedModel<S>, ModelFileError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_model(&bytes)
}
