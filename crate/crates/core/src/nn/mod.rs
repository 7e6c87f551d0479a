//! Feed-forward network engine for the embedding `z = g(x)`.
//!
//! A network is an ordered stack of dense, ReLU, batch-normalization and
//! dropout layers ending in a linear z-layer (optionally batch-normalized),
//! plus an optional linear classification head on top of `z` whose logits feed
//! a softmax. Rows are instances, columns are features.

mod adam;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scalar::Scalar;

pub use adam::{AdamConfig, AdamState};

/// Batch-normalization epsilon added to the variance.
pub const BATCHNORM_EPS: f64 = 1e-5;
/// Weight of the previous value in the running mean/variance update.
pub const BATCHNORM_MOMENTUM: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input has {found} columns, network expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("batch of {rows} row(s) cannot be batch-normalized in train mode (need at least 2)")]
    DegenerateBatch { rows: usize },
    #[error("forward cache is stale: built at parameter version {cache}, network is at {network}")]
    StaleCache { cache: u64, network: u64 },
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("gradient/parameter layout mismatch: {0}")]
    Layout(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// One entry of the layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { width: usize },
    Relu,
    Batchnorm,
    Dropout { keep_prob: f64 },
}

/// Options for [`NetworkConfig::mlp`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpOptions {
    /// Batch normalization after every hidden dense layer.
    pub batchnorm: bool,
    /// Batch normalization after the z-layer.
    pub z_batchnorm: bool,
    /// Dropout keep probability on hidden layers; `1.0` disables dropout.
    pub keep_prob: f64,
}

impl Default for MlpOptions {
    fn default() -> Self {
        Self {
            batchnorm: true,
            z_batchnorm: true,
            keep_prob: 1.0,
        }
    }
}

/// Network topology. `layers` is the full stack from the input to `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub z_dim: usize,
    /// Width `K` of the linear softmax head fed by `z`, if present.
    pub ce_head: Option<usize>,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl NetworkConfig {
    /// Fully connected stack `dense -> [bn] -> relu -> [dropout]` per hidden
    /// width, then the linear z-layer and optional z batch normalization.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        z_dim: usize,
        ce_head: Option<usize>,
        options: MlpOptions,
        seed: u64,
    ) -> Self {
        let mut layers = Vec::new();
        for &width in hidden {
            layers.push(LayerSpec::Dense { width });
            if options.batchnorm {
                layers.push(LayerSpec::Batchnorm);
            }
            layers.push(LayerSpec::Relu);
            if options.keep_prob < 1.0 {
                layers.push(LayerSpec::Dropout {
                    keep_prob: options.keep_prob,
                });
            }
        }
        layers.push(LayerSpec::Dense { width: z_dim });
        if options.z_batchnorm {
            layers.push(LayerSpec::Batchnorm);
        }
        Self {
            input_dim,
            layers,
            z_dim,
            ce_head,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(NnError::Config(m));
        if self.input_dim == 0 {
            return err("input_dim must be at least 1".into());
        }
        let mut seen_dense = false;
        let mut last_dense = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { width } => {
                    if width == 0 {
                        return err(format!("layer {i}: dense width must be at least 1"));
                    }
                    seen_dense = true;
                    last_dense = Some(i);
                }
                LayerSpec::Batchnorm if !seen_dense => {
                    return err(format!("layer {i}: batchnorm before any dense layer"));
                }
                LayerSpec::Relu if !seen_dense => {
                    return err(format!("layer {i}: relu before any dense layer"));
                }
                LayerSpec::Dropout { keep_prob } if !(keep_prob > 0.0 && keep_prob <= 1.0) => {
                    return err(format!("layer {i}: keep_prob {keep_prob} not in (0, 1]"));
                }
                _ => {}
            }
        }
        let Some(last) = last_dense else {
            return err("network needs at least one dense layer".into());
        };
        if let LayerSpec::Dense { width } = self.layers[last] {
            if width != self.z_dim {
                return err(format!(
                    "final dense layer has width {width} but z_dim is {}",
                    self.z_dim
                ));
            }
        }
        if let Some(pos) = self.layers[last + 1..].iter().position(|l| *l != LayerSpec::Batchnorm) {
            return err(format!(
                "layer {}: only batchnorm may follow the linear z-layer",
                last + 1 + pos
            ));
        }
        if self.ce_head == Some(0) {
            return err("ce_head width must be at least 1".into());
        }
        Ok(())
    }

    /// Whether the z-layer is followed by batch normalization.
    pub fn z_batchnorm(&self) -> bool {
        self.layers.last() == Some(&LayerSpec::Batchnorm)
    }
}

/// Affine layer `y = x W + b` with `W` of shape `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Dense<S> {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || S::of(rng.random_range(-limit..limit)));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: ArrayView2<S>) -> Array2<S> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<S> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub running_mean: Array1<S>,
    pub running_var: Array1<S>,
}

impl<S: Scalar> BatchNorm<S> {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<S> {
    Dense(Dense<S>),
    Relu,
    Batchnorm(BatchNorm<S>),
    Dropout { keep_prob: f64 },
}

/// Learnable parameters and running statistics of a network.
///
/// Training-mode forward passes update the batch-norm running statistics;
/// inference is a pure function of `(self, x)`. Every optimizer step bumps an
/// internal version so that gradients cannot be computed from a forward cache
/// built with older parameters.
#[derive(Clone, Debug)]
pub struct Network<S> {
    config: NetworkConfig,
    layers: Vec<Layer<S>>,
    head: Option<Dense<S>>,
    version: u64,
}

/// Compares configuration and parameters; the cache version is ignored.
impl<S: PartialEq> PartialEq for Network<S> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers && self.head == other.head
    }
}

#[derive(Clone, Debug)]
enum LayerCache<S> {
    Dense { input: Array2<S> },
    Relu { output: Array2<S> },
    Batchnorm { xhat: Array2<S>, inv_std: Array1<S> },
    Dropout { mask: Option<Array2<S>> },
}

/// Outputs of a train-mode forward pass plus everything backward needs.
#[derive(Clone, Debug)]
pub struct ForwardPass<S> {
    pub z: Array2<S>,
    /// Head logits when the network has a classification head.
    pub logits: Option<Array2<S>>,
    caches: Vec<LayerCache<S>>,
    version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad<S> {
    Dense { weight: Array2<S>, bias: Array1<S> },
    Batchnorm { gamma: Array1<S>, beta: Array1<S> },
    None,
}

/// Parameter gradients, laid out like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<LayerGrad<S>>,
    pub head: Option<(Array2<S>, Array1<S>)>,
}

impl<S: Scalar> Gradients<S> {
    /// Flat views in canonical parameter order (see [`Network::params`]).
    pub fn slices(&self) -> Vec<&[S]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Dense { weight, bias } => {
                    out.push(weight.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                LayerGrad::Batchnorm { gamma, beta } => {
                    out.push(gamma.as_slice().expect("standard layout"));
                    out.push(beta.as_slice().expect("standard layout"));
                }
                LayerGrad::None => {}
            }
        }
        if let Some((w, b)) = &self.head {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn max_abs(&self) -> S {
        self.slices()
            .into_iter()
            .flatten()
            .fold(S::zero(), |m, v| m.max(v.abs()))
    }
}

fn column_sums<S: Scalar>(m: &Array2<S>) -> Array1<S> {
    m.sum_axis(Axis(0))
}

fn all_finite<S: Scalar>(m: &Array2<S>) -> bool {
    m.iter().all(|v| v.is_finite())
}

impl<S: Scalar> Network<S> {
    /// Builds a network with weights drawn uniformly from
    /// `±sqrt(6 / (fan_in + fan_out))`, zero biases, `γ = 1`, `β = 0`,
    /// running mean 0 and running variance 1. Deterministic in `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::Rng::seed_from_u64(config.seed);
        let mut width = config.input_dim;
        let mut layers = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            layers.push(match *spec {
                LayerSpec::Dense { width: out } => {
                    let d = Dense::init(width, out, &mut rng);
                    width = out;
                    Layer::Dense(d)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Batchnorm => Layer::Batchnorm(BatchNorm::new(width)),
                LayerSpec::Dropout { keep_prob } => Layer::Dropout { keep_prob },
            });
        }
        let head = config.ce_head.map(|k| Dense::init(config.z_dim, k, &mut rng));
        Ok(Self {
            config,
            layers,
            head,
            version: 0,
        })
    }

    /// Reassembles a network from stored parameters, checking every shape.
    pub fn from_parts(config: NetworkConfig, layers: Vec<Layer<S>>, head: Option<Dense<S>>) -> Result<Self> {
        config.validate()?;
        let reference = Network::<S>::new(config.clone())?;
        if layers.len() != reference.layers.len() {
            return Err(NnError::Layout(format!(
                "expected {} layers, found {}",
                reference.layers.len(),
                layers.len()
            )));
        }
        let net = Self {
            config,
            layers,
            head,
            version: 0,
        };
        let a: Vec<usize> = reference.params().iter().map(|p| p.len()).collect();
        let b: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        if a != b {
            return Err(NnError::Layout(format!(
                "parameter sizes {b:?} do not match configuration {a:?}"
            )));
        }
        for (i, (x, y)) in net.layers.iter().zip(&reference.layers).enumerate() {
            let same = match (x, y) {
                (Layer::Dense(p), Layer::Dense(q)) => p.weight.dim() == q.weight.dim(),
                (Layer::Batchnorm(p), Layer::Batchnorm(q)) => {
                    p.running_mean.len() == q.running_mean.len()
                        && p.running_var.len() == q.running_var.len()
                        && p.running_var.iter().all(|v| *v > S::zero())
                }
                (Layer::Relu, Layer::Relu) => true,
                (Layer::Dropout { keep_prob: p }, Layer::Dropout { keep_prob: q }) => p == q,
                _ => false,
            };
            if !same {
                return Err(NnError::Layout(format!("layer {i} does not match configuration")));
            }
        }
        match (&net.head, &reference.head) {
            (Some(p), Some(q)) if p.weight.dim() == q.weight.dim() => {}
            (None, None) => {}
            _ => {
                return Err(NnError::Layout(
                    "classification head does not match configuration".into(),
                ))
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn head(&self) -> Option<&Dense<S>> {
        self.head.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Batchnorm(_)))
    }

    fn check_input(&self, x: &ArrayView2<S>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(NnError::InputWidth {
                expected: self.config.input_dim,
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Train-mode forward pass: batch statistics, dropout masks drawn from
    /// `rng`, running statistics updated.
    pub fn forward_train<R: Rng>(&mut self, x: ArrayView2<S>, rng: &mut R) -> Result<ForwardPass<S>> {
        self.check_input(&x)?;
        let rows = x.nrows();
        if rows < 2 && self.has_batchnorm() {
            return Err(NnError::DegenerateBatch { rows });
        }
        let n = S::of(rows as f64);
        let eps = S::of(BATCHNORM_EPS);
        let momentum = S::of(BATCHNORM_MOMENTUM);
        let unbias = if rows > 1 { n / (n - S::one()) } else { S::one() };
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    let out = d.apply(h.view());
                    caches.push(LayerCache::Dense { input: h });
                    h = out;
                }
                Layer::Relu => {
                    h.mapv_inplace(|v| v.max(S::zero()));
                    caches.push(LayerCache::Relu { output: h.clone() });
                }
                Layer::Batchnorm(bn) => {
                    let mean = h.sum_axis(Axis(0)) / n;
                    let mut centered = h;
                    centered -= &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                    let inv_std = var.mapv(|v| S::one() / (v + eps).sqrt());
                    let xhat = centered * &inv_std;
                    let mut out = &xhat * &bn.gamma;
                    out += &bn.beta;
                    Zip::from(&mut bn.running_mean)
                        .and(&mean)
                        .for_each(|r, &m| *r = momentum * *r + (S::one() - momentum) * m);
                    Zip::from(&mut bn.running_var)
                        .and(&var)
                        .for_each(|r, &v| *r = momentum * *r + (S::one() - momentum) * v * unbias);
                    caches.push(LayerCache::Batchnorm { xhat, inv_std });
                    h = out;
                }
                Layer::Dropout { keep_prob } => {
                    if *keep_prob >= 1.0 {
                        caches.push(LayerCache::Dropout { mask: None });
                    } else {
                        let keep = *keep_prob;
                        let scale = S::of(1.0 / keep);
                        let mask = Array2::from_shape_simple_fn(h.raw_dim(), || {
                            if rng.random::<f64>() < keep {
                                scale
                            } else {
                                S::zero()
                            }
                        });
                        h *= &mask;
                        caches.push(LayerCache::Dropout { mask: Some(mask) });
                    }
                }
            }
        }
        if !all_finite(&h) {
            return Err(NnError::NonFinite("forward pass"));
        }
        let logits = self.head.as_ref().map(|d| d.apply(h.view()));
        Ok(ForwardPass {
            z: h,
            logits,
            caches,
            version: self.version,
        })
    }

    /// Infer-mode embedding: running statistics, no dropout.
    pub fn infer(&self, x: ArrayView2<S>) -> Result<Array2<S>> {
        self.infer_with_logits(x).map(|(z, _)| z)
    }

    /// Infer-mode embedding and head logits.
    pub fn infer_with_logits(&self, x: ArrayView2<S>) -> Result<(Array2<S>, Option<Array2<S>>)> {
        self.check_input(&x)?;
        let eps = S::of(BATCHNORM_EPS);
        let mut h = x.to_owned();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => h = d.apply(h.view()),
                Layer::Relu => h.mapv_inplace(|v| v.max(S::zero())),
                Layer::Batchnorm(bn) => {
                    let scale = Zip::from(&bn.gamma)
                        .and(&bn.running_var)
                        .map_collect(|&g, &v| g / (v + eps).sqrt());
                    let shift = &bn.beta - &(&bn.running_mean * &scale);
                    h *= &scale;
                    h += &shift;
                }
                Layer::Dropout { .. } => {}
            }
        }
        if !all_finite(&h) {
            return Err(NnError::NonFinite("inference"));
        }
        let logits = self.head.as_ref().map(|d| d.apply(h.view()));
        Ok((h, logits))
    }

    /// Backpropagates `grad_z` (and `grad_logits` through the head, if given)
    /// to every learnable parameter. Gradients flow through batch statistics.
    pub fn backward(
        &self,
        pass: &ForwardPass<S>,
        grad_z: ArrayView2<S>,
        grad_logits: Option<ArrayView2<S>>,
    ) -> Result<Gradients<S>> {
        if pass.version != self.version || pass.caches.len() != self.layers.len() {
            return Err(NnError::StaleCache {
                cache: pass.version,
                network: self.version,
            });
        }
        if grad_z.dim() != pass.z.dim() {
            return Err(NnError::Shape {
                what: "grad_z",
                expected: pass.z.dim(),
                found: grad_z.dim(),
            });
        }
        let mut g = grad_z.to_owned();
        let head = match (&self.head, grad_logits) {
            (Some(d), Some(gl)) => {
                let expected = (pass.z.nrows(), d.weight.ncols());
                if gl.dim() != expected {
                    return Err(NnError::Shape {
                        what: "grad_logits",
                        expected,
                        found: gl.dim(),
                    });
                }
                let dw = pass.z.t().dot(&gl);
                let db = gl.sum_axis(Axis(0));
                g += &gl.dot(&d.weight.t());
                Some((dw, db))
            }
            (Some(d), None) => Some((Array2::zeros(d.weight.raw_dim()), Array1::zeros(d.bias.len()))),
            (None, Some(_)) => return Err(NnError::Layout("grad_logits given but network has no head".into())),
            (None, None) => None,
        };
        let n = S::of(g.nrows() as f64);
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        for (i, (layer, cache)) in self.layers.iter().zip(&pass.caches).enumerate().rev() {
            match (layer, cache) {
                (Layer::Dense(d), LayerCache::Dense { input }) => {
                    let dw = input.t().dot(&g);
                    let db = column_sums(&g);
                    if i > 0 {
                        g = g.dot(&d.weight.t());
                    }
                    grads[i] = LayerGrad::Dense { weight: dw, bias: db };
                }
                (Layer::Relu, LayerCache::Relu { output }) => {
                    Zip::from(&mut g).and(output).for_each(|gv, &o| {
                        if o <= S::zero() {
                            *gv = S::zero();
                        }
                    });
                }
                (Layer::Batchnorm(bn), LayerCache::Batchnorm { xhat, inv_std }) => {
                    let dgamma = column_sums(&(&g * xhat));
                    let dbeta = column_sums(&g);
                    let dxhat = &g * &bn.gamma;
                    let sum1 = column_sums(&dxhat);
                    let sum2 = column_sums(&(&dxhat * xhat));
                    let mut dx = dxhat * n;
                    dx -= &sum1;
                    dx -= &(xhat * &sum2);
                    dx *= &(inv_std / n);
                    g = dx;
                    grads[i] = LayerGrad::Batchnorm {
                        gamma: dgamma,
                        beta: dbeta,
                    };
                }
                (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => {
                    if let Some(mask) = mask {
                        g *= mask;
                    }
                }
                _ => {
                    return Err(NnError::StaleCache {
                        cache: pass.version,
                        network: self.version,
                    })
                }
            }
        }
        Ok(Gradients { layers: grads, head })
    }

    /// Flat parameter views in canonical order: per layer (dense weight,
    /// dense bias | bn gamma, bn beta), then head weight and bias.
    pub fn params(&self) -> Vec<&[S]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weight.as_slice().expect("standard layout"));
                    out.push(d.bias.as_slice().expect("standard layout"));
                }
                Layer::Batchnorm(bn) => {
                    out.push(bn.gamma.as_slice().expect("standard layout"));
                    out.push(bn.beta.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        if let Some(d) = &self.head {
            out.push(d.weight.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        out
    }

    /// Mutable counterpart of [`Network::params`]. Invalidates forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut [S]> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weight.as_slice_mut().expect("standard layout"));
                    out.push(d.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::Batchnorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                    out.push(bn.beta.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        if let Some(d) = &mut self.head {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
