//! Mini-batch training of the embedding network.
//!
//! Each iteration samples a batch uniformly with replacement and takes one
//! Adam step on ii-loss, on cross entropy, or one on each in that order
//! (`ii_ce`, separate optimizer moments per objective). After the last
//! iteration the class means are recomputed over the whole training set in
//! inference mode and the outlier threshold is fitted on the training scores.

mod model_file;

use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::losses::{self, ClassMeans, LossError};
use crate::nn::{AdamConfig, AdamState, Network, NetworkConfig, NnError};
use crate::openset::{self, OpenSetError};
use crate::rng;
use crate::scalar::Scalar;

pub use model_file::{load_model, read_model, save_model, write_model, ModelFileError, FORMAT_VERSION, MAGIC};

/// Rows per chunk when embedding a whole dataset.
pub(crate) const EMBED_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    Ii,
    Ce,
    IiCe,
}

impl TrainRegime {
    pub fn uses_ce(self) -> bool {
        matches!(self, Self::Ce | Self::IiCe)
    }

    pub fn uses_ii(self) -> bool {
        matches!(self, Self::Ii | Self::IiCe)
    }
}

impl fmt::Display for TrainRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ii => "ii",
            Self::Ce => "ce",
            Self::IiCe => "ii+ce",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: TrainRegime,
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Assumed share of outliers in the training data when fitting the threshold.
    pub contamination_ratio: f64,
    /// Seed of the batching and dropout streams.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: TrainRegime::Ii,
            iterations: 5000,
            batch_size: 128,
            adam: AdamConfig::default(),
            contamination_ratio: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.contamination_ratio) {
            return bad(format!(
                "contamination_ratio {} not in [0, 1)",
                self.contamination_ratio
            ));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", a.learning_rate));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if a.epsilon.is_nan() || a.epsilon <= 0.0 {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Losses of one iteration's mini-batch (before its updates).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub intra_spread: f64,
    pub inter_separation: f64,
    pub ii_loss: f64,
    pub ce_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetadata {
    pub train: TrainConfig,
    pub optimizer_steps: u64,
    pub train_instances: usize,
    pub curve: Vec<IterationRecord>,
}

/// A trained network with the class means and outlier threshold fitted on
/// its training set.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel<S> {
    pub network: Network<S>,
    pub class_means: ClassMeans<S>,
    pub threshold: S,
    pub regime: TrainRegime,
    pub metadata: TrainMetadata,
}

impl<S: Scalar> TrainedModel<S> {
    pub fn num_classes(&self) -> usize {
        self.class_means.num_classes()
    }

    /// Inference-mode embeddings of `x`.
    pub fn embed(&self, x: ArrayView2<S>) -> Result<Array2<S>, NnError> {
        embed(&self.network, x)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("class {0} has no training instances")]
    EmptyClass(usize),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        curve: Vec<IterationRecord>,
    },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Threshold(#[from] OpenSetError),
}

/// Inference-mode embeddings, computed in fixed-size chunks.
pub fn embed<S: Scalar>(network: &Network<S>, x: ArrayView2<S>) -> Result<Array2<S>, NnError> {
    let mut z = Array2::zeros((x.nrows(), network.z_dim()));
    for (chunk, mut out) in x
        .axis_chunks_iter(Axis(0), EMBED_CHUNK)
        .zip(z.axis_chunks_iter_mut(Axis(0), EMBED_CHUNK))
    {
        out.assign(&network.infer(chunk)?);
    }
    Ok(z)
}

fn finite(v: f64) -> bool {
    v.is_finite()
}

/// Trains a network on `data`, whose labels must be exactly `0..K`.
pub fn train<S: Scalar>(
    data: &Dataset<S>,
    net_config: &NetworkConfig,
    config: &TrainConfig,
) -> Result<TrainedModel<S>, TrainError> {
    config.validate()?;
    let k = data.labels.iter().max().map_or(0, |m| m + 1);
    if k == 0 {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let counts = data.class_counts();
    if let Some(missing) = (0..k).find(|c| !counts.contains_key(c)) {
        return Err(TrainError::EmptyClass(missing));
    }
    if config.regime.uses_ce() && net_config.ce_head != Some(k) {
        return Err(TrainError::Config(format!(
            "regime {} needs a classification head of width {k}, network has {:?}",
            config.regime, net_config.ce_head
        )));
    }
    if net_config.input_dim != data.num_features() {
        return Err(NnError::InputWidth {
            expected: net_config.input_dim,
            found: data.num_features(),
        }
        .into());
    }

    let mut network = Network::<S>::new(net_config.clone())?;
    let mut adam_ii = AdamState::for_network(&network, config.adam);
    let mut adam_ce = AdamState::for_network(&network, config.adam);
    let mut batch_rng = rng::stream(config.seed, "batching");
    let mut dropout_rng = rng::stream(config.seed, "dropout");
    let n = data.len();
    let mut curve = Vec::with_capacity(config.iterations);
    let mut idx = vec![0usize; config.batch_size];
    let mut labels = vec![0usize; config.batch_size];

    let diverged = |iteration: usize, reason: String, curve: &Vec<IterationRecord>| TrainError::Diverged {
        iteration,
        reason,
        curve: curve.clone(),
    };

    for iteration in 0..config.iterations {
        for (i, l) in idx.iter_mut().zip(labels.iter_mut()) {
            *i = batch_rng.random_range(0..n);
            *l = data.labels[*i];
        }
        let x = data.features.select(Axis(0), &idx);

        let pass = network
            .forward_train(x.view(), &mut dropout_rng)
            .map_err(|e| diverged(iteration, e.to_string(), &curve))?;
        let (breakdown, grad_z) = losses::ii_loss_with_grad(pass.z.view(), &labels)?;
        let mut record = IterationRecord {
            intra_spread: breakdown.intra_spread.widen(),
            inter_separation: breakdown.inter_separation.widen(),
            ii_loss: breakdown.ii_loss.widen(),
            ce_loss: None,
        };
        if !finite(record.ii_loss) {
            return Err(diverged(iteration, "non-finite ii-loss".into(), &curve));
        }

        let ce_pass = match config.regime {
            TrainRegime::Ii => {
                let grads = network.backward(&pass, grad_z.view(), None)?;
                adam_ii.step(&mut network, &grads)?;
                None
            }
            TrainRegime::Ce => Some(pass),
            TrainRegime::IiCe => {
                let grads = network.backward(&pass, grad_z.view(), None)?;
                adam_ii.step(&mut network, &grads)?;
                let pass = network
                    .forward_train(x.view(), &mut dropout_rng)
                    .map_err(|e| diverged(iteration, e.to_string(), &curve))?;
                Some(pass)
            }
        };
        if let Some(pass) = ce_pass {
            let logits = pass.logits.as_ref().expect("head checked above");
            let (ce, grad_logits) = losses::cross_entropy(logits.view(), &labels)?;
            record.ce_loss = Some(ce.widen());
            if !finite(ce.widen()) {
                return Err(diverged(iteration, "non-finite cross entropy".into(), &curve));
            }
            let zeros = Array2::zeros(pass.z.raw_dim());
            let grads = network.backward(&pass, zeros.view(), Some(grad_logits.view()))?;
            adam_ce.step(&mut network, &grads)?;
        }
        curve.push(record);
    }

    let z = embed(&network, data.features.view()).map_err(|e| diverged(config.iterations, e.to_string(), &curve))?;
    let class_means = losses::class_means(z.view(), &data.labels)?;
    let scores: Vec<S> = z
        .rows()
        .into_iter()
        .map(|row| openset::nearest_mean(&class_means, row).1)
        .collect();
    let threshold = openset::estimate_threshold(&scores, config.contamination_ratio)?;

    Ok(TrainedModel {
        network,
        class_means,
        threshold,
        regime: config.regime,
        metadata: TrainMetadata {
            train: config.clone(),
            optimizer_steps: adam_ii.steps() + adam_ce.steps(),
            train_instances: n,
            curve,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobSpec};
    use crate::nn::MlpOptions;

    fn blobs() -> Dataset<f64> {
        synth_blobs(&BlobSpec {
            classes: 3,
            n_per_class: 40,
            dim: 2,
            center_spacing: 10.0,
            sigma: 0.3,
            outlier_classes: 0,
            seed: 1,
        })
        .unwrap()
    }

    fn quick(regime: TrainRegime) -> TrainConfig {
        TrainConfig {
            regime,
            iterations: 20,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ii_ce_takes_two_steps_per_iteration() {
        let d = blobs();
        let net = NetworkConfig::mlp(2, &[8], 3, Some(3), MlpOptions::default(), 0);
        let m = train(&d, &net, &quick(TrainRegime::IiCe)).unwrap();
        assert_eq!(m.metadata.optimizer_steps, 40);
        assert_eq!(m.metadata.curve.len(), 20);
        assert!(m.metadata.curve.iter().all(|r| r.ce_loss.is_some()));
        let m = train(&d, &net, &quick(TrainRegime::Ii)).unwrap();
        assert_eq!(m.metadata.optimizer_steps, 20);
    }

    #[test]
    fn ce_needs_head() {
        let d = blobs();
        let net = NetworkConfig::mlp(2, &[8], 3, None, MlpOptions::default(), 0);
        assert!(matches!(
            train(&d, &net, &quick(TrainRegime::Ce)),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn missing_class_is_error() {
        let d = blobs().relabel(|l| if l == 1 { 2 } else { l });
        let net = NetworkConfig::mlp(2, &[8], 3, None, MlpOptions::default(), 0);
        assert!(matches!(
            train(&d, &net, &quick(TrainRegime::Ii)),
            Err(TrainError::EmptyClass(1))
        ));
    }

    #[test]
    fn divergence_reports_iteration() {
        let d = blobs();
        // no batchnorm on z and a huge step size: separation explodes
        let opts = MlpOptions {
            batchnorm: false,
            z_batchnorm: false,
            keep_prob: 1.0,
        };
        let net = NetworkConfig::mlp(2, &[8], 3, None, opts, 0);
        let mut cfg = quick(TrainRegime::Ii);
        cfg.iterations = 200;
        cfg.adam.learning_rate = 1e200;
        match train(&d, &net, &cfg) {
            Err(TrainError::Diverged { iteration, curve, .. }) => assert_eq!(curve.len(), iteration),
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|m| m.metadata.curve.last().copied())
            ),
        }
    }

    #[test]
    fn bad_config_rejected() {
        for c in [
            TrainConfig {
                batch_size: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                contamination_ratio: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
