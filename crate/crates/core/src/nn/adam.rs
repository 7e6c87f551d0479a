use serde::{Deserialize, Serialize};

use super::{Gradients, Network, NnError, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters. Defaults: learning rate 0.001, beta1 0.5,
/// beta2 0.999, epsilon 1e-8.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Zeroed moments for parameter blocks of the given lengths.
    pub fn with_shapes(lengths: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: lengths.iter().map(|&n| vec![S::zero(); n]).collect(),
            second: lengths.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn for_network(network: &Network<S>, config: AdamConfig) -> Self {
        let lengths: Vec<usize> = network.params().iter().map(|p| p.len()).collect();
        Self::with_shapes(&lengths, config)
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NnError::Layout(format!(
                "optimizer has {} blocks, got {} parameter and {} gradient blocks",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(NnError::Layout(format!(
                    "block {i}: optimizer length {}, parameter {}, gradient {}",
                    m.len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = S::of(1.0 / (1.0 - beta1.powi(t)));
        let c2 = S::of(1.0 / (1.0 - beta2.powi(t)));
        let (b1, b2) = (S::of(beta1), S::of(beta2));
        let (one_b1, one_b2) = (S::of(1.0 - beta1), S::of(1.0 - beta2));
        let (lr, eps) = (S::of(learning_rate), S::of(epsilon));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((w, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * c1;
                let v_hat = *vi * c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Applies one update to every learnable parameter of `network`.
    pub fn step(&mut self, network: &mut Network<S>, grads: &Gradients<S>) -> Result<()> {
        let g = grads.slices();
        let mut p = network.params_mut();
        self.update(&mut p, &g)
    }
}
