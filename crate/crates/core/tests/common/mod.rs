//! Shared helpers for integration tests: random instances and central
//! finite-difference gradient checks.
#![allow(dead_code)]

use iiloss::losses;
use iiloss::nn::{LayerSpec, Network, NetworkConfig};
use iiloss::rng::{self, Rng};
use ndarray::Array2;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with the denominator floored at `1e-6 * max(1, scale)`,
/// where `scale` is the summed magnitude of the loss's additive terms.
/// A parameter with zero true gradient (a bias feeding a batchnorm) still
/// shows central-difference noise of about `eps * scale / h`; the floor
/// keeps that rounding from reading as a gradient error.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = 1e-6 * scale.max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Labels in `0..k` covering at least two classes.
pub fn random_labels(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

/// Objective applied to the network outputs.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// `sum(r * z) + sum(q * logits)`.
    Linear(&'a Array2<f64>, Option<&'a Array2<f64>>),
    IiLoss(&'a [usize]),
    CrossEntropy(&'a [usize]),
    IiPlusCe(&'a [usize]),
}

fn objective(net: &mut Network<f64>, x: &Array2<f64>, obj: Objective, seed: u64) -> Evaluated {
    let mut r = rng::stream(seed, "fd-dropout");
    let pass = net.forward_train(x.view(), &mut r).expect("forward");
    let (loss, scale, gz, gl) = match obj {
        Objective::Linear(rz, rl) => {
            let terms = &pass.z * rz;
            let (mut loss, mut scale) = (terms.sum(), terms.mapv(f64::abs).sum());
            if let (Some(rl), Some(l)) = (rl, &pass.logits) {
                let terms = l * rl;
                loss += terms.sum();
                scale += terms.mapv(f64::abs).sum();
            }
            (loss, scale, rz.clone(), rl.cloned())
        }
        Objective::IiLoss(labels) => {
            let (b, g) = losses::ii_loss_with_grad(pass.z.view(), labels).expect("ii");
            (b.ii_loss, b.intra_spread + b.inter_separation, g, None)
        }
        Objective::CrossEntropy(labels) => {
            let (l, g) = losses::cross_entropy(pass.logits.as_ref().expect("head").view(), labels).expect("ce");
            (l, l, Array2::zeros(pass.z.raw_dim()), Some(g))
        }
        Objective::IiPlusCe(labels) => {
            let (b, gz) = losses::ii_loss_with_grad(pass.z.view(), labels).expect("ii");
            let (l, gl) = losses::cross_entropy(pass.logits.as_ref().expect("head").view(), labels).expect("ce");
            (b.ii_loss + l, b.intra_spread + b.inter_separation + l, gz, Some(gl))
        }
    };
    Evaluated {
        loss,
        scale,
        snapshot: net.clone(),
        pass,
        grad_z: gz,
        grad_logits: gl,
    }
}

struct Evaluated {
    loss: f64,
    scale: f64,
    snapshot: Network<f64>,
    pass: iiloss::nn::ForwardPass<f64>,
    grad_z: Array2<f64>,
    grad_logits: Option<Array2<f64>>,
}

/// Max relative error between backprop and central differences over every
/// parameter of `net`.
pub fn network_gradient_error(net: &mut Network<f64>, x: &Array2<f64>, obj: Objective, seed: u64) -> f64 {
    let base = objective(net, x, obj, seed);
    let grads = base
        .snapshot
        .backward(
            &base.pass,
            base.grad_z.view(),
            base.grad_logits.as_ref().map(|g| g.view()),
        )
        .expect("backward");
    let analytic: Vec<f64> = grads.slices().into_iter().flatten().copied().collect();
    let mut worst = 0.0f64;
    let mut flat = 0;
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    for (block, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = net.params()[block][i];
            net.params_mut()[block][i] = orig + FD_STEP;
            let up = objective(net, x, obj, seed).loss;
            net.params_mut()[block][i] = orig - FD_STEP;
            let down = objective(net, x, obj, seed).loss;
            net.params_mut()[block][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[flat], numeric, base.scale));
            flat += 1;
        }
    }
    worst
}

/// Max relative error of a loss gradient with respect to its input matrix.
/// `scale` is the summed magnitude of the loss terms at `input`.
pub fn input_gradient_error(
    input: &Array2<f64>,
    analytic: &Array2<f64>,
    scale: f64,
    f: impl Fn(&Array2<f64>) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for idx in ndarray::indices(input.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + FD_STEP;
        let up = f(&probe);
        probe[idx] = orig - FD_STEP;
        let down = f(&probe);
        probe[idx] = orig;
        worst = worst.max(relative_error(analytic[idx], (up - down) / (2.0 * FD_STEP), scale));
    }
    worst
}

/// Randomizes every parameter, including batchnorm scale and shift.
pub fn jitter(net: &mut Network<f64>, rng: &mut Rng) {
    for p in net.params_mut() {
        for v in p.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
}

/// A random network of at most three layers of each kind, at most 8 units.
pub fn random_network(rng: &mut Rng, input_dim: usize, z_dim: usize, head: Option<usize>, case: usize) -> Network<f64> {
    let hidden = rng.random_range(2..=8);
    let mut layers = vec![LayerSpec::Dense { width: hidden }];
    match case % 4 {
        0 => layers.push(LayerSpec::Relu),
        1 => layers.push(LayerSpec::Batchnorm),
        2 => layers.extend([LayerSpec::Batchnorm, LayerSpec::Relu]),
        _ => layers.extend([LayerSpec::Relu, LayerSpec::Dropout { keep_prob: 1.0 }]),
    }
    layers.push(LayerSpec::Dense { width: z_dim });
    if case.is_multiple_of(3) {
        layers.push(LayerSpec::Batchnorm);
    }
    let config = NetworkConfig {
        input_dim,
        layers,
        z_dim,
        ce_head: head,
        seed: rng.random(),
    };
    let mut net = Network::new(config).expect("valid config");
    jitter(&mut net, rng);
    net
}

/// Checks the ii-loss gradient with respect to the embeddings.
pub fn ii_loss_gradient_error(z: &Array2<f64>, labels: &[usize]) -> f64 {
    let (b, g) = losses::ii_loss_with_grad(z.view(), labels).expect("ii");
    input_gradient_error(z, &g, b.intra_spread + b.inter_separation, |m| {
        losses::ii_loss(m.view(), labels).expect("ii").ii_loss
    })
}

/// Checks the cross-entropy gradient with respect to the logits.
pub fn cross_entropy_gradient_error(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let (l, g) = losses::cross_entropy(logits.view(), labels).expect("ce");
    input_gradient_error(logits, &g, l, |m| {
        losses::cross_entropy(m.view(), labels).expect("ce").0
    })
}
