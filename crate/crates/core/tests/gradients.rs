mod common;

use common::*;
use iiloss::nn::{LayerSpec, Network, NetworkConfig};
use iiloss::rng;
use rand::Rng as _;

fn single(layers: Vec<LayerSpec>, input_dim: usize, z_dim: usize, seed: u64) -> Network<f64> {
    Network::new(NetworkConfig {
        input_dim,
        layers,
        z_dim,
        ce_head: None,
        seed,
    })
    .unwrap()
}

fn check_layers(layers: Vec<LayerSpec>, z_dim: usize) {
    let mut r = rng::stream(9, "grad-layers");
    for case in 0..5 {
        let mut net = single(layers.clone(), 4, z_dim, case);
        jitter(&mut net, &mut r);
        let x = random_matrix(&mut r, 6, 4, 1.5);
        let rz = random_matrix(&mut r, 6, z_dim, 1.0);
        let err = network_gradient_error(&mut net, &x, Objective::Linear(&rz, None), case);
        assert!(err < FD_TOLERANCE, "{layers:?} case {case}: {err:e}");
    }
}

#[test]
fn dense_layer() {
    check_layers(vec![LayerSpec::Dense { width: 3 }], 3);
}

#[test]
fn relu_layer() {
    check_layers(
        vec![
            LayerSpec::Dense { width: 5 },
            LayerSpec::Relu,
            LayerSpec::Dense { width: 3 },
        ],
        3,
    );
}

#[test]
fn batchnorm_layer() {
    check_layers(vec![LayerSpec::Dense { width: 3 }, LayerSpec::Batchnorm], 3);
}

#[test]
fn dropout_layer_keep_one_and_fixed_mask() {
    for keep_prob in [1.0, 0.7] {
        check_layers(
            vec![
                LayerSpec::Dense { width: 6 },
                LayerSpec::Relu,
                LayerSpec::Dropout { keep_prob },
                LayerSpec::Dense { width: 3 },
            ],
            3,
        );
    }
}

#[test]
fn head_gradients() {
    let mut r = rng::stream(3, "grad-head");
    for case in 0..5 {
        let mut net = random_network(&mut r, 3, 4, Some(3), case);
        let x = random_matrix(&mut r, 7, 3, 1.0);
        let rz = random_matrix(&mut r, 7, 4, 1.0);
        let rl = random_matrix(&mut r, 7, 3, 1.0);
        let err = network_gradient_error(&mut net, &x, Objective::Linear(&rz, Some(&rl)), case as u64);
        assert!(err < FD_TOLERANCE, "case {case}: {err:e}");
    }
}

#[test]
fn ii_loss_wrt_embeddings() {
    let mut r = rng::stream(5, "grad-ii");
    for case in 0..30 {
        let k = r.random_range(2..=4);
        let n = r.random_range(k + 1..=12);
        let dim = r.random_range(1..=4);
        let z = random_matrix(&mut r, n, dim, 2.0);
        let labels = random_labels(&mut r, n, k);
        let err = ii_loss_gradient_error(&z, &labels);
        assert!(err < FD_TOLERANCE, "case {case}: {err:e}");
    }
}

#[test]
fn cross_entropy_wrt_logits() {
    let mut r = rng::stream(6, "grad-ce");
    for case in 0..30 {
        let k = r.random_range(2..=5);
        let n = r.random_range(1..=8);
        let logits = random_matrix(&mut r, n, k, 4.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let err = cross_entropy_gradient_error(&logits, &labels);
        assert!(err < FD_TOLERANCE, "case {case}: {err:e}");
    }
}

#[test]
fn composed_network_losses() {
    let mut r = rng::stream(8, "grad-composed");
    for case in 0..12 {
        let k = 3;
        let n = 8;
        let labels = random_labels(&mut r, n, k);
        let mut net = random_network(&mut r, 3, 3, Some(k), case);
        let x = random_matrix(&mut r, n, 3, 1.0);
        let obj = match case % 3 {
            0 => Objective::IiLoss(&labels),
            1 => Objective::CrossEntropy(&labels),
            _ => Objective::IiPlusCe(&labels),
        };
        let err = network_gradient_error(&mut net, &x, obj, case as u64);
        assert!(err < FD_TOLERANCE, "case {case}: {err:e}");
    }
}
