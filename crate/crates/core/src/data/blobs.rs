use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Isotropic Gaussian classes on a lattice.
///
/// Known class `c` is centered at the lattice point whose coordinates are the
/// base-`m` digits of `c` times `center_spacing`, with `m` the smallest side
/// such that `m^dim >= classes`. Outlier class `j` sits halfway between known
/// centers `j` and `j + 1` (cyclically), so it occupies the space between
/// known classes. Known classes are labeled `0..classes`, outlier classes
/// follow.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub center_spacing: f64,
    pub sigma: f64,
    pub outlier_classes: usize,
    pub seed: u64,
}

impl BlobSpec {
    fn lattice_side(&self) -> usize {
        let mut side = 1usize;
        while side.checked_pow(self.dim as u32).is_some_and(|v| v < self.classes) {
            side += 1;
        }
        side
    }

    /// Center of known class `c`.
    pub fn known_center(&self, c: usize) -> Vec<f64> {
        let side = self.lattice_side();
        let mut rest = c;
        (0..self.dim)
            .map(|_| {
                let digit = rest % side;
                rest /= side;
                digit as f64 * self.center_spacing
            })
            .collect()
    }

    /// Center of outlier class `j` (label `classes + j`).
    pub fn outlier_center(&self, j: usize) -> Vec<f64> {
        let a = self.known_center(j % self.classes);
        let b = if self.classes == 1 {
            let mut b = a.clone();
            b[0] += self.center_spacing;
            b
        } else {
            self.known_center((j + 1) % self.classes)
        };
        a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect()
    }
}

/// Samples the blobs described by `spec`. Deterministic in `spec.seed`.
pub fn synth_blobs<S: Scalar>(spec: &BlobSpec) -> Result<Dataset<S>> {
    if spec.classes == 0 || spec.dim == 0 {
        return Err(DataError::Blobs("need at least one class and one dimension".into()));
    }
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(DataError::Blobs(format!(
            "sigma {} must be finite and non-negative",
            spec.sigma
        )));
    }
    let total = spec.classes + spec.outlier_classes;
    let n = total * spec.n_per_class;
    let mut rng = rng::stream(spec.seed, "blobs");
    let mut features = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for label in 0..total {
        let center = if label < spec.classes {
            spec.known_center(label)
        } else {
            spec.outlier_center(label - spec.classes)
        };
        for _ in 0..spec.n_per_class {
            let mut row = features.row_mut(labels.len());
            for (v, c) in row.iter_mut().zip(&center) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = S::of(c + spec.sigma * e);
            }
            labels.push(label);
        }
    }
    Dataset::new(format!("blobs-{}x{}", spec.classes, spec.dim), features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;

    fn spec(classes: usize, sigma: f64) -> BlobSpec {
        BlobSpec {
            classes,
            n_per_class: 50,
            dim: 2,
            center_spacing: 10.0,
            sigma,
            outlier_classes: 2,
            seed: 4,
        }
    }

    #[test]
    fn lattice_and_interstitial_centers() {
        let s = spec(4, 0.3);
        assert_eq!(s.known_center(0), vec![0.0, 0.0]);
        assert_eq!(s.known_center(1), vec![10.0, 0.0]);
        assert_eq!(s.known_center(3), vec![10.0, 10.0]);
        assert_eq!(s.outlier_center(0), vec![5.0, 0.0]);
        assert_eq!(s.outlier_center(1), vec![5.0, 5.0]);
    }

    #[test]
    fn zero_sigma_collapses_to_centers() {
        let d: Dataset<f64> = synth_blobs(&BlobSpec {
            outlier_classes: 0,
            ..spec(3, 0.0)
        })
        .unwrap();
        let intra = losses::ii_loss(d.features.view(), &d.labels).unwrap().intra_spread;
        assert_eq!(intra, 0.0);
    }

    #[test]
    fn two_classes_separated_by_margin() {
        let d: Dataset<f64> = synth_blobs(&BlobSpec {
            outlier_classes: 0,
            ..spec(2, 0.1)
        })
        .unwrap();
        let xs = |c: usize| {
            d.features
                .column(0)
                .iter()
                .zip(&d.labels)
                .filter(|(_, l)| **l == c)
                .map(|(x, _)| *x)
                .collect::<Vec<_>>()
        };
        let max0 = xs(0).into_iter().fold(f64::MIN, f64::max);
        let min1 = xs(1).into_iter().fold(f64::MAX, f64::min);
        assert!(min1 - max0 > 9.0, "margin {}", min1 - max0);
    }

    #[test]
    fn histogram_and_determinism() {
        let a: Dataset<f64> = synth_blobs(&spec(4, 0.3)).unwrap();
        assert!(a.class_counts().values().all(|&c| c == 50));
        assert_eq!(a.classes(), (0..6).collect::<Vec<_>>());
        let b: Dataset<f64> = synth_blobs(&spec(4, 0.3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_negative_sigma() {
        assert!(synth_blobs::<f64>(&spec(2, -1.0)).is_err());
    }
}
