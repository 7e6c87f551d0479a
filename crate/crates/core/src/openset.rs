//! Outlier scores, the global threshold, and the K+1 decision rule.

use std::fmt;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{self, ClassMeans};
use crate::nn::NnError;
use crate::scalar::Scalar;
use crate::training::{TrainRegime, TrainedModel};

/// A known class id or the extra "unknown" label. Sorts known ids first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpenLabel {
    Known(usize),
    Unknown,
}

impl OpenLabel {
    pub fn is_unknown(self) -> bool {
        self == OpenLabel::Unknown
    }
}

impl fmt::Display for OpenLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpenLabel::Known(c) => write!(f, "{c}"),
            OpenLabel::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Debug, Error)]
pub enum OpenSetError {
    #[error("cannot estimate a threshold from an empty score list")]
    EmptyScores,
    #[error("contamination ratio {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("score list contains a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenPrediction<S> {
    pub label: OpenLabel,
    pub score: S,
    /// Known-class probabilities, in class-mean order.
    pub probs: Vec<S>,
}

/// Index of the closest class mean and its squared distance.
/// Ties go to the lower index.
pub fn nearest_mean<S: Scalar>(means: &ClassMeans<S>, z: ArrayView1<S>) -> (usize, S) {
    let mut best = (0, S::infinity());
    for (j, mu) in means.means.rows().into_iter().enumerate() {
        let d = losses::squared_distance(mu, z);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Softmax of negative squared distances, shifted by the smallest distance.
pub fn distance_probabilities<S: Scalar>(distances: &[S]) -> Vec<S> {
    let mut v: Vec<S> = distances.iter().map(|&d| -d).collect();
    losses::softmax_in_place(&mut v);
    v
}

/// Nearest-rank percentile: the score at rank `ceil((1 - r) n)`, clamped to `[1, n]`.
pub fn estimate_threshold<S: Scalar>(scores: &[S], ratio: f64) -> Result<S, OpenSetError> {
    if scores.is_empty() {
        return Err(OpenSetError::EmptyScores);
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(OpenSetError::BadRatio(ratio));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(OpenSetError::NonFinite);
    }
    let n = scores.len();
    let exact = (1.0 - ratio) * n as f64;
    let near = exact.round();
    let rank = if (exact - near).abs() < 1e-9 {
        near
    } else {
        exact.ceil()
    };
    let rank = (rank as usize).clamp(1, n);
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(sorted[rank - 1])
}

/// The K+1 decision: `unknown` when `score > threshold`, else the most likely known class.
pub fn open_decision<S: Scalar>(score: S, threshold: S, probs: &[S], class_ids: &[usize]) -> OpenLabel {
    if score > threshold {
        return OpenLabel::Unknown;
    }
    OpenLabel::Known(class_ids[argmax(probs)])
}

pub(crate) fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> TrainedModel<S> {
    /// Outlier score of every row of `x`.
    pub fn outlier_scores(&self, x: ArrayView2<S>) -> Result<Vec<S>, NnError> {
        let z = self.embed(x)?;
        Ok(z.rows()
            .into_iter()
            .map(|r| nearest_mean(&self.class_means, r).1)
            .collect())
    }

    pub fn outlier_score(&self, x: ArrayView1<S>) -> Result<S, NnError> {
        Ok(self.outlier_scores(x.insert_axis(ndarray::Axis(0)))?[0])
    }

    /// Distance-based class probabilities for every row of `x`.
    pub fn class_probabilities(&self, x: ArrayView2<S>) -> Result<Vec<Vec<S>>, NnError> {
        let z = self.embed(x)?;
        Ok(z.rows()
            .into_iter()
            .map(|r| distance_probabilities(&self.class_means.squared_distances(r)))
            .collect())
    }

    /// Open-set predictions for every row of `x`.
    pub fn predict_open_batch(&self, x: ArrayView2<S>) -> Result<Vec<OpenPrediction<S>>, NnError> {
        let mut out = Vec::with_capacity(x.nrows());
        for start in (0..x.nrows()).step_by(crate::training::EMBED_CHUNK) {
            let end = (start + crate::training::EMBED_CHUNK).min(x.nrows());
            let (z, logits) = self.network.infer_with_logits(x.slice(ndarray::s![start..end, ..]))?;
            for (i, row) in z.rows().into_iter().enumerate() {
                let d = self.class_means.squared_distances(row);
                let (_, score) = nearest_mean(&self.class_means, row);
                let probs = match (self.regime, &logits) {
                    (TrainRegime::Ce | TrainRegime::IiCe, Some(l)) => {
                        let mut p = l.row(i).to_vec();
                        losses::softmax_in_place(&mut p);
                        p
                    }
                    _ => distance_probabilities(&d),
                };
                let label = open_decision(score, self.threshold, &probs, &self.class_means.class_ids);
                out.push(OpenPrediction { label, score, probs });
            }
        }
        Ok(out)
    }

    pub fn predict_open(&self, x: ArrayView1<S>) -> Result<OpenPrediction<S>, NnError> {
        let mut v = self.predict_open_batch(x.insert_axis(ndarray::Axis(0)))?;
        Ok(v.remove(0))
    }

    /// Closed-set labels: the same probabilities as [`Self::predict_open_batch`]
    /// without the unknown branch.
    pub fn predict_closed(&self, x: ArrayView2<S>) -> Result<Vec<usize>, NnError> {
        Ok(self
            .predict_open_batch(x)?
            .into_iter()
            .map(|p| self.class_means.class_ids[argmax(&p.probs)])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn means(rows: Array2<f64>) -> ClassMeans<f64> {
        let k = rows.nrows();
        ClassMeans {
            means: rows,
            counts: vec![1; k],
            class_ids: (0..k).collect(),
        }
    }

    #[test]
    fn nearest_mean_scores() {
        let m = means(array![[0.0, 0.0], [4.0, 0.0]]);
        assert_eq!(nearest_mean(&m, array![1.0, 0.0].view()), (0, 1.0));
        assert_eq!(nearest_mean(&m, array![4.0, 0.0].view()), (1, 0.0));
        assert_eq!(nearest_mean(&m, array![2.0, 0.0].view()), (0, 4.0));
        let swapped = means(array![[4.0, 0.0], [0.0, 0.0]]);
        assert_eq!(nearest_mean(&swapped, array![1.0, 0.0].view()).1, 1.0);
    }

    #[test]
    fn nearest_rank_examples() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(estimate_threshold(&scores, 0.01).unwrap(), 99.0);
        assert_eq!(estimate_threshold(&scores, 0.0).unwrap(), 100.0);
        assert_eq!(estimate_threshold(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(estimate_threshold(&[3.0, 1.0, 2.0], 0.0).unwrap(), 3.0);
        assert_eq!(estimate_threshold(&[5.0], 0.99).unwrap(), 5.0);
    }

    #[test]
    fn threshold_errors() {
        assert!(matches!(
            estimate_threshold::<f64>(&[], 0.01),
            Err(OpenSetError::EmptyScores)
        ));
        assert!(matches!(
            estimate_threshold(&[1.0], 1.0),
            Err(OpenSetError::BadRatio(_))
        ));
        assert!(matches!(
            estimate_threshold(&[1.0], -0.1),
            Err(OpenSetError::BadRatio(_))
        ));
        assert!(matches!(
            estimate_threshold(&[f64::NAN], 0.1),
            Err(OpenSetError::NonFinite)
        ));
    }

    #[test]
    fn probabilities() {
        let p = distance_probabilities(&[1.0f64, 9.0]);
        let e1 = (-1.0f64).exp();
        let e9 = (-9.0f64).exp();
        assert!((p[0] - e1 / (e1 + e9)).abs() < 1e-15);
        assert!((p[0] - 0.99966).abs() < 1e-5);
        let u = distance_probabilities(&[2.5f64; 4]);
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let far = distance_probabilities(&[1e4f64, 1e4 + 1.0]);
        assert!((far.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn strict_boundary() {
        let ids = [7, 9];
        assert_eq!(open_decision(2.0, 2.0, &[0.2, 0.8], &ids), OpenLabel::Known(9));
        assert_eq!(open_decision(2.0 + 1e-12, 2.0, &[0.2, 0.8], &ids), OpenLabel::Unknown);
        assert_eq!(open_decision(0.0, 2.0, &[0.5, 0.5], &ids), OpenLabel::Known(7));
    }

    #[test]
    fn label_order_and_display() {
        assert!(OpenLabel::Known(100) < OpenLabel::Unknown);
        assert_eq!(OpenLabel::Unknown.to_string(), "unknown");
        assert_eq!(OpenLabel::Known(3).to_string(), "3");
    }
}
