//! ii-loss and softmax cross entropy.
//!
//! ii-loss of a batch of embeddings `Z` with labels `Y` is
//! `intra_spread - inter_separation`, where the intra spread is the mean
//! squared distance of each embedding to its class mean and the inter
//! separation is the squared distance between the two closest class means.
//! Class means are computed from the batch itself; classes absent from the
//! batch take no part in either term.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {label} has no class mean")]
    UnknownLabel { label: usize },
    #[error("label {label} out of range for {classes} logits")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Per-class means of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeans<S> {
    /// One row per class, in the order of `class_ids`.
    pub means: Array2<S>,
    pub counts: Vec<usize>,
    /// Class labels, ascending.
    pub class_ids: Vec<usize>,
}

impl<S: Scalar> ClassMeans<S> {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Row index of `label`.
    pub fn position(&self, label: usize) -> Option<usize> {
        self.class_ids.binary_search(&label).ok()
    }

    /// Squared Euclidean distance from `z` to every class mean.
    pub fn squared_distances(&self, z: ArrayView1<S>) -> Vec<S> {
        self.means
            .rows()
            .into_iter()
            .map(|mu| squared_distance(mu, z))
            .collect()
    }
}

/// Decomposition of the ii-loss of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<S> {
    pub intra_spread: S,
    pub inter_separation: S,
    /// Always exactly `intra_spread - inter_separation`.
    pub ii_loss: S,
    pub ce_loss: Option<S>,
    /// Fewer than two classes were present, so the separation is 0.
    pub degenerate: bool,
}

pub fn squared_distance<S: Scalar>(a: ArrayView1<S>, b: ArrayView1<S>) -> S {
    a.iter()
        .zip(b.iter())
        .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn check_batch<S>(z: &ArrayView2<S>, labels: &[usize]) -> Result<()> {
    if z.nrows() != labels.len() {
        return Err(LossError::LabelCount {
            rows: z.nrows(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(())
}

/// Arithmetic mean of the rows of each class present in the batch.
pub fn class_means<S: Scalar>(z: ArrayView2<S>, labels: &[usize]) -> Result<ClassMeans<S>> {
    check_batch(&z, labels)?;
    let mut rows_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        rows_of.entry(l).or_default().push(i);
    }
    let mut means = Array2::zeros((rows_of.len(), z.ncols()));
    let mut counts = Vec::with_capacity(rows_of.len());
    let mut class_ids = Vec::with_capacity(rows_of.len());
    for (j, (label, rows)) in rows_of.into_iter().enumerate() {
        let mut acc = Array1::<S>::zeros(z.ncols());
        for &r in &rows {
            acc += &z.row(r);
        }
        means.row_mut(j).assign(&(acc / S::of(rows.len() as f64)));
        counts.push(rows.len());
        class_ids.push(label);
    }
    Ok(ClassMeans {
        means,
        counts,
        class_ids,
    })
}

/// `(1/N) Σ_i ‖μ_{y_i} - z_i‖²`.
pub fn intra_spread<S: Scalar>(z: ArrayView2<S>, labels: &[usize], means: &ClassMeans<S>) -> Result<S> {
    check_batch(&z, labels)?;
    let mut total = S::zero();
    for (row, &label) in z.rows().into_iter().zip(labels) {
        let j = means.position(label).ok_or(LossError::UnknownLabel { label })?;
        total += squared_distance(means.means.row(j), row);
    }
    Ok(total / S::of(labels.len() as f64))
}

/// The closest pair of class means as row indices `(m, n)`, `m < n`, with
/// their squared distance. Ties go to the lexicographically smallest pair.
/// `None` when fewer than two classes are present.
pub fn closest_pair<S: Scalar>(means: &ClassMeans<S>) -> Option<(usize, usize, S)> {
    let k = means.num_classes();
    let mut best: Option<(usize, usize, S)> = None;
    for m in 0..k {
        for n in m + 1..k {
            let d = squared_distance(means.means.row(m), means.means.row(n));
            if best.is_none_or(|(_, _, b)| d < b) {
                best = Some((m, n, d));
            }
        }
    }
    best
}

/// `min_{m<n} ‖μ_m - μ_n‖²`; zero for a single class.
pub fn inter_separation<S: Scalar>(means: &ClassMeans<S>) -> S {
    closest_pair(means).map_or(S::zero(), |(_, _, d)| d)
}

fn breakdown<S: Scalar>(intra: S, means: &ClassMeans<S>) -> LossBreakdown<S> {
    let inter = inter_separation(means);
    LossBreakdown {
        intra_spread: intra,
        inter_separation: inter,
        ii_loss: intra - inter,
        ce_loss: None,
        degenerate: means.num_classes() < 2,
    }
}

/// ii-loss of a batch with class means taken from the batch.
pub fn ii_loss<S: Scalar>(z: ArrayView2<S>, labels: &[usize]) -> Result<LossBreakdown<S>> {
    let means = class_means(z, labels)?;
    let intra = intra_spread(z, labels, &means)?;
    Ok(breakdown(intra, &means))
}

/// Gradient of ii-loss with respect to every row of `z`.
pub fn ii_loss_grad<S: Scalar>(z: ArrayView2<S>, labels: &[usize]) -> Result<Array2<S>> {
    ii_loss_with_grad(z, labels).map(|(_, g)| g)
}

/// ii-loss and its gradient in one pass.
///
/// The class means depend on `z`. For the intra term that dependence cancels
/// (deviations from a mean sum to zero), leaving `2 (z_i - μ_{y_i}) / N`. The
/// separation term only touches the rows of the closest pair `(m, n)`:
/// `±2 (μ_m - μ_n) / |C|` for rows of class `m` and `n` respectively.
pub fn ii_loss_with_grad<S: Scalar>(z: ArrayView2<S>, labels: &[usize]) -> Result<(LossBreakdown<S>, Array2<S>)> {
    let means = class_means(z, labels)?;
    let intra = intra_spread(z, labels, &means)?;
    let n = S::of(labels.len() as f64);
    let two = S::of(2.0);
    let pos: Vec<usize> = labels
        .iter()
        .map(|&l| means.position(l).expect("means built from these labels"))
        .collect();
    let mut grad = Array2::zeros(z.raw_dim());
    for ((mut g, row), &j) in grad.rows_mut().into_iter().zip(z.rows()).zip(&pos) {
        g.assign(&((&row - &means.means.row(j)) * (two / n)));
    }
    if let Some((m, k, _)) = closest_pair(&means) {
        let diff = &means.means.row(m) - &means.means.row(k);
        let dm = &diff * (two / S::of(means.counts[m] as f64));
        let dk = &diff * (two / S::of(means.counts[k] as f64));
        for (mut g, &j) in grad.rows_mut().into_iter().zip(&pos) {
            // ii = intra - inter, so the separation gradient is subtracted
            if j == m {
                g -= &dm;
            } else if j == k {
                g += &dk;
            }
        }
    }
    Ok((breakdown(intra, &means), grad))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(logits: ArrayView2<S>) -> Array2<S> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    out
}

/// Softmax of a slice in place, shifted by its maximum.
pub fn softmax_in_place<S: Scalar>(v: &mut [S]) {
    let max = v.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Mean softmax cross entropy and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy<S: Scalar>(logits: ArrayView2<S>, labels: &[usize]) -> Result<(S, Array2<S>)> {
    check_batch(&logits, labels)?;
    let k = logits.ncols();
    let n = S::of(labels.len() as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = S::zero();
    for ((row, mut g), &label) in logits.axis_iter(Axis(0)).zip(grad.rows_mut()).zip(labels) {
        if label >= k {
            return Err(LossError::LabelOutOfRange { label, classes: k });
        }
        let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
        let sum: S = row.iter().map(|&x| (x - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss = loss + log_sum - row[label];
        for (gj, &x) in g.iter_mut().zip(row.iter()) {
            *gj = (x - log_sum).exp() / n;
        }
        g[label] -= S::one() / n;
    }
    Ok((loss / n, grad))
}
