//! Detection and recognition metrics.

mod roc;
mod ttest;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TestSet;
use crate::nn::NnError;
use crate::openset::OpenLabel;
use crate::scalar::Scalar;
use crate::training::TrainedModel;

pub use roc::{roc_auc, roc_curve, RocPoint};
pub use ttest::{incomplete_beta, ln_gamma, student_t_two_sided, welch_t_test, TTest};

/// FPR cap of the partial AUC.
pub const PARTIAL_CAP: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ROC needs both classes, got {positives} unknown and {negatives} known instances")]
    SingleClass { positives: usize, negatives: usize },
    #[error("FPR cap {0} outside (0, 1]")]
    BadCap(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("scores contain NaN")]
    NanScore,
    #[error("label {label} outside the {k} known classes")]
    LabelRange { label: usize, k: usize },
    #[error("t-test needs at least 2 values per sample, got {a} and {b}")]
    SampleSize { a: usize, b: usize },
    #[error("t-test undefined: {0}")]
    Degenerate(String),
    #[error("model has {model} classes but the test set has {test} known classes")]
    ClassMismatch { model: usize, test: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: OpenLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    /// `K + 1` entries, known labels then unknown.
    pub per_label: Vec<LabelMetrics>,
    /// `confusion[truth][prediction]`, same label order as `per_label`.
    pub confusion: Vec<Vec<usize>>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f: f64,
}

fn label_index(label: OpenLabel, k: usize) -> Result<usize, EvalError> {
    match label {
        OpenLabel::Known(c) if c < k => Ok(c),
        OpenLabel::Known(c) => Err(EvalError::LabelRange { label: c, k }),
        OpenLabel::Unknown => Ok(k),
    }
}

/// One-vs-rest precision, recall and F1 for each of the `K + 1` labels and
/// their unweighted means. Zero denominators give zero.
pub fn macro_prf(predictions: &[OpenLabel], truths: &[OpenLabel], k: usize) -> Result<Prf, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    let mut confusion = vec![vec![0usize; k + 1]; k + 1];
    for (&p, &t) in predictions.iter().zip(truths) {
        confusion[label_index(t, k)?][label_index(p, k)?] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_label: Vec<LabelMetrics> = (0..=k)
        .map(|j| {
            let tp = confusion[j][j];
            let support: usize = confusion[j].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[j]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            LabelMetrics {
                label: if j == k {
                    OpenLabel::Unknown
                } else {
                    OpenLabel::Known(j)
                },
                precision,
                recall,
                f1,
                support,
                predicted,
            }
        })
        .collect();
    let mean = |f: fn(&LabelMetrics) -> f64| per_label.iter().map(f).sum::<f64>() / (k + 1) as f64;
    Ok(Prf {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f: mean(|m| m.f1),
        per_label,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_100: f64,
    pub auc_10: f64,
    pub cap: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f: f64,
    /// Nearest-rule accuracy on known-class test instances.
    pub closed_accuracy: f64,
    pub threshold: f64,
    pub test_instances: usize,
    pub unknown_instances: usize,
    pub per_label: Vec<LabelMetrics>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Flat `(key, value)` records.
    pub fn records(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = [
            ("auc_100", self.auc_100),
            ("auc_10", self.auc_10),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f", self.macro_f),
            ("closed_accuracy", self.closed_accuracy),
            ("threshold", self.threshold),
            ("test_instances", self.test_instances as f64),
            ("unknown_instances", self.unknown_instances as f64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for m in &self.per_label {
            out.push((format!("precision_{}", m.label), m.precision));
            out.push((format!("recall_{}", m.label), m.recall));
            out.push((format!("f1_{}", m.label), m.f1));
        }
        out
    }

    pub fn record_map(&self) -> BTreeMap<String, f64> {
        self.records().into_iter().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// `key,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for (k, v) in self.records() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "AUC (FPR <= 1.0)   {:.4}", self.auc_100);
        let _ = writeln!(s, "AUC (FPR <= {:.1})   {:.4}", self.cap, self.auc_10);
        let _ = writeln!(s, "closed-set acc     {:.4}", self.closed_accuracy);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>9} {:>9} {:>9} {:>8}",
            "label", "precision", "recall", "f1", "support"
        );
        for m in &self.per_label {
            let _ = writeln!(
                s,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.label.to_string(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f, self.test_instances
        );
        s
    }
}

/// ROC vertices as `threshold,fpr,tpr` CSV.
pub fn roc_points_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    s
}

/// Scores the test set and computes the full report plus ROC vertices.
pub fn evaluate<S: Scalar>(
    model: &TrainedModel<S>,
    test: &TestSet<S>,
) -> Result<(EvalReport, Vec<RocPoint>), EvalError> {
    let k = model.num_classes();
    if let Some(OpenLabel::Known(c)) = test.truth.iter().filter(|t| !t.is_unknown()).max() {
        if *c >= k {
            return Err(EvalError::ClassMismatch { model: k, test: c + 1 });
        }
    }
    let preds = model.predict_open_batch(test.features.view())?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score.widen()).collect();
    let flags: Vec<bool> = test.truth.iter().map(|t| t.is_unknown()).collect();
    let auc_100 = roc_auc(&scores, &flags, 1.0)?;
    let auc_10 = roc_auc(&scores, &flags, PARTIAL_CAP)?;
    let points = roc_curve(&scores, &flags)?;
    let labels: Vec<OpenLabel> = preds.iter().map(|p| p.label).collect();
    let prf = macro_prf(&labels, &test.truth, k)?;

    let (mut hits, mut known) = (0usize, 0usize);
    for (p, t) in preds.iter().zip(&test.truth) {
        if let OpenLabel::Known(c) = t {
            known += 1;
            if model.class_means.class_ids[crate::openset::argmax(&p.probs)] == *c {
                hits += 1;
            }
        }
    }
    let report = EvalReport {
        auc_100,
        auc_10,
        cap: PARTIAL_CAP,
        macro_precision: prf.macro_precision,
        macro_recall: prf.macro_recall,
        macro_f: prf.macro_f,
        closed_accuracy: if known == 0 { 0.0 } else { hits as f64 / known as f64 },
        threshold: model.threshold.widen(),
        test_instances: test.len(),
        unknown_instances: flags.iter().filter(|&&f| f).count(),
        per_label: prf.per_label,
        confusion: prf.confusion,
    };
    Ok((report, points))
}
