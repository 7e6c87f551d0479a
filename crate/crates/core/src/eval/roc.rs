use serde::{Deserialize, Serialize};

use super::EvalError;

/// One vertex of the ROC curve. Unknown instances are the positive class and
/// a higher score means "more likely unknown". `threshold` is the lowest
/// score flagged positive at this vertex (`+inf` for the origin).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub false_positives: usize,
    pub true_positives: usize,
}

struct Counts {
    positives: usize,
    negatives: usize,
    /// (fp, tp) after each distinct score, descending.
    steps: Vec<(usize, usize, f64)>,
}

fn count_steps(scores: &[f64], positive: &[bool]) -> Result<Counts, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::LengthMismatch {
            left: scores.len(),
            right: positive.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    let positives = positive.iter().filter(|&&p| p).count();
    let negatives = positive.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut steps = Vec::new();
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((fp, tp, s));
    }
    Ok(Counts {
        positives,
        negatives,
        steps,
    })
}

/// ROC vertices from the origin to (1, 1), one per distinct score.
pub fn roc_curve(scores: &[f64], is_unknown: &[bool]) -> Result<Vec<RocPoint>, EvalError> {
    let c = count_steps(scores, is_unknown)?;
    let (n, p) = (c.negatives as f64, c.positives as f64);
    let point = |fp: usize, tp: usize, threshold: f64| RocPoint {
        threshold,
        fpr: fp as f64 / n,
        tpr: tp as f64 / p,
        false_positives: fp,
        true_positives: tp,
    };
    let mut out = vec![point(0, 0, f64::INFINITY)];
    out.extend(c.steps.iter().map(|&(fp, tp, s)| point(fp, tp, s)));
    Ok(out)
}

/// Trapezoidal area under the ROC curve for FPR in `[0, cap]`, not
/// normalized, so the largest possible value is `cap`.
pub fn roc_auc(scores: &[f64], is_unknown: &[bool], cap: f64) -> Result<f64, EvalError> {
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(EvalError::BadCap(cap));
    }
    let c = count_steps(scores, is_unknown)?;
    let (n, p) = (c.negatives as f64, c.positives as f64);
    let cap_fp = cap * n;
    // whole segments accumulate exactly in integer units of 1/(2np)
    let mut units: u128 = 0;
    let mut partial = 0.0;
    let (mut fp0, mut tp0) = (0usize, 0usize);
    for &(fp1, tp1, _) in &c.steps {
        if fp1 as f64 <= cap_fp {
            units += ((fp1 - fp0) * (tp0 + tp1)) as u128;
        } else {
            let w = cap_fp - fp0 as f64;
            if w > 0.0 {
                let dfp = (fp1 - fp0) as f64;
                let tp_cap = tp0 as f64 + (tp1 - tp0) as f64 * w / dfp;
                partial = w * (tp0 as f64 + tp_cap);
            }
            break;
        }
        fp0 = fp1;
        tp0 = tp1;
    }
    Ok((units as f64 + partial) / (2.0 * n * p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_uninformative() {
        let flags = [false, false, true, true];
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0, 4.0], &flags, 1.0).unwrap(), 1.0);
        assert_eq!(roc_auc(&[5.0; 4], &flags, 1.0).unwrap(), 0.5);
        assert_eq!(roc_auc(&[4.0, 3.0, 2.0, 1.0], &flags, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn capped_perfect_ranking() {
        let auc = roc_auc(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true], 0.1).unwrap();
        assert_eq!(auc, 0.1);
    }

    #[test]
    fn tie_group_is_one_step() {
        let curve = roc_curve(&[1.0, 1.0, 2.0], &[false, true, true]).unwrap();
        let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (1.0, 1.0)]);
        assert_eq!(roc_auc(&[1.0, 1.0, 2.0], &[false, true, true], 1.0).unwrap(), 0.75);
    }

    #[test]
    fn diagonal_cap() {
        let auc = roc_auc(&[0.0; 4], &[false, true, false, true], 0.1).unwrap();
        assert!((auc - 0.005).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            roc_auc(&[1.0, 2.0], &[true, true], 1.0),
            Err(EvalError::SingleClass { .. })
        ));
        assert!(matches!(
            roc_auc(&[1.0, 2.0], &[true, false], 0.0),
            Err(EvalError::BadCap(_))
        ));
        assert!(matches!(
            roc_auc(&[1.0], &[true, false], 1.0),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            roc_auc(&[f64::NAN, 1.0], &[true, false], 1.0),
            Err(EvalError::NanScore)
        ));
    }
}
