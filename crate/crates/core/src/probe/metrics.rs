//! Evaluation metrics for the linear probes: balanced accuracy, one-vs-rest
//! ROC-AUC and average precision, F1 variants, Pearson correlation.

use serde::Serialize;

use super::{ProbeError, Result};
use crate::tensor::Tensor;

/// Metrics over one evaluation split. AUC and AUPR are one-vs-rest and
/// macro-averaged over the classes for which they are defined; classes
/// absent from `y_true` are skipped and reported in `warnings`.
#[derive(Debug, Clone, Serialize)]
pub struct ClassificationMetrics {
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub aupr: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub warnings: Vec<String>,
}

/// Mann-Whitney AUC with average ranks for tied scores.
fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..n).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Average precision: sum of precision-at-threshold weighted by recall
/// increments, descending score order with ties collapsed into one step.
fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let pos = positive.iter().filter(|&&p| p).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut group_tp = 0usize;
        let mut group_fp = 0usize;
        loop {
            if positive[order[j]] {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            if j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
                j += 1;
            } else {
                break;
            }
        }
        tp += group_tp;
        fp += group_fp;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += precision * group_tp as f64 / pos as f64;
        i = j + 1;
    }
    Some(ap)
}

/// `y_score` must be `[n, classes]` with rows summing to one (class
/// probabilities). Predictions are taken as given rather than re-derived
/// from the scores.
pub fn classification_metrics(
    y_true: &[usize],
    y_pred: &[usize],
    y_score: &Tensor,
) -> Result<ClassificationMetrics> {
    let (n, classes) = match y_score.shape() {
        [n, c] => (*n, *c),
        other => {
            return Err(ProbeError::Config(format!(
                "scores must be [n, classes], got {other:?}"
            )))
        }
    };
    if y_true.len() != n || y_pred.len() != n || n == 0 || classes < 2 {
        return Err(ProbeError::Config(format!(
            "inconsistent metric inputs: {} labels, {} predictions, {n} score rows, {classes} classes",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred.iter()).find(|&&c| c >= classes) {
        return Err(ProbeError::Config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let scores = y_score.data();
    for (i, row) in scores.chunks_exact(classes).enumerate() {
        let sum: f64 = row.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
            return Err(ProbeError::Config(format!(
                "score row {i} sums to {sum}, expected 1"
            )));
        }
    }

    let mut support = vec![0usize; classes];
    for &c in y_true {
        support[c] += 1;
    }
    let mut warnings = Vec::new();
    let present: Vec<usize> = (0..classes).filter(|&c| support[c] > 0).collect();
    for c in 0..classes {
        if support[c] == 0 {
            warnings.push(format!("class {c} absent from the evaluation split"));
        }
    }

    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut f1_weighted = 0.0;
    let mut auc_vals = Vec::new();
    let mut ap_vals = Vec::new();
    for &c in &present {
        let tp = y_true
            .iter()
            .zip(y_pred)
            .filter(|(&t, &p)| t == c && p == c)
            .count();
        let fp = y_true
            .iter()
            .zip(y_pred)
            .filter(|(&t, &p)| t != c && p == c)
            .count();
        let fn_ = support[c] - tp;
        recall_sum += tp as f64 / support[c] as f64;
        let f1 = if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        f1_sum += f1;
        f1_weighted += f1 * support[c] as f64 / n as f64;

        let col: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
        let is_pos: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        match rank_auc(&col, &is_pos) {
            Some(v) => auc_vals.push(v),
            None => warnings.push(format!("class {c} has no negatives; AUC undefined")),
        }
        if let Some(v) = average_precision(&col, &is_pos) {
            ap_vals.push(v);
        }
    }

    let mean = |vs: &[f64]| {
        if vs.is_empty() {
            f64::NAN
        } else {
            vs.iter().sum::<f64>() / vs.len() as f64
        }
    };
    Ok(ClassificationMetrics {
        balanced_accuracy: recall_sum / present.len() as f64,
        auc: mean(&auc_vals),
        aupr: mean(&ap_vals),
        f1_macro: f1_sum / present.len() as f64,
        f1_weighted,
        warnings,
    })
}

/// Pearson correlation. Errors if either side has zero variance, since the
/// coefficient is undefined there.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(ProbeError::Config(format!(
            "correlation needs two equal-length series, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 {
        return Err(ProbeError::ZeroVariance {
            what: "first series".into(),
        });
    }
    if vb <= 0.0 {
        return Err(ProbeError::ZeroVariance {
            what: "second series".into(),
        });
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}
