//! Multinomial logistic regression trained by full-batch gradient descent
//! with a backtracking line search. Deterministic from zero initialization;
//! the only heavy kernel is GEMM.

use super::{ProbeError, Result};
use crate::tensor::{gemm, Tensor};

pub const LOGISTIC_MAX_ITER: usize = 2_000;
pub const LOGISTIC_TOL: f64 = 1e-6;
/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LogisticModel {
    pub classes: usize,
    pub features: usize,
    /// `[classes, features]` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Final objective value (mean cross-entropy plus the L2 term).
    pub loss: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticModel {
    /// Class probabilities `[n, classes]`, rows summing to one.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = expect_rank2(x)?;
        if d != self.features {
            return Err(ProbeError::Config(format!(
                "model expects {} features, got {d}",
                self.features
            )));
        }
        let k = self.classes;
        let mut z = logits(x.data(), n, d, &self.weights, &self.bias, k);
        for row in z.chunks_exact_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(Tensor::from_vec(&[n, k], z)?)
    }

    /// Argmax class per row; ties go to the smaller class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let proba = self.predict_proba(x)?;
        let k = self.classes;
        Ok(proba
            .data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

fn expect_rank2(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [n, d] => Ok((*n, *d)),
        other => Err(ProbeError::Config(format!(
            "features must be [n, d], got {other:?}"
        ))),
    }
}

/// `z = X W^T + b`, row-major `[n, k]`.
fn logits(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(n * k);
    for _ in 0..n {
        z.extend_from_slice(b);
    }
    gemm(n, d, k, x, false, w, true, &mut z, 1.0);
    z
}

/// Mean cross-entropy plus `l2/(2n)·‖W‖²` (bias unpenalized). When `grad`
/// is true also returns (∇W, ∇b).
#[allow(clippy::too_many_arguments)]
fn objective(
    x: &[f64],
    y: &[usize],
    n: usize,
    d: usize,
    k: usize,
    w: &[f64],
    b: &[f64],
    l2: f64,
    grad: bool,
) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let mut z = logits(x, n, d, w, b, k);
    let mut ce = 0.0;
    for (i, row) in z.chunks_exact_mut(k).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - row[y[i]];
        if grad {
            // Replace the row with (softmax − onehot)/n for the GEMM below.
            for v in row.iter_mut() {
                *v = (*v - lse).exp() / n as f64;
            }
            row[y[i]] -= 1.0 / n as f64;
        }
    }
    let wsq: f64 = w.iter().map(|&v| v * v).sum();
    let loss = ce / n as f64 + 0.5 * l2 * wsq / n as f64;
    if !grad {
        return (loss, None);
    }
    // ∇W = (P − Y)ᵀ X / n + (l2/n)·W, with the 1/n already folded into z.
    let mut gw: Vec<f64> = w.iter().map(|&v| l2 * v / n as f64).collect();
    gemm(k, n, d, &z, true, x, false, &mut gw, 1.0);
    let mut gb = vec![0.0; k];
    for row in z.chunks_exact(k) {
        for (c, &v) in row.iter().enumerate() {
            gb[c] += v;
        }
    }
    (loss, Some((gw, gb)))
}

/// Fit on pre-standardized features. Labels must be contiguous `0..classes`
/// with at least two classes present. Non-convergence within `max_iter`
/// returns the best iterate with `converged = false`.
pub fn logistic_fit(
    x: &Tensor,
    y: &[usize],
    l2: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LogisticModel> {
    let (n, d) = expect_rank2(x)?;
    if y.len() != n || n < 2 {
        return Err(ProbeError::Config(format!(
            "{n} feature rows against {} labels",
            y.len()
        )));
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(ProbeError::Config(format!("l2 penalty {l2} must be finite and non-negative")));
    }
    let classes = y.iter().max().unwrap() + 1;
    let mut seen = vec![false; classes];
    for &c in y {
        seen[c] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(ProbeError::SingleClass);
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(ProbeError::Config(format!(
            "labels are not contiguous: class {missing} is absent"
        )));
    }

    let xd = x.data();
    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let (mut loss, g) = objective(xd, y, n, d, classes, &w, &b, l2, true);
    let (mut gw, mut gb) = g.expect("gradient requested");
    let mut step = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=max_iter {
        iterations = it;
        let gnorm2: f64 =
            gw.iter().map(|&v| v * v).sum::<f64>() + gb.iter().map(|&v| v * v).sum::<f64>();
        if gnorm2.sqrt() < tol {
            converged = true;
            iterations = it - 1;
            break;
        }
        // Backtracking from twice the last accepted step.
        step = (step * 2.0).min(1e6);
        let mut accepted = false;
        while step > 1e-20 {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(&a, &g)| a - step * g).collect();
            let bt: Vec<f64> = b.iter().zip(&gb).map(|(&a, &g)| a - step * g).collect();
            let (lt, _) = objective(xd, y, n, d, classes, &wt, &bt, l2, false);
            if lt <= loss - ARMIJO_C * step * gnorm2 {
                w = wt;
                b = bt;
                loss = lt;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent possible at machine precision.
            converged = true;
            break;
        }
        let (l, g) = objective(xd, y, n, d, classes, &w, &b, l2, true);
        loss = l;
        let (ngw, ngb) = g.expect("gradient requested");
        gw = ngw;
        gb = ngb;
    }

    Ok(LogisticModel {
        classes,
        features: d,
        weights: w,
        bias: b,
        loss,
        converged,
        iterations,
    })
}
