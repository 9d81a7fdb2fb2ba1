//! Closed-form multi-target ridge regression through the normal equations.

use nalgebra::{Cholesky, DMatrix};

use super::{ProbeError, Result};
use crate::tensor::Tensor;

/// Solves `(XᵀX + λI) W = XᵀY` for `W` `[d, g]`. `λ = 0` is permitted but
/// the system must then be full rank. The solution is verified against the
/// normal equations before it is returned, so a silently garbage solve
/// (rank deficiency, overflow) surfaces as [`ProbeError::Singular`].
pub fn ridge_fit(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(ProbeError::Config(format!(
                "features must be [n, d], got {other:?}"
            )))
        }
    };
    let (yn, g) = match y.shape() {
        [yn, g] => (*yn, *g),
        other => {
            return Err(ProbeError::Config(format!(
                "targets must be [n, g], got {other:?}"
            )))
        }
    };
    if yn != n || n == 0 || d == 0 || g == 0 {
        return Err(ProbeError::Config(format!(
            "incompatible ridge shapes [{n}, {d}] and [{yn}, {g}]"
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ProbeError::Config(format!(
            "ridge lambda {lambda} must be finite and non-negative"
        )));
    }

    let xm = DMatrix::from_row_slice(n, d, x.data());
    let ym = DMatrix::from_row_slice(n, g, y.data());
    let mut xtx = xm.tr_mul(&xm);
    for i in 0..d {
        xtx[(i, i)] += lambda;
    }
    let xty = xm.tr_mul(&ym);

    let w = match Cholesky::new(xtx.clone()) {
        Some(ch) => ch.solve(&xty),
        // λ = 0 with exactly singular XᵀX fails Cholesky; LU may still
        // produce a least-squares-incompatible result, which the residual
        // check below rejects.
        None => match xtx.clone().lu().solve(&xty) {
            Some(w) => w,
            None => {
                return Err(ProbeError::Singular(
                    "X^T X + lambda I is singular".into(),
                ))
            }
        },
    };

    let resid = &xtx * &w - &xty;
    let scale = xty.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let mut worst = 0.0f64;
    for &v in resid.iter() {
        if !v.is_finite() {
            return Err(ProbeError::Singular("non-finite ridge solution".into()));
        }
        worst = worst.max(v.abs());
    }
    if worst > 1e-6 * scale {
        return Err(ProbeError::Singular(format!(
            "normal-equation residual {worst:.3e} exceeds tolerance"
        )));
    }

    let mut out = Vec::with_capacity(d * g);
    for i in 0..d {
        for j in 0..g {
            out.push(w[(i, j)]);
        }
    }
    Ok(Tensor::from_vec(&[d, g], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_matrix(rows: usize, cols: usize, label: &str) -> Vec<f64> {
        let mut r = rng::substream(11, label);
        (0..rows * cols).map(|_| rng::normal(&mut r)).collect()
    }

    #[test]
    fn interpolates_a_square_well_conditioned_system_exactly() {
        let d = 5;
        let mut xd = random_matrix(d, d, "sq-x");
        for i in 0..d {
            xd[i * d + i] += 5.0;
        }
        let x = Tensor::from_vec(&[d, d], xd.clone()).unwrap();
        let y = Tensor::from_vec(&[d, 2], random_matrix(d, 2, "sq-y")).unwrap();
        let w = ridge_fit(&x, &y, 0.0).unwrap();
        // X is invertible, so XW must reproduce Y.
        let pred = x.matmul(&w).unwrap();
        for (p, t) in pred.data().iter().zip(y.data().iter()) {
            assert!((p - t).abs() < 1e-6, "{p} vs {t}");
        }
    }

    #[test]
    fn zero_targets_give_exactly_zero_weights() {
        let x = Tensor::from_vec(&[6, 3], random_matrix(6, 3, "z-x")).unwrap();
        let y = Tensor::zeros(&[6, 2]);
        let w = ridge_fit(&x, &y, 0.5).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_a_gauss_jordan_oracle_on_an_overdetermined_system() {
        let (n, d, g) = (20, 5, 3);
        let xd = random_matrix(n, d, "ov-x");
        let yd = random_matrix(n, g, "ov-y");
        let lambda = 0.7;

        // Oracle: form XᵀX + λI and XᵀY by hand, then Gauss-Jordan with
        // partial pivoting.
        let mut a = vec![0.0f64; d * d];
        let mut rhs = vec![0.0f64; d * g];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for r in 0..n {
                    s += xd[r * d + i] * xd[r * d + j];
                }
                a[i * d + j] = s + if i == j { lambda } else { 0.0 };
            }
            for j in 0..g {
                let mut s = 0.0;
                for r in 0..n {
                    s += xd[r * d + i] * yd[r * g + j];
                }
                rhs[i * g + j] = s;
            }
        }
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&p, &q| {
                    a[p * d + col].abs().partial_cmp(&a[q * d + col].abs()).unwrap()
                })
                .unwrap();
            if pivot != col {
                for j in 0..d {
                    a.swap(col * d + j, pivot * d + j);
                }
                for j in 0..g {
                    rhs.swap(col * g + j, pivot * g + j);
                }
            }
            let pv = a[col * d + col];
            for j in 0..d {
                a[col * d + j] /= pv;
            }
            for j in 0..g {
                rhs[col * g + j] /= pv;
            }
            for row in 0..d {
                if row == col {
                    continue;
                }
                let f = a[row * d + col];
                for j in 0..d {
                    a[row * d + j] -= f * a[col * d + j];
                }
                for j in 0..g {
                    rhs[row * g + j] -= f * rhs[col * g + j];
                }
            }
        }

        let x = Tensor::from_vec(&[n, d], xd).unwrap();
        let y = Tensor::from_vec(&[n, g], yd).unwrap();
        let w = ridge_fit(&x, &y, lambda).unwrap();
        for (ours, oracle) in w.data().iter().zip(rhs.iter()) {
            assert!((ours - oracle).abs() < 1e-8, "{ours} vs {oracle}");
        }
    }

    #[test]
    fn rank_deficient_features_without_penalty_are_rejected() {
        let n = 10;
        let base = random_matrix(n, 1, "rd");
        let mut xd = Vec::with_capacity(n * 3);
        for &v in &base {
            xd.extend_from_slice(&[v, v, 2.0 * v]);
        }
        let x = Tensor::from_vec(&[n, 3], xd).unwrap();
        let y = Tensor::from_vec(&[n, 1], random_matrix(n, 1, "rd-y")).unwrap();
        assert!(matches!(
            ridge_fit(&x, &y, 0.0).unwrap_err(),
            ProbeError::Singular(_)
        ));
        // The same system regularized is fine.
        assert!(ridge_fit(&x, &y, 1e-3).is_ok());
    }
}
