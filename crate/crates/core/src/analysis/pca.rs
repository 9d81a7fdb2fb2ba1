//! Principal components via the eigendecomposition of the sample
//! covariance. Component signs are fixed deterministically.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{AnalysisError, Result};
use crate::tensor::{gemm, Tensor};

/// Relative eigenvalue threshold below which a direction counts as null.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Pca {
    mean: Vec<f64>,
    /// `[components, d]` row-major, orthonormal rows.
    components: Tensor,
    /// Top eigenvalues of the sample covariance, non-increasing.
    explained_variance: Vec<f64>,
    /// Trace of the sample covariance (sum over all directions).
    total_variance: f64,
}

impl Pca {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Tensor {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn dim(&self) -> usize {
        self.components.shape()[0]
    }

    /// Projects rows into component space: `(x − mean) Cᵀ`, `[n, p]`.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = expect_rank2(x)?;
        if d != self.mean.len() {
            return Err(AnalysisError::Config(format!(
                "fitted on {} features, got {d}",
                self.mean.len()
            )));
        }
        let p = self.dim();
        let data = x.data();
        let mut centered = Vec::with_capacity(n * d);
        for row in data.chunks_exact(d) {
            for (v, m) in row.iter().zip(&self.mean) {
                centered.push(v - m);
            }
        }
        let mut scores = vec![0.0; n * p];
        gemm(
            n,
            d,
            p,
            &centered,
            false,
            self.components.data(),
            true,
            &mut scores,
            0.0,
        );
        Ok(Tensor::from_vec(&[n, p], scores)?)
    }

    /// Maps scores back to the original space: `s C + mean`.
    pub fn reconstruct(&self, scores: &Tensor) -> Result<Tensor> {
        let (n, p) = expect_rank2(scores)?;
        if p != self.dim() {
            return Err(AnalysisError::Config(format!(
                "expected {} score columns, got {p}",
                self.dim()
            )));
        }
        let d = self.mean.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&self.mean);
        }
        gemm(
            n,
            p,
            d,
            scores.data(),
            false,
            self.components.data(),
            false,
            &mut out,
            1.0,
        );
        Ok(Tensor::from_vec(&[n, d], out)?)
    }
}

fn expect_rank2(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [n, d] => Ok((*n, *d)),
        other => Err(AnalysisError::Config(format!(
            "expected a [n, d] matrix, got {other:?}"
        ))),
    }
}

pub fn pca_fit(x: &Tensor, components: usize) -> Result<Pca> {
    let (n, d) = expect_rank2(x)?;
    if components == 0 || components > d {
        return Err(AnalysisError::Config(format!(
            "{components} components out of range for {d} features"
        )));
    }
    if n <= components {
        return Err(AnalysisError::Config(format!(
            "{n} samples cannot support {components} components"
        )));
    }

    let data = x.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            centered[(i, j)] = data[i * d + j] - mean[j];
        }
    }
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > top * RANK_TOL)
        .count();
    if components > rank {
        return Err(AnalysisError::RankDeficient {
            requested: components,
            rank,
        });
    }

    let mut comp = Vec::with_capacity(components * d);
    let mut explained = Vec::with_capacity(components);
    for &idx in order.iter().take(components) {
        let col = eig.eigenvectors.column(idx);
        // Deterministic sign: the largest-magnitude coordinate is positive.
        let lead = (0..d)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()))
            .unwrap();
        let flip = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        comp.extend((0..d).map(|j| flip * col[j]));
        explained.push(eig.eigenvalues[idx]);
    }
    Ok(Pca {
        mean,
        components: Tensor::from_vec(&[components, d], comp)?,
        explained_variance: explained,
        total_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::substream(seed, "pca");
        Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn full_rank_fit_reconstructs_the_data() {
        let x = random(30, 5, 1);
        let pca = pca_fit(&x, 5).unwrap();
        let back = pca.reconstruct(&pca.transform(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rank_one_data_is_captured_by_the_first_component() {
        let dir = [0.6, 0.0, 0.8];
        let mut data = Vec::new();
        for i in 0..12 {
            let t = i as f64 - 5.5;
            data.extend(dir.iter().map(|v| 2.0 + t * v));
        }
        let x = Tensor::from_vec(&[12, 3], data).unwrap();
        let pca = pca_fit(&x, 1).unwrap();
        assert!(pca.explained_variance()[0] / pca.total_variance() > 0.999);
        // Sign convention: the leading coordinate of the component is the
        // largest-magnitude one, made positive.
        let c = pca.components().data();
        assert!((c[2].abs() - 0.8).abs() < 1e-9 && c[2] > 0.0);
    }

    #[test]
    fn components_are_orthonormal_and_variances_non_increasing() {
        let x = random(100, 6, 2);
        let pca = pca_fit(&x, 6).unwrap();
        let c = pca.components().data();
        for a in 0..6 {
            for b in 0..6 {
                let dot: f64 = (0..6).map(|j| c[a * 6 + j] * c[b * 6 + j]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "rows {a},{b}: {dot}");
            }
        }
        let ev = pca.explained_variance();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn score_covariance_is_diagonal() {
        let x = random(200, 6, 3);
        let pca = pca_fit(&x, 6).unwrap();
        let s = pca.transform(&x).unwrap();
        let d = 6;
        let sd = s.data();
        let n = 200;
        let mut mean = vec![0.0; d];
        for row in sd.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for a in 0..d {
            for b in 0..d {
                if a == b {
                    continue;
                }
                let cov: f64 = (0..n)
                    .map(|i| (sd[i * d + a] - mean[a]) * (sd[i * d + b] - mean[b]))
                    .sum::<f64>()
                    / (n as f64 - 1.0);
                assert!(cov.abs() < 1e-8, "cov[{a},{b}] = {cov}");
            }
        }
    }

    #[test]
    fn transform_centers_with_the_fit_mean() {
        let x = random(40, 4, 4);
        let pca = pca_fit(&x, 3).unwrap();
        let m = Tensor::from_vec(&[1, 4], pca.mean().to_vec()).unwrap();
        let s = pca.transform(&m).unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn requesting_more_components_than_rank_is_an_error() {
        // Four points on a 2-d plane inside 5-d space.
        let mut data = Vec::new();
        let a = [1.0, 0.0, 2.0, 0.0, 1.0];
        let b = [0.0, 1.0, 0.0, 3.0, 1.0];
        for (s, t) in [(1.0, 0.0), (0.0, 1.0), (2.0, 1.0), (-1.0, 0.5)] {
            data.extend(a.iter().zip(&b).map(|(x, y)| s * x + t * y));
        }
        let x = Tensor::from_vec(&[4, 5], data).unwrap();
        assert!(pca_fit(&x, 2).is_ok());
        match pca_fit(&x, 3).unwrap_err() {
            AnalysisError::RankDeficient { requested, rank } => {
                assert_eq!((requested, rank), (3, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(pca_fit(&x, 0).is_err());
        assert!(pca_fit(&x, 6).is_err());
    }

    #[test]
    fn fitting_is_deterministic() {
        let x = random(50, 5, 5);
        let a = pca_fit(&x, 4).unwrap();
        let b = pca_fit(&x, 4).unwrap();
        assert_eq!(a.components().data(), b.components().data());
        assert_eq!(a.explained_variance(), b.explained_variance());
    }
}
