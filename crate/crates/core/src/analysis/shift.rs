//! Embedding-shift quantification between an original condition and one or
//! more re-stained / re-rendered conditions: per-cell RMSE, cosine, and
//! top-k neighborhood overlap in a shared PCA space.

use rayon::prelude::*;

use super::knn::knn_indices;
use super::pca::pca_fit;
use super::{AnalysisError, Result};
use crate::tensor::Tensor;

/// Metrics for one shifted condition against the original.
#[derive(Debug, Clone, Copy)]
pub struct ConditionShift {
    pub rmse: f64,
    pub cosine: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ShiftSummary {
    pub mean: f64,
    pub sd: f64,
}

fn summarize(values: impl Iterator<Item = f64> + Clone) -> ShiftSummary {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let sd = if n < 2.0 {
        0.0
    } else {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    ShiftSummary { mean, sd }
}

#[derive(Debug, Clone)]
pub struct ShiftReport {
    pub conditions: Vec<ConditionShift>,
    pub rmse: ShiftSummary,
    pub cosine: ShiftSummary,
    pub overlap: ShiftSummary,
}

/// Core metrics in an already-shared coordinate space (both matrices
/// `[n, p]`, row-aligned by cell). Neighborhoods are computed within each
/// matrix separately, so any transform preserving pairwise distances on
/// one side leaves the overlap untouched.
pub fn projected_shift_metrics(orig: &Tensor, shifted: &Tensor, k: usize) -> Result<ConditionShift> {
    let (n, p) = expect_rank2(orig)?;
    let (ns, ps) = expect_rank2(shifted)?;
    if (ns, ps) != (n, p) {
        return Err(AnalysisError::Config(format!(
            "shifted embeddings are [{ns}, {ps}], original is [{n}, {p}]"
        )));
    }
    if k == 0 || n <= k {
        return Err(AnalysisError::Config(format!(
            "overlap k = {k} out of range for {n} cells"
        )));
    }

    let a = orig.data();
    let b = shifted.data();
    let mut rmse = 0.0;
    let mut cosine = 0.0;
    for i in 0..n {
        let ra = &a[i * p..(i + 1) * p];
        let rb = &b[i * p..(i + 1) * p];
        let se: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
        rmse += (se / p as f64).sqrt();
        // Bitwise-equal rows are exactly aligned; the general formula can
        // land a few ulps under 1 even for identical data.
        cosine += if ra == rb {
            1.0
        } else {
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na: f64 = ra.iter().map(|v| v * v).sum();
            let nb: f64 = rb.iter().map(|v| v * v).sum();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
            }
        };
    }
    rmse /= n as f64;
    cosine /= n as f64;

    let (nn_a, nn_b) = rayon::join(|| knn_indices(a, n, p, k), || knn_indices(b, n, p, k));
    let overlap: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sa = nn_a[i].clone();
            let mut sb = nn_b[i].clone();
            sa.sort_unstable();
            sb.sort_unstable();
            let mut shared = 0usize;
            let (mut x, mut y) = (0, 0);
            while x < sa.len() && y < sb.len() {
                match sa[x].cmp(&sb[y]) {
                    std::cmp::Ordering::Less => x += 1,
                    std::cmp::Ordering::Greater => y += 1,
                    std::cmp::Ordering::Equal => {
                        shared += 1;
                        x += 1;
                        y += 1;
                    }
                }
            }
            shared as f64 / k as f64
        })
        .sum::<f64>()
        / n as f64;

    Ok(ConditionShift {
        rmse,
        cosine,
        overlap,
    })
}

fn expect_rank2(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [n, d] => Ok((*n, *d)),
        other => Err(AnalysisError::Config(format!(
            "expected a [n, d] matrix, got {other:?}"
        ))),
    }
}

fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let (n, d) = expect_rank2(x)?;
    let mut rows = x.data().to_vec();
    for row in rows.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(Tensor::from_vec(&[n, d], rows)?)
}

/// Full pipeline: L2-normalize all conditions, fit PCA on the original,
/// project everything with it, then score each shifted condition.
/// `pca_dim` is capped at the feature count.
pub fn shift_metrics(
    orig: &Tensor,
    shifted: &[Tensor],
    k: usize,
    pca_dim: usize,
) -> Result<ShiftReport> {
    if shifted.is_empty() {
        return Err(AnalysisError::Config("no shifted conditions".into()));
    }
    let (n, d) = expect_rank2(orig)?;
    if k == 0 || n <= k {
        return Err(AnalysisError::Config(format!(
            "overlap k = {k} out of range for {n} cells"
        )));
    }
    if pca_dim == 0 {
        return Err(AnalysisError::Config("pca_dim must be positive".into()));
    }
    let dim = pca_dim.min(d);

    let orig_norm = l2_normalize_rows(orig)?;
    let pca = pca_fit(&orig_norm, dim)?;
    let orig_proj = pca.transform(&orig_norm)?;

    let mut conditions = Vec::with_capacity(shifted.len());
    for cond in shifted {
        let proj = pca.transform(&l2_normalize_rows(cond)?)?;
        conditions.push(projected_shift_metrics(&orig_proj, &proj, k)?);
    }
    Ok(ShiftReport {
        rmse: summarize(conditions.iter().map(|c| c.rmse)),
        cosine: summarize(conditions.iter().map(|c| c.cosine)),
        overlap: summarize(conditions.iter().map(|c| c.overlap)),
        conditions,
    })
}
