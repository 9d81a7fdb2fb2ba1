//! k-nearest-neighbour graph on L2-normalized embeddings and Moran's I
//! spatial autocorrelation over it.

use rayon::prelude::*;

use super::{AnalysisError, Result};
use crate::tensor::Tensor;

/// Binary kNN adjacency. `neighbors[i]` holds exactly `k` indices sorted by
/// (distance, index); `symmetric` selects the union convention `w_ij = 1`
/// iff `j ∈ N(i)` or `i ∈ N(j)` when computing Moran's I.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    pub n: usize,
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub symmetric: bool,
}

impl KnnGraph {
    pub fn symmetrized(mut self) -> Self {
        self.symmetric = true;
        self
    }
}

/// Exact k smallest by `(distance, index)` among `j != i`.
pub(crate) fn knn_indices(rows: &[f64], n: usize, d: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let a = &rows[i * d..(i + 1) * d];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let b = &rows[j * d..(j + 1) * d];
                    let dist: f64 = a
                        .iter()
                        .zip(b)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    (dist, j)
                })
                .collect();
            let by_dist =
                |p: &(f64, usize), q: &(f64, usize)| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1));
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
            cand.sort_by(by_dist);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Builds the graph on row-normalized embeddings (zero rows are kept as
/// zero). Requires `n > k >= 1`.
pub fn knn_graph(embeddings: &Tensor, k: usize) -> Result<KnnGraph> {
    let (n, d) = match embeddings.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(AnalysisError::Config(format!(
                "expected [n, d] embeddings, got {other:?}"
            )))
        }
    };
    if k == 0 || n <= k {
        return Err(AnalysisError::Config(format!(
            "k = {k} neighbors out of range for {n} points"
        )));
    }
    let mut rows = embeddings.data().to_vec();
    for row in rows.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(KnnGraph {
        n,
        k,
        neighbors: knn_indices(&rows, n, d, k),
        symmetric: false,
    })
}

/// Moran's I with binary weights from the graph:
/// `I = (n/Σw) · Σ_ij w_ij (x_i − x̄)(x_j − x̄) / Σ_i (x_i − x̄)²`.
pub fn morans_i(graph: &KnnGraph, x: &[f64]) -> Result<f64> {
    if x.len() != graph.n {
        return Err(AnalysisError::Config(format!(
            "{} values for a graph over {} points",
            x.len(),
            graph.n
        )));
    }
    let n = graph.n as f64;
    let mean = x.iter().sum::<f64>() / n;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let denom: f64 = dev.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return Err(AnalysisError::ZeroVariance("value vector".into()));
    }

    let (num, total_w) = if graph.symmetric {
        let mut edges = std::collections::BTreeSet::new();
        for (i, nbrs) in graph.neighbors.iter().enumerate() {
            for &j in nbrs {
                edges.insert((i.min(j), i.max(j)));
            }
        }
        // Union-symmetrized W has both (i,j) and (j,i) set.
        let num: f64 = edges.iter().map(|&(i, j)| 2.0 * dev[i] * dev[j]).sum();
        (num, (2 * edges.len()) as f64)
    } else {
        let mut num = 0.0;
        for (i, nbrs) in graph.neighbors.iter().enumerate() {
            for &j in nbrs {
                num += dev[i] * dev[j];
            }
        }
        (num, (graph.n * graph.k) as f64)
    };
    Ok((n / total_w) * num / denom)
}
