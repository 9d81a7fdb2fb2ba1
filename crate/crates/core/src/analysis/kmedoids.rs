//! PAM k-medoids: greedy build, steepest-descent swaps, plus seeded random
//! restarts to step over shallow local minima. Fully deterministic per seed.

use rand::seq::index::sample;

use super::{AnalysisError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Extra random-initialization descents beyond the PAM build.
const RESTARTS: usize = 4;

/// Symmetric pairwise distances with a zero diagonal.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_embeddings(x: &Tensor) -> Result<Self> {
        let (n, d) = match x.shape() {
            [n, d] => (*n, *d),
            other => {
                return Err(AnalysisError::Config(format!(
                    "expected [n, d] embeddings, got {other:?}"
                )))
            }
        };
        if n == 0 {
            return Err(AnalysisError::Config("no points".into()));
        }
        let rows = x.data();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = rows[i * d..(i + 1) * d]
                    .iter()
                    .zip(&rows[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                data[i * n + j] = dist;
                data[j * n + i] = dist;
            }
        }
        Ok(Self { n, data })
    }

    /// Validates and wraps a row-major `n x n` matrix.
    pub fn from_raw(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(AnalysisError::Config(format!(
                "distance matrix of {} entries does not match n = {n}",
                data.len()
            )));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(AnalysisError::Config(format!(
                    "nonzero diagonal at {i}"
                )));
            }
            for j in 0..i {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if !a.is_finite() || a < 0.0 || (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                    return Err(AnalysisError::Config(format!(
                        "invalid or asymmetric distance at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

#[derive(Debug, Clone)]
pub struct Kmedoids {
    /// Sorted medoid indices.
    pub medoids: Vec<usize>,
    /// Medoid position (into `medoids`) per point.
    pub assignment: Vec<usize>,
    /// Sum over points of the distance to the nearest medoid.
    pub cost: f64,
}

fn cost_of(d: &DistanceMatrix, medoids: &[usize]) -> f64 {
    (0..d.len())
        .map(|i| {
            medoids
                .iter()
                .map(|&m| d.get(i, m))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Greedy PAM build: start from the 1-medoid optimum, then repeatedly add
/// the point with the largest cost reduction (ties to the smaller index).
fn pam_build(d: &DistanceMatrix, k: usize) -> Vec<usize> {
    let n = d.len();
    let first = (0..n)
        .min_by(|&a, &b| {
            let ca: f64 = (0..n).map(|i| d.get(i, a)).sum();
            let cb: f64 = (0..n).map(|i| d.get(i, b)).sum();
            ca.total_cmp(&cb)
        })
        .unwrap();
    let mut medoids = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| d.get(i, first)).collect();
    while medoids.len() < k {
        let best = (0..n)
            .filter(|c| !medoids.contains(c))
            .min_by(|&a, &b| {
                let ga: f64 = (0..n).map(|i| nearest[i].min(d.get(i, a))).sum();
                let gb: f64 = (0..n).map(|i| nearest[i].min(d.get(i, b))).sum();
                ga.total_cmp(&gb)
            })
            .unwrap();
        for i in 0..n {
            nearest[i] = nearest[i].min(d.get(i, best));
        }
        medoids.push(best);
    }
    medoids
}

/// Steepest-descent swap phase; strictly decreasing cost, so it terminates.
fn swap_descent(d: &DistanceMatrix, mut medoids: Vec<usize>) -> (Vec<usize>, f64) {
    let n = d.len();
    let mut cost = cost_of(d, &medoids);
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for mi in 0..medoids.len() {
            for cand in 0..n {
                if medoids.contains(&cand) {
                    continue;
                }
                let saved = medoids[mi];
                medoids[mi] = cand;
                let c = cost_of(d, &medoids);
                medoids[mi] = saved;
                if c < cost && best.map_or(true, |(bc, _, _)| c < bc) {
                    best = Some((c, mi, cand));
                }
            }
        }
        match best {
            Some((c, mi, cand)) => {
                debug_assert!(c < cost);
                medoids[mi] = cand;
                cost = c;
            }
            None => return (medoids, cost),
        }
    }
}

/// The best solution over the PAM build and `RESTARTS` seeded random
/// initializations, each refined by swap descent. Cost ties prefer the
/// lexicographically smaller medoid set.
pub fn kmedoids(d: &DistanceMatrix, k: usize, seed: u64) -> Result<Kmedoids> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(AnalysisError::Config(format!(
            "k = {k} medoids out of range for {n} points"
        )));
    }

    let mut starts = vec![pam_build(d, k)];
    let mut r = rng::substream(seed, "kmedoids");
    for _ in 0..RESTARTS {
        starts.push(sample(&mut r, n, k).into_vec());
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for start in starts {
        let (mut medoids, cost) = swap_descent(d, start);
        medoids.sort_unstable();
        let better = match &best {
            None => true,
            Some((bc, bm)) => cost < *bc || (cost == *bc && medoids < *bm),
        };
        if better {
            best = Some((cost, medoids));
        }
    }
    let (cost, medoids) = best.unwrap();

    let assignment = (0..n)
        .map(|i| {
            (0..medoids.len())
                .min_by(|&a, &b| d.get(i, medoids[a]).total_cmp(&d.get(i, medoids[b])))
                .unwrap()
        })
        .collect();
    Ok(Kmedoids {
        medoids,
        assignment,
        cost,
    })
}
