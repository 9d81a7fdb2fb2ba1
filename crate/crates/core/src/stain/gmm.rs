//! Mixture model over per-image stain statistics.
//!
//! Each image is summarized by six numbers: mean and std of every OD
//! channel. A diagonal Gaussian mixture over these vectors captures the
//! stain variation of a dataset; augmentation samples a target vector and
//! shifts the image's OD channels onto it.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_from_od, od_image, Result, StainError};
use crate::pixels::RgbPatch;
use crate::rng::{normal, substream};
use crate::util::{mean, std_pop};

/// Variance floor applied in the M step; keeps densities finite when a
/// component collapses onto identical points.
const VAR_FLOOR: f64 = 1e-12;

/// Per-image stain statistics: [μR, μG, μB, σR, σG, σB] in OD space.
pub fn stain_stats(img: &RgbPatch) -> [f64; 6] {
    let od = od_image(img);
    let mut out = [0.0; 6];
    let mut chan = Vec::with_capacity(od.len() / 3);
    for c in 0..3 {
        chan.clear();
        chan.extend(od.iter().skip(c).step_by(3));
        out[c] = mean(&chan);
        out[3 + c] = std_pop(&chan, out[c]);
    }
    out
}

/// Diagonal Gaussian mixture over 6-dim stain statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StainStatsModel {
    pub components: usize,
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 6]>,
    pub stds: Vec<[f64; 6]>,
}

impl StainStatsModel {
    /// Draw one target stat vector: component by weight, then each
    /// dimension from that component's Gaussian. Sampled stds are clamped
    /// non-negative since a negative spread has no meaning.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 6] {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.components - 1;
        for (j, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let mut out = [0.0; 6];
        for d in 0..6 {
            out[d] = self.means[k][d] + self.stds[k][d] * normal(rng);
        }
        for d in 3..6 {
            out[d] = out[d].max(0.0);
        }
        out
    }
}

fn log_density(x: &[f64; 6], mu: &[f64; 6], sigma: &[f64; 6]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    let mut lp = 0.0;
    for d in 0..6 {
        let z = (x[d] - mu[d]) / sigma[d];
        lp += -HALF_LN_2PI - sigma[d].ln() - 0.5 * z * z;
    }
    lp
}

/// Fit a diagonal GMM by EM. Convergence: absolute change in mean
/// log-likelihood below `tol`; anything else after `max_iters` is an error
/// carrying the final log-likelihood.
pub fn gmm_fit(
    stats: &[[f64; 6]],
    components: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<StainStatsModel> {
    if components == 0 {
        return Err(StainError::InvalidInput("components must be >= 1".into()));
    }
    let need = components * 10;
    if stats.len() < need {
        return Err(StainError::InvalidInput(format!(
            "need at least {need} stat vectors for {components} components, got {}",
            stats.len()
        )));
    }
    let n = stats.len();
    let mut rng = substream(seed, "stain-gmm-fit");

    // Means start at distinct data points; stds at the global spread.
    let mut global_std = [0.0; 6];
    for d in 0..6 {
        let col: Vec<f64> = stats.iter().map(|s| s[d]).collect();
        global_std[d] = std_pop(&col, mean(&col)).max(VAR_FLOOR.sqrt());
    }
    let picks = index_sample(&mut rng, n, components);
    let mut means: Vec<[f64; 6]> = picks.iter().map(|i| stats[i]).collect();
    let mut stds: Vec<[f64; 6]> = vec![global_std; components];
    let mut weights = vec![1.0 / components as f64; components];

    let mut resp = vec![0.0; n * components];
    let mut prev_ll = f64::NAN;
    let mut ll = f64::NAN;
    for _ in 0..max_iters {
        // E step with logsumexp-stabilized responsibilities.
        ll = 0.0;
        for (i, x) in stats.iter().enumerate() {
            let row = &mut resp[i * components..(i + 1) * components];
            for j in 0..components {
                row[j] = weights[j].ln() + log_density(x, &means[j], &stds[j]);
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            ll += lse;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        ll /= n as f64;
        if (ll - prev_ll).abs() < tol {
            return Ok(StainStatsModel {
                components,
                weights,
                means,
                stds,
            });
        }
        prev_ll = ll;

        // M step.
        for j in 0..components {
            let nj: f64 = (0..n).map(|i| resp[i * components + j]).sum();
            weights[j] = nj / n as f64;
            let mut mu = [0.0; 6];
            for (i, x) in stats.iter().enumerate() {
                let r = resp[i * components + j];
                for d in 0..6 {
                    mu[d] += r * x[d];
                }
            }
            for d in &mut mu {
                *d /= nj.max(f64::MIN_POSITIVE);
            }
            let mut var = [0.0; 6];
            for (i, x) in stats.iter().enumerate() {
                let r = resp[i * components + j];
                for d in 0..6 {
                    let diff = x[d] - mu[d];
                    var[d] += r * diff * diff;
                }
            }
            for d in 0..6 {
                stds[j][d] = (var[d] / nj.max(f64::MIN_POSITIVE)).max(VAR_FLOOR).sqrt();
            }
            means[j] = mu;
        }
    }
    Err(StainError::EmDidNotConverge {
        iters: max_iters,
        loglik: ll,
    })
}

/// Affinely map each OD channel from the image's own (mean, std) to the
/// target's, then re-render to RGB. Shifting to the image's own stats is
/// the identity up to clamping.
pub fn shift_to_stats(img: &RgbPatch, target: &[f64; 6]) -> Result<RgbPatch> {
    let src = stain_stats(img);
    let mut od = od_image(img);
    for c in 0..3 {
        let scale = target[3 + c] / src[3 + c].max(1e-12);
        let (mu_s, mu_t) = (src[c], target[c]);
        for v in od.iter_mut().skip(c).step_by(3) {
            *v = (*v - mu_s) * scale + mu_t;
        }
    }
    image_from_od(&od, img.width(), img.height())
}

/// Sample a stat vector from the model and shift the image onto it.
pub fn gmm_sample_augment(img: &RgbPatch, model: &StainStatsModel, seed: u64) -> Result<RgbPatch> {
    let mut rng = substream(seed, "stain-gmm-sample");
    let target = model.sample(&mut rng);
    shift_to_stats(img, &target)
}
