//! Self-supervised training objectives.
//!
//! Contrastive (InfoNCE), self-distillation (global, local-to-global, and
//! masked-token cross-entropies against a centered, sharpened teacher), and
//! two spread regularizers over normalized embeddings (nearest-neighbor
//! KoLeo and a von Mises-Fisher kernel density term). All losses are plain
//! functions of tensors; teacher inputs are detached inside, so gradients
//! w.r.t. teacher activations are exactly zero by construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("{what} batch is empty")]
    EmptyBatch { what: &'static str },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("need at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("{op}: expected shape {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("mask position (image {image}, token {token}) outside a {n}x{t} batch")]
    MaskOutOfRange {
        image: usize,
        token: usize,
        n: usize,
        t: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Guard inside the KoLeo log; keeps duplicate embeddings finite.
pub const KOLEO_EPS: f64 = 1e-8;
/// Default InfoNCE temperature.
pub const INFO_NCE_TAU: f64 = 0.2;
/// Large finite penalty that zeroes self-similarity terms under
/// log-sum-exp without introducing non-finite values.
const SELF_EXCLUSION: f64 = -1e9;

/// Teacher sharpening/centering state shared by the distillation losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillParams {
    pub tau_s: f64,
    pub tau_t: f64,
    /// Running center over teacher logits; length is the prototype count.
    pub center: Vec<f64>,
    pub center_momentum: f64,
}

impl DistillParams {
    /// DINOv2-style defaults: τ_s=0.1, τ_t=0.04 (warmup start), λ=0.9.
    pub fn with_defaults(prototypes: usize) -> Self {
        DistillParams {
            tau_s: 0.1,
            tau_t: 0.04,
            center: vec![0.0; prototypes],
            center_momentum: 0.9,
        }
    }

    pub fn prototypes(&self) -> usize {
        self.center.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_t > 0.0 && self.tau_s > self.tau_t) {
            return Err(ObjectiveError::InvalidParam(format!(
                "need tau_s > tau_t > 0, got tau_s={} tau_t={}",
                self.tau_s, self.tau_t
            )));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(ObjectiveError::InvalidParam(format!(
                "center momentum {} outside [0, 1)",
                self.center_momentum
            )));
        }
        if self.center.len() < 2 {
            return Err(ObjectiveError::TooFew {
                what: "prototypes",
                need: 2,
                got: self.center.len(),
            });
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(ObjectiveError::InvalidParam("center is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    KoLeo,
    Kde,
}

/// Weights of the combined distillation objective:
/// total = dino + ibot_weight·ibot + reg_weight·regularizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub ibot_weight: f64,
    pub regularizer: Regularizer,
    pub reg_weight: f64,
    pub kde_kappa: f64,
}

impl LossWeights {
    /// The variant this library trains by default: local-to-global matching
    /// off, KDE regularizer with κ=5 at weight 0.05, iBOT at weight 1.
    pub fn lemon_dinov2() -> Self {
        LossWeights {
            ibot_weight: 1.0,
            regularizer: Regularizer::Kde,
            reg_weight: 0.05,
            kde_kappa: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ibot_weight < 0.0 || self.reg_weight < 0.0 {
            return Err(ObjectiveError::InvalidParam(format!(
                "loss weights must be non-negative, got ibot={} reg={}",
                self.ibot_weight, self.reg_weight
            )));
        }
        if !(self.kde_kappa > 0.0) {
            return Err(ObjectiveError::InvalidParam(format!(
                "kde kappa must be positive, got {}",
                self.kde_kappa
            )));
        }
        Ok(())
    }
}

fn expect_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        other => Err(ObjectiveError::BadShape {
            op,
            expected: "[n, d]".into(),
            got: other.to_vec(),
        }),
    }
}

/// Contrastive loss over query/key pairs. With `negatives: None` every
/// other positive in the batch serves as a negative (in-batch mode);
/// otherwise `negatives` is an `[n, N, d]` bank per query. Rows are
/// L2-normalized defensively, so similarities are cosines either way.
pub fn info_nce(
    queries: &Tensor,
    keys: &Tensor,
    negatives: Option<&Tensor>,
    tau: f64,
) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ObjectiveError::BadTemperature(tau));
    }
    let (n, d) = expect_rank2(queries, "info_nce")?;
    if n == 0 {
        return Err(ObjectiveError::EmptyBatch { what: "query" });
    }
    if keys.shape() != [n, d] {
        return Err(ObjectiveError::BadShape {
            op: "info_nce",
            expected: format!("[{n}, {d}]"),
            got: keys.shape().to_vec(),
        });
    }
    let q = queries.l2_normalize_rows(1e-12)?;
    let k = keys.l2_normalize_rows(1e-12)?;
    match negatives {
        None => {
            // Diagonal entries are the positives; the rest of each row
            // serves as negatives.
            let logits = q.matmul(&k.transpose()?)?;
            let logp = logits.log_softmax(tau)?;
            let mut eye = vec![0.0; n * n];
            for i in 0..n {
                eye[i * n + i] = 1.0;
            }
            let eye = Tensor::from_vec(&[n, n], eye)?;
            Ok(logp.mul(&eye)?.sum_all()?.scale(-1.0 / n as f64)?)
        }
        Some(bank) => {
            let (bn, big_n, bd) = match bank.shape() {
                [a, b, c] => (*a, *b, *c),
                other => {
                    return Err(ObjectiveError::BadShape {
                        op: "info_nce",
                        expected: "[n, N, d]".into(),
                        got: other.to_vec(),
                    })
                }
            };
            if bn != n || bd != d {
                return Err(ObjectiveError::BadShape {
                    op: "info_nce",
                    expected: format!("[{n}, N, {d}]"),
                    got: bank.shape().to_vec(),
                });
            }
            if big_n == 0 {
                return Err(ObjectiveError::EmptyBatch { what: "negative" });
            }
            let negs = bank
                .reshape(&[n * big_n, d])?
                .l2_normalize_rows(1e-12)?
                .reshape(&[n, big_n, d])?;
            let pos = q.mul(&k)?.sum_axis(1, true)?; // [n, 1]
            let q3 = q.reshape(&[n, 1, d])?;
            let neg = q3.matmul(&negs.permute(&[0, 2, 1])?)?.reshape(&[n, big_n])?;
            let logits = Tensor::concat(&[pos, neg], 1)?;
            let logp = logits.log_softmax(tau)?;
            let first = logp.narrow(1, 0, 1)?;
            Ok(first.sum_all()?.scale(-1.0 / n as f64)?)
        }
    }
}

/// Teacher probabilities: softmax((logits − center) / τ_t), detached.
fn teacher_probs(logits: &Tensor, params: &DistillParams) -> Result<Tensor> {
    let k = *logits.shape().last().expect("rank >= 1");
    if k != params.prototypes() {
        return Err(ObjectiveError::BadShape {
            op: "teacher_probs",
            expected: format!("last dim {}", params.prototypes()),
            got: logits.shape().to_vec(),
        });
    }
    let center = Tensor::from_vec(&[k], params.center.clone())?;
    let shifted = logits.detach().sub(&center)?;
    Ok(shifted.softmax(params.tau_t)?.detach())
}

/// Mean cross-entropy between detached teacher rows and student rows.
fn distill_ce(student_logits: &Tensor, teacher_logits: &Tensor, params: &DistillParams) -> Result<Tensor> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(ObjectiveError::BadShape {
            op: "distill_ce",
            expected: format!("{:?}", student_logits.shape()),
            got: teacher_logits.shape().to_vec(),
        });
    }
    let p_t = teacher_probs(teacher_logits, params)?;
    let log_s = student_logits.log_softmax(params.tau_s)?;
    let k = *student_logits.shape().last().expect("rank >= 1");
    let rows = student_logits.numel() / k;
    Ok(p_t
        .mul(&log_s)?
        .sum_all()?
        .scale(-1.0 / rows as f64)?)
}

/// Self-distillation between two global views, crossed: each student view
/// matches the teacher's distribution of the other view.
pub fn dino_global(
    student: (&Tensor, &Tensor),
    teacher: (&Tensor, &Tensor),
    params: &DistillParams,
) -> Result<Tensor> {
    params.validate()?;
    let (n, _) = expect_rank2(student.0, "dino_global")?;
    if n == 0 {
        return Err(ObjectiveError::EmptyBatch { what: "student" });
    }
    let a = distill_ce(student.0, teacher.1, params)?;
    let b = distill_ce(student.1, teacher.0, params)?;
    Ok(a.add(&b)?.scale(0.5)?)
}

/// Every local student view matches every global teacher view; the double
/// sum is normalized by |V_l|·|V_g|.
pub fn dino_local_global(
    student_locals: &[Tensor],
    teacher_globals: &[Tensor],
    params: &DistillParams,
) -> Result<Tensor> {
    params.validate()?;
    if student_locals.is_empty() {
        return Err(ObjectiveError::EmptyBatch { what: "local view" });
    }
    if teacher_globals.is_empty() {
        return Err(ObjectiveError::EmptyBatch { what: "global view" });
    }
    let mut total: Option<Tensor> = None;
    for s in student_locals {
        for t in teacher_globals {
            let ce = distill_ce(s, t, params)?;
            total = Some(match total {
                None => ce,
                Some(acc) => acc.add(&ce)?,
            });
        }
    }
    let pairs = (student_locals.len() * teacher_globals.len()) as f64;
    Ok(total.expect("non-empty view sets").scale(1.0 / pairs)?)
}

/// Masked-token distillation: cross-entropy between teacher and student
/// token distributions on the masked positions only, averaged over |M|.
/// An empty mask contributes exactly zero.
pub fn ibot_loss(
    student_tokens: &Tensor,
    teacher_tokens: &Tensor,
    mask: &[(usize, usize)],
    params: &DistillParams,
) -> Result<Tensor> {
    params.validate()?;
    let (n, t, k) = match student_tokens.shape() {
        [n, t, k] => (*n, *t, *k),
        other => {
            return Err(ObjectiveError::BadShape {
                op: "ibot_loss",
                expected: "[n, T, K]".into(),
                got: other.to_vec(),
            })
        }
    };
    if teacher_tokens.shape() != [n, t, k] {
        return Err(ObjectiveError::BadShape {
            op: "ibot_loss",
            expected: format!("[{n}, {t}, {k}]"),
            got: teacher_tokens.shape().to_vec(),
        });
    }
    if mask.is_empty() {
        return Ok(Tensor::scalar_value(0.0));
    }
    let mut weights = vec![0.0; n * t];
    for &(i, j) in mask {
        if i >= n || j >= t {
            return Err(ObjectiveError::MaskOutOfRange {
                image: i,
                token: j,
                n,
                t,
            });
        }
        weights[i * t + j] = 1.0;
    }
    let p_t = teacher_probs(teacher_tokens, params)?;
    let log_s = student_tokens.log_softmax(params.tau_s)?;
    let ce = p_t.mul(&log_s)?.sum_axis(2, false)?; // [n, T]
    let w = Tensor::from_vec(&[n, t], weights)?;
    Ok(ce
        .mul(&w)?
        .sum_all()?
        .scale(-1.0 / mask.len() as f64)?)
}

/// Differential-entropy regularizer: for each row, the squared distance to
/// its nearest distinct neighbor enters a log. Neighbor choice is a
/// non-differentiable argmin; gradients flow through the chosen distance.
pub fn koleo_loss(z: &Tensor) -> Result<Tensor> {
    let (n, _) = expect_rank2(z, "koleo_loss")?;
    if n < 2 {
        return Err(ObjectiveError::TooFew {
            what: "embeddings",
            need: 2,
            got: n,
        });
    }
    let zn = z.l2_normalize_rows(1e-12)?;
    let cos = zn.matmul(&zn.transpose()?)?; // [n, n]
    let sel = {
        let c = cos.data();
        let mut sel = vec![0.0; n * n];
        for i in 0..n {
            let mut best = usize::MAX;
            let mut best_cos = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i && c[i * n + j] > best_cos {
                    best_cos = c[i * n + j];
                    best = j;
                }
            }
            sel[i * n + best] = 1.0;
        }
        Tensor::from_vec(&[n, n], sel)?
    };
    // ‖zi − zj‖² = 2 − 2·cos for unit rows.
    let sqd = cos.scale(-2.0)?.add_scalar(2.0)?;
    let nearest = sqd.mul(&sel)?.sum_axis(1, false)?; // [n]
    Ok(nearest
        .add_scalar(KOLEO_EPS)?
        .log()?
        .sum_all()?
        .scale(-1.0)?)
}

/// Kernel-density uniformity term with a vMF kernel: Σ_i log Σ_{j≠i}
/// exp(κ·zᵢ·zⱼ), log-sum-exp stabilized, self term excluded.
pub fn kde_loss(z: &Tensor, kappa: f64) -> Result<Tensor> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(ObjectiveError::InvalidParam(format!(
            "kde kappa must be positive, got {kappa}"
        )));
    }
    let (n, _) = expect_rank2(z, "kde_loss")?;
    if n < 2 {
        return Err(ObjectiveError::TooFew {
            what: "embeddings",
            need: 2,
            got: n,
        });
    }
    let zn = z.l2_normalize_rows(1e-12)?;
    let cos = zn.matmul(&zn.transpose()?)?;
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = SELF_EXCLUSION;
    }
    let excl = Tensor::from_vec(&[n, n], diag)?;
    let logits = cos.scale(kappa)?.add(&excl)?;
    Ok(logits.logsumexp_last()?.sum_all()?)
}

/// Running center update: c' = λ·c + (1−λ)·mean over the batch rows of the
/// teacher logits (all leading axes are batch).
pub fn center_update(center: &[f64], teacher_logits: &Tensor, momentum: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(ObjectiveError::InvalidParam(format!(
            "center momentum {momentum} outside [0, 1)"
        )));
    }
    let k = *teacher_logits.shape().last().unwrap_or(&0);
    if k != center.len() || k == 0 {
        return Err(ObjectiveError::BadShape {
            op: "center_update",
            expected: format!("last dim {}", center.len()),
            got: teacher_logits.shape().to_vec(),
        });
    }
    let rows = teacher_logits.numel() / k;
    if rows == 0 {
        return Err(ObjectiveError::EmptyBatch { what: "teacher" });
    }
    let data = teacher_logits.data();
    let mut mean = vec![0.0; k];
    for r in 0..rows {
        for j in 0..k {
            mean[j] += data[r * k + j];
        }
    }
    Ok(center
        .iter()
        .zip(&mean)
        .map(|(&c, &m)| momentum * c + (1.0 - momentum) * m / rows as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, substream};
    use crate::tensor::grad_check;
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, "objtest");
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
    }

    fn params_k(k: usize) -> DistillParams {
        DistillParams::with_defaults(k)
    }

    #[test]
    fn info_nce_lone_positive_is_zero() {
        let q = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let loss = info_nce(&q, &q, None, 1.0).unwrap().scalar().unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn info_nce_two_point_oracle() {
        // q = k = e1, one negative e2, τ=1: softmax over [1, 0] gives
        // loss = log(1 + e^{-1}).
        let q = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let neg = Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let loss = info_nce(&q, &q, Some(&neg), 1.0).unwrap().scalar().unwrap();
        assert!((loss - 0.313_261_687_518_222_8).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn info_nce_rejects_bad_inputs() {
        let q = Tensor::from_vec(&[2, 3], vec![0.1; 6]).unwrap();
        assert!(matches!(
            info_nce(&q, &q, None, 0.0).unwrap_err(),
            ObjectiveError::BadTemperature(_)
        ));
        assert!(matches!(
            info_nce(&q, &q, None, -0.3).unwrap_err(),
            ObjectiveError::BadTemperature(_)
        ));
        let k = Tensor::from_vec(&[3, 3], vec![0.1; 9]).unwrap();
        assert!(info_nce(&q, &k, None, 1.0).is_err());
        let empty_bank = Tensor::zeros(&[2, 0, 3]);
        assert!(matches!(
            info_nce(&q, &q, Some(&empty_bank), 1.0).unwrap_err(),
            ObjectiveError::EmptyBatch { .. }
        ));
    }

    #[test]
    fn info_nce_permuting_negatives_is_invariant() {
        let q = randn(&[3, 5], 1);
        let k = randn(&[3, 5], 2);
        let bank = randn(&[3, 4, 5], 3);
        let base = info_nce(&q, &k, Some(&bank), 0.2).unwrap().scalar().unwrap();
        // reverse the negatives of every query
        let mut permuted = vec![0.0; 3 * 4 * 5];
        let src = bank.data();
        for i in 0..3 {
            for j in 0..4 {
                let s = (i * 4 + j) * 5;
                let d = (i * 4 + (3 - j)) * 5;
                permuted[d..d + 5].copy_from_slice(&src[s..s + 5]);
            }
        }
        let perm = Tensor::from_vec(&[3, 4, 5], permuted).unwrap();
        let same = info_nce(&q, &k, Some(&perm), 0.2).unwrap().scalar().unwrap();
        assert!((base - same).abs() < 1e-12);
    }

    #[test]
    fn info_nce_is_invariant_to_common_rescaling() {
        let q = randn(&[4, 6], 4);
        let k = randn(&[4, 6], 5);
        let base = info_nce(&q, &k, None, 0.2).unwrap().scalar().unwrap();
        for scale in [0.013, 7.0, 311.0] {
            let qs = q.scale(scale).unwrap();
            let ks = k.scale(scale).unwrap();
            let s = info_nce(&qs, &ks, None, 0.2).unwrap().scalar().unwrap();
            assert!((base - s).abs() < 1e-7, "scale {scale}: {base} vs {s}");
        }
    }

    #[test]
    fn info_nce_gradients_check_out() {
        let q = randn(&[3, 4], 6).tracked();
        let k = randn(&[3, 4], 7).tracked();
        let report = grad_check(
            |inp| info_nce(&inp[0], &inp[1], None, 0.2).map_err(|e| match e {
                ObjectiveError::Tensor(t) => t,
                other => TensorError::Domain { op: "info_nce", detail: other.to_string() },
            }),
            &[q.clone(), k.clone()],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");

        let bank = randn(&[3, 5, 4], 8).tracked();
        let report = grad_check(
            |inp| info_nce(&inp[0], &inp[1], Some(&inp[2]), 0.3).map_err(|e| match e {
                ObjectiveError::Tensor(t) => t,
                other => TensorError::Domain { op: "info_nce", detail: other.to_string() },
            }),
            &[q, k, bank],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn dino_uniform_teacher_costs_log_k() {
        let k = 7;
        let mut p = params_k(k);
        p.tau_s = 0.1;
        p.tau_t = 0.05;
        let teacher = Tensor::full(&[4, k], 0.37); // constant rows → uniform
        let student = Tensor::full(&[4, k], -1.2); // constant rows → uniform
        let loss = dino_global((&student, &student), (&teacher, &teacher), &p)
            .unwrap()
            .scalar()
            .unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-10, "{loss}");
    }

    #[test]
    fn dino_matching_distributions_cost_their_entropy() {
        // softmax(l/τ_s) == softmax(l·(τ_t/τ_s)/τ_t), so scaling the
        // teacher logits makes the two distributions coincide while
        // honoring τ_s > τ_t.
        let logits = vec![0.3, -0.1, 0.7, 0.2, -0.5];
        let k = logits.len();
        let mut p = params_k(k);
        p.tau_s = 0.1;
        p.tau_t = 0.05;
        let s = Tensor::from_vec(&[1, k], logits.clone()).unwrap();
        let t = s.scale(p.tau_t / p.tau_s).unwrap();
        let loss = dino_global((&s, &s), (&t, &t), &p).unwrap().scalar().unwrap();

        // entropy oracle by direct summation
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| ((v - m) / p.tau_s).exp()).collect();
        let z: f64 = exps.iter().sum();
        let entropy: f64 = exps
            .iter()
            .map(|&e| {
                let prob = e / z;
                -prob * prob.ln()
            })
            .sum();
        assert!((loss - entropy).abs() < 1e-10, "{loss} vs {entropy}");
    }

    #[test]
    fn dino_teacher_gets_exactly_zero_gradient() {
        let k = 6;
        let p = params_k(k);
        let s1 = randn(&[3, k], 10).tracked();
        let s2 = randn(&[3, k], 11).tracked();
        let t1 = randn(&[3, k], 12).tracked();
        let t2 = randn(&[3, k], 13).tracked();
        let loss = dino_global((&s1, &s2), (&t1, &t2), &p).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.wrt(&t1).is_none());
        assert!(grads.wrt(&t2).is_none());
        assert!(grads.wrt_or_zero(&t1).iter().all(|&g| g == 0.0));
        assert!(grads.wrt(&s1).is_some());
        let gs = grads.wrt(&s1).unwrap();
        assert!(gs.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn dino_rejects_single_prototype() {
        let p = params_k(1);
        let t = Tensor::from_vec(&[2, 1], vec![0.1, 0.2]).unwrap();
        assert!(matches!(
            dino_global((&t, &t), (&t, &t), &p).unwrap_err(),
            ObjectiveError::TooFew { what: "prototypes", .. }
        ));
    }

    #[test]
    fn dino_is_at_least_teacher_entropy() {
        // Gibbs: CE(p_t, p_s) ≥ H(p_t), equality iff p_s = p_t.
        let k = 5;
        let mut rng = substream(21, "gibbs");
        for _ in 0..50 {
            let t_logits: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
            let s_logits: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
            let mut p = params_k(k);
            p.tau_s = 0.3;
            p.tau_t = 0.2;
            let t = Tensor::from_vec(&[1, k], t_logits.clone()).unwrap();
            let s = Tensor::from_vec(&[1, k], s_logits).unwrap();
            let loss = dino_global((&s, &s), (&t, &t), &p).unwrap().scalar().unwrap();

            let m = t_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = t_logits.iter().map(|&v| ((v - m) / 0.2).exp()).collect();
            let z: f64 = exps.iter().sum();
            let entropy: f64 = exps.iter().map(|&e| -(e / z) * (e / z).ln()).sum();
            assert!(loss >= entropy - 1e-10, "{loss} < {entropy}");
        }
    }

    #[test]
    fn dino_gradients_check_out() {
        let k = 5;
        let mut p = params_k(k);
        p.center = (0..k).map(|i| 0.1 * i as f64).collect();
        let s1 = randn(&[2, k], 14).tracked();
        let s2 = randn(&[2, k], 15).tracked();
        let t1 = randn(&[2, k], 16);
        let t2 = randn(&[2, k], 17);
        let report = grad_check(
            |inp| {
                dino_global((&inp[0], &inp[1]), (&t1, &t2), &p).map_err(|e| TensorError::Domain {
                    op: "dino_global",
                    detail: e.to_string(),
                })
            },
            &[s1, s2],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn local_global_matches_entropy_when_views_coincide() {
        let logits = vec![0.5, -0.2, 0.1, 0.9];
        let k = logits.len();
        let mut p = params_k(k);
        p.tau_s = 0.2;
        p.tau_t = 0.1;
        let s = Tensor::from_vec(&[1, k], logits.clone()).unwrap();
        // scaled teacher logits yield the same distribution at τ_t
        let t = s.scale(p.tau_t / p.tau_s).unwrap();
        let loss = dino_local_global(&[s.clone()], &[t.clone()], &p)
            .unwrap()
            .scalar()
            .unwrap();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| ((v - m) / p.tau_s).exp()).collect();
        let z: f64 = exps.iter().sum();
        let entropy: f64 = exps.iter().map(|&e| -(e / z) * (e / z).ln()).sum();
        assert!((loss - entropy).abs() < 1e-10);

        // duplicated local views leave the mean unchanged
        let dup = dino_local_global(&[s.clone(), s.clone()], &[t.clone()], &p)
            .unwrap()
            .scalar()
            .unwrap();
        assert!((dup - loss).abs() < 1e-12);

        assert!(matches!(
            dino_local_global(&[], &[t], &p).unwrap_err(),
            ObjectiveError::EmptyBatch { what: "local view" }
        ));
    }

    #[test]
    fn local_global_uniform_teacher_costs_log_k() {
        let k = 9;
        let p = params_k(k);
        let teacher = Tensor::full(&[3, k], 2.5);
        let student = randn(&[3, k], 18);
        let loss = dino_local_global(&[student], &[teacher], &p).unwrap().scalar().unwrap();
        assert!(loss >= (k as f64).ln() - 1e-10);
        let uniform_student = Tensor::full(&[3, k], 0.0);
        let teacher = Tensor::full(&[3, k], 2.5);
        let at_uniform = dino_local_global(&[uniform_student], &[teacher], &p)
            .unwrap()
            .scalar()
            .unwrap();
        assert!((at_uniform - (k as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn local_global_gradients_check_out() {
        let k = 4;
        let p = params_k(k);
        let l1 = randn(&[2, k], 19).tracked();
        let l2 = randn(&[2, k], 20).tracked();
        let g1 = randn(&[2, k], 21);
        let report = grad_check(
            |inp| {
                dino_local_global(&[inp[0].clone(), inp[1].clone()], &[g1.clone()], &p).map_err(
                    |e| TensorError::Domain {
                        op: "dino_local_global",
                        detail: e.to_string(),
                    },
                )
            },
            &[l1, l2],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn ibot_empty_mask_is_zero() {
        let p = params_k(4);
        let s = randn(&[2, 3, 4], 22).tracked();
        let t = randn(&[2, 3, 4], 23);
        let loss = ibot_loss(&s, &t, &[], &p).unwrap();
        assert_eq!(loss.scalar().unwrap(), 0.0);
    }

    #[test]
    fn ibot_uniform_teacher_single_token_costs_log_k() {
        let k = 11;
        let p = params_k(k);
        let s = Tensor::full(&[1, 3, k], 0.0);
        let t = Tensor::full(&[1, 3, k], 1.23);
        let loss = ibot_loss(&s, &t, &[(0, 1)], &p).unwrap().scalar().unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn ibot_matches_brute_force_restriction() {
        let (n, t_len, k) = (2, 3, 4);
        let mut p = params_k(k);
        p.center = vec![0.05, -0.1, 0.2, 0.0];
        p.tau_s = 0.15;
        p.tau_t = 0.07;
        let s = randn(&[n, t_len, k], 24);
        let t = randn(&[n, t_len, k], 25);
        let mask = [(0, 2), (1, 0), (1, 1)];
        let loss = ibot_loss(&s, &t, &mask, &p).unwrap().scalar().unwrap();

        // direct f64 evaluation over exactly the masked positions
        let sd = s.data();
        let td = t.data();
        let mut total = 0.0;
        for &(i, j) in &mask {
            let so = (i * t_len + j) * k;
            let srow = &sd[so..so + k];
            let trow: Vec<f64> = td[so..so + k]
                .iter()
                .zip(&p.center)
                .map(|(&v, &c)| v - c)
                .collect();
            let tm = trow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let texp: Vec<f64> = trow.iter().map(|&v| ((v - tm) / p.tau_t).exp()).collect();
            let tz: f64 = texp.iter().sum();
            let sm = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sexp: Vec<f64> = srow.iter().map(|&v| ((v - sm) / p.tau_s).exp()).collect();
            let sz: f64 = sexp.iter().sum();
            for a in 0..k {
                total -= texp[a] / tz * (sexp[a] / sz).ln();
            }
        }
        total /= mask.len() as f64;
        assert!((loss - total).abs() < 1e-10, "{loss} vs {total}");
    }

    #[test]
    fn ibot_rejects_out_of_range_mask() {
        let p = params_k(4);
        let s = randn(&[2, 3, 4], 26);
        let t = randn(&[2, 3, 4], 27);
        assert!(matches!(
            ibot_loss(&s, &t, &[(0, 3)], &p).unwrap_err(),
            ObjectiveError::MaskOutOfRange { .. }
        ));
        assert!(matches!(
            ibot_loss(&s, &t, &[(2, 0)], &p).unwrap_err(),
            ObjectiveError::MaskOutOfRange { .. }
        ));
    }

    #[test]
    fn ibot_gradients_check_out_and_skip_unmasked() {
        let (n, t_len, k) = (2, 3, 4);
        let p = params_k(k);
        let s = randn(&[n, t_len, k], 28).tracked();
        let t = randn(&[n, t_len, k], 29);
        let mask = [(0, 0), (1, 2)];
        let loss = ibot_loss(&s, &t, &mask, &p).unwrap();
        let grads = loss.backward().unwrap();
        let gs = grads.wrt(&s).unwrap();
        for i in 0..n {
            for j in 0..t_len {
                let masked = mask.contains(&(i, j));
                let row = &gs[(i * t_len + j) * k..(i * t_len + j + 1) * k];
                let any = row.iter().any(|&g| g != 0.0);
                assert_eq!(any, masked, "position ({i},{j})");
            }
        }
        let report = grad_check(
            |inp| {
                ibot_loss(&inp[0], &t, &mask, &p).map_err(|e| TensorError::Domain {
                    op: "ibot_loss",
                    detail: e.to_string(),
                })
            },
            &[s],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn koleo_antipodal_and_orthogonal_oracles() {
        let z = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let loss = koleo_loss(&z).unwrap().scalar().unwrap();
        assert!((loss - (-2.772_588_722_239_781)).abs() < 1e-6, "{loss}");

        let z = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let loss = koleo_loss(&z).unwrap().scalar().unwrap();
        assert!((loss - (-3.0 * 2f64.ln())).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn koleo_duplicates_hit_the_guard() {
        let z = Tensor::from_vec(&[2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let loss = koleo_loss(&z).unwrap().scalar().unwrap();
        assert!(loss.is_finite());
        // the row normalizer's own epsilon perturbs the zero distance a
        // little, so compare with slack
        assert!((loss - (-2.0 * KOLEO_EPS.ln())).abs() < 1e-2, "{loss}");
        assert!(matches!(
            koleo_loss(&Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap_err(),
            ObjectiveError::TooFew { .. }
        ));
    }

    #[test]
    fn koleo_gradients_check_out_on_distinct_rows() {
        // well-separated rows keep the argmin stable under perturbation
        let z = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.1, 0.0, -0.2, 1.0, 0.3, 0.1, -0.4, 1.0],
        )
        .unwrap()
        .tracked();
        let report = grad_check(
            |inp| {
                koleo_loss(&inp[0]).map_err(|e| TensorError::Domain {
                    op: "koleo_loss",
                    detail: e.to_string(),
                })
            },
            &[z],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn kde_orthogonal_and_duplicate_oracles() {
        let z = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = kde_loss(&z, 5.0).unwrap().scalar().unwrap();
        assert!(loss.abs() < 1e-9, "{loss}");

        let z = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = kde_loss(&z, 5.0).unwrap().scalar().unwrap();
        assert!((loss - 10.0).abs() < 1e-9, "{loss}");

        assert!(kde_loss(&z, 0.0).is_err());
        assert!(kde_loss(&Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap(), 5.0).is_err());
    }

    #[test]
    fn kde_matches_brute_force_double_loop() {
        let z = randn(&[4, 6], 30);
        let kappa = 3.0;
        let loss = kde_loss(&z, kappa).unwrap().scalar().unwrap();

        let d = z.data();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let row = &d[i * 6..(i + 1) * 6];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / n).collect()
            })
            .collect();
        let mut total = 0.0;
        for i in 0..4 {
            let mut inner = 0.0;
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                inner += (kappa * dot).exp();
            }
            total += inner.ln();
        }
        assert!((loss - total).abs() < 1e-6, "{loss} vs {total}");
    }

    #[test]
    fn kde_is_invariant_to_permutation_and_rotation() {
        let z = randn(&[5, 4], 31);
        let base = kde_loss(&z, 5.0).unwrap().scalar().unwrap();

        let d = z.data();
        let perm_order = [3usize, 0, 4, 1, 2];
        let mut permuted = vec![0.0; 20];
        for (dst, &src) in perm_order.iter().enumerate() {
            permuted[dst * 4..dst * 4 + 4].copy_from_slice(&d[src * 4..src * 4 + 4]);
        }
        let zp = Tensor::from_vec(&[5, 4], permuted).unwrap();
        let p = kde_loss(&zp, 5.0).unwrap().scalar().unwrap();
        assert!((base - p).abs() < 1e-9);

        // rotation built from Givens factors is orthogonal
        let mut rot = vec![0.0; 16];
        for i in 0..4 {
            rot[i * 4 + i] = 1.0;
        }
        let mut rng = substream(32, "givens");
        for a in 0..4 {
            for b in (a + 1)..4 {
                let th: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
                let (s, c) = th.sin_cos();
                for r in 0..4 {
                    let (x, y) = (rot[r * 4 + a], rot[r * 4 + b]);
                    rot[r * 4 + a] = c * x - s * y;
                    rot[r * 4 + b] = s * x + c * y;
                }
            }
        }
        let r = Tensor::from_vec(&[4, 4], rot).unwrap();
        let zr = z.matmul(&r).unwrap();
        let rotated = kde_loss(&zr, 5.0).unwrap().scalar().unwrap();
        assert!((base - rotated).abs() < 1e-7, "{base} vs {rotated}");
    }

    #[test]
    fn kde_gradients_check_out() {
        let z = randn(&[4, 3], 33).tracked();
        let report = grad_check(
            |inp| {
                kde_loss(&inp[0], 5.0).map_err(|e| TensorError::Domain {
                    op: "kde_loss",
                    detail: e.to_string(),
                })
            },
            &[z],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn center_update_oracles() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
        let c0 = vec![10.0, 10.0, 10.0];
        let c1 = center_update(&c0, &logits, 0.0).unwrap();
        assert_eq!(c1, vec![2.0, 2.0, 2.0]);

        // fixed point when the batch mean equals the center
        let fixed = center_update(&[2.0, 2.0, 2.0], &logits, 0.9).unwrap();
        for v in &fixed {
            assert!((v - 2.0).abs() < 1e-12);
        }

        // two sequential updates match the closed-form geometric blend
        let lam = 0.9;
        let b1 = randn(&[4, 3], 34);
        let b2 = randn(&[4, 3], 35);
        let step1 = center_update(&c0, &b1, lam).unwrap();
        let step2 = center_update(&step1, &b2, lam).unwrap();
        let mean_of = |t: &Tensor| -> Vec<f64> {
            let d = t.data();
            (0..3)
                .map(|j| (0..4).map(|r| d[r * 3 + j]).sum::<f64>() / 4.0)
                .collect()
        };
        let (m1, m2) = (mean_of(&b1), mean_of(&b2));
        for j in 0..3 {
            let want = lam * lam * c0[j] + lam * (1.0 - lam) * m1[j] + (1.0 - lam) * m2[j];
            assert!((step2[j] - want).abs() < 1e-12);
        }

        assert!(center_update(&c0, &logits, 1.0).is_err());
        assert!(center_update(&[0.0; 2], &logits, 0.5).is_err());
    }

    #[test]
    fn preset_weights_validate() {
        let w = LossWeights::lemon_dinov2();
        w.validate().unwrap();
        assert_eq!(w.ibot_weight, 1.0);
        assert_eq!(w.reg_weight, 0.05);
        assert_eq!(w.kde_kappa, 5.0);
        assert_eq!(w.regularizer, Regularizer::Kde);

        let bad = LossWeights { reg_weight: -0.1, ..LossWeights::lemon_dinov2() };
        assert!(bad.validate().is_err());
        let bad = LossWeights { kde_kappa: 0.0, ..LossWeights::lemon_dinov2() };
        assert!(bad.validate().is_err());
        assert!((INFO_NCE_TAU - 0.2).abs() < 1e-12);

        let p = DistillParams::with_defaults(4096);
        p.validate().unwrap();
        assert_eq!(p.prototypes(), 4096);
        let bad = DistillParams { tau_t: 0.2, ..DistillParams::with_defaults(8) };
        assert!(bad.validate().is_err());
    }
}
