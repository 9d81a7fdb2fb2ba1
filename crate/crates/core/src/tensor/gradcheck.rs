//! Numerical verification of reverse-mode gradients by central differences.
//!
//! The finite-difference quotient divides by the actually representable step
//! `fl(x+eps) - fl(x-eps)` rather than `2*eps`, which keeps the comparison
//! meaningful when `x + eps` rounds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

/// Outcome of a gradient check over one or more inputs.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all checked elements.
    pub max_rel_err: f64,
    /// Number of elements compared.
    pub checked: usize,
    /// The element realizing `max_rel_err`, if any element was checked.
    pub worst: Option<WorstElement>,
}

#[derive(Debug, Clone)]
pub struct WorstElement {
    /// Position of the input tensor in the `inputs` slice.
    pub input: usize,
    /// Flat element index within that tensor.
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients of `f` against central differences at every
/// element of every input. Inputs must be tracked leaves and `f` must reduce
/// them to a finite scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_at(&f, inputs, eps, &all)
}

/// Like [`grad_check`] but compares at most `max_per_tensor` randomly chosen
/// elements per input. Selection is deterministic in `seed`.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let n = t.numel();
            if n <= max_per_tensor {
                return (0..n).collect();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let mut idx: Vec<usize> = (0..n).collect();
            let (chosen, _) = idx.partial_shuffle(&mut rng, max_per_tensor);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    grad_check_at(&f, inputs, eps, &picks)
}

fn grad_check_at<F>(
    f: &F,
    inputs: &[Tensor],
    eps: f64,
    indices: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(TensorError::GradCheck(format!(
            "step size {eps} outside supported range [1e-5, 1e-2]"
        )));
    }
    let base = f(inputs)?.scalar()?;
    if !base.is_finite() {
        return Err(TensorError::GradCheck(format!(
            "function value {base} is not finite at the base point"
        )));
    }
    let grads = f(inputs)?.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| grads.wrt_or_zero(t)).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        for &ei in &indices[ti] {
            let x = tensor.data()[ei];
            let a = x + eps;
            let b = x - eps;
            if a == b {
                return Err(TensorError::GradCheck(format!(
                    "step underflow at input {ti} element {ei} (x = {x})"
                )));
            }
            let fa = eval_perturbed(f, &mut work, tensor, ti, ei, a)?;
            let fb = eval_perturbed(f, &mut work, tensor, ti, ei, b)?;
            if !fa.is_finite() || !fb.is_finite() {
                return Err(TensorError::GradCheck(format!(
                    "function value not finite near input {ti} element {ei}"
                )));
            }
            let numeric = (fa - fb) / (a - b);
            let g = analytic[ti][ei];
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstElement {
                    input: ti,
                    element: ei,
                    analytic: g,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn eval_perturbed<F>(
    f: &F,
    work: &mut [Tensor],
    original: &Tensor,
    ti: usize,
    ei: usize,
    value: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut data = original.data().to_vec();
    data[ei] = value;
    work[ti] = Tensor::from_vec(original.shape(), data)?.tracked();
    let out = f(work)?.scalar();
    work[ti] = original.clone();
    out
}
