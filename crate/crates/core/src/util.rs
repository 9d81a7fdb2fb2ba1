//! Small numeric helpers shared across modules.

/// Linear-interpolation percentile of an ascending-sorted slice, `q` in
/// [0, 100]. Matches the "linear" convention: index q/100·(n−1).
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=100.0).contains(&q));
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divide by n).
pub(crate) fn std_pop(xs: &[f64], mean: f64) -> f64 {
    (xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
}
