//! Stain color math in optical-density space.
//!
//! Absorbance follows Beer-Lambert: a pixel's OD is a non-negative linear
//! mix of per-stain unit vectors. `estimate_stain_basis` recovers the two
//! dominant stain directions of an H&E image by plane-fitting the OD cloud
//! and taking extreme angular directions (Macenko's method);
//! `normalize_to_reference` re-renders an image through a reference basis
//! after per-stain concentration rescaling.

pub mod gmm;

pub use gmm::{gmm_fit, gmm_sample_augment, shift_to_stats, stain_stats, StainStatsModel};

use nalgebra::{Matrix2, Matrix3, Matrix3x2, SymmetricEigen, Vector2, Vector3};
use thiserror::Error;

use crate::pixels::{PixelError, RgbPatch};
use crate::util::percentile_sorted;

#[derive(Debug, Error)]
pub enum StainError {
    #[error("not enough stained pixels: found {found}, need at least {need}")]
    InsufficientTissue { found: usize, need: usize },
    #[error("optical-density cloud is effectively rank-1; cannot separate two stains")]
    DegenerateStains,
    #[error("stain basis text: {0}")]
    Parse(String),
    #[error("mixture fit did not converge after {iters} iterations (final log-likelihood {loglik:.6})")]
    EmDidNotConverge { iters: usize, loglik: f64 },
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Pixel(#[from] PixelError),
}

pub type Result<T> = std::result::Result<T, StainError>;

/// Minimum count of above-threshold pixels for a basis estimate.
pub const MIN_STAINED_PIXELS: usize = 200;
/// OD magnitude below which a pixel counts as background.
pub const DEFAULT_BETA: f64 = 0.15;
/// Percentile for the extreme angular directions.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Pixels with all RGB channels above this are excluded as glass/background.
const LUMINOSITY_CUTOFF: f64 = 0.94;

/// OD for one channel value in [0,1]. The +1/256 offset keeps OD finite at
/// zero intensity and makes the transform a bijection on the 8-bit grid.
#[inline]
pub fn od_from_rgb(v: f64) -> f64 {
    -((255.0 * v + 1.0) / 256.0).log10()
}

#[inline]
pub fn rgb_from_od(od: f64) -> f64 {
    (256.0 * 10f64.powf(-od) - 1.0) / 255.0
}

/// Per-pixel OD values, same layout as the image data (RGB interleaved).
pub fn od_image(img: &RgbPatch) -> Vec<f64> {
    img.data().iter().map(|&v| od_from_rgb(v)).collect()
}

/// Rebuild an RGB image from OD values, clamped to [0,1].
pub fn image_from_od(od: &[f64], width: usize, height: usize) -> Result<RgbPatch> {
    let mut img = RgbPatch::from_data(width, height, od.iter().map(|&v| rgb_from_od(v)).collect())?;
    img.clamp_unit();
    Ok(img)
}

/// Two unit-norm stain vectors in OD space (columns: H then E) plus the
/// 99th-percentile concentration of each stain in the image it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct StainBasis {
    m: [[f64; 2]; 3], // rows R, G, B; columns H, E
    c99: [f64; 2],
}

impl StainBasis {
    /// Construct from column vectors; columns are normalized to unit length.
    pub fn new(h: [f64; 3], e: [f64; 3], c99: [f64; 2]) -> Result<Self> {
        let nh = norm3(&h);
        let ne = norm3(&e);
        if nh == 0.0 || ne == 0.0 {
            return Err(StainError::InvalidInput("zero-length stain vector".into()));
        }
        if c99.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(StainError::InvalidInput(format!(
                "c99 must be positive and finite, got {c99:?}"
            )));
        }
        let mut m = [[0.0; 2]; 3];
        for r in 0..3 {
            m[r][0] = h[r] / nh;
            m[r][1] = e[r] / ne;
        }
        Ok(StainBasis { m, c99 })
    }

    pub fn matrix(&self) -> &[[f64; 2]; 3] {
        &self.m
    }

    pub fn column(&self, j: usize) -> [f64; 3] {
        [self.m[0][j], self.m[1][j], self.m[2][j]]
    }

    pub fn c99(&self) -> [f64; 2] {
        self.c99
    }

    /// Labeled ASCII block: 6 matrix entries row-major, then the two c99s.
    pub fn to_text_block(&self) -> String {
        let mut s = String::from("stain_basis v1\n");
        for r in 0..3 {
            s.push_str(&format!("{:.17e} {:.17e}\n", self.m[r][0], self.m[r][1]));
        }
        s.push_str(&format!("{:.17e} {:.17e}\n", self.c99[0], self.c99[1]));
        s
    }

    pub fn from_text_block(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| StainError::Parse("empty text block".into()))?;
        if header.trim() != "stain_basis v1" {
            return Err(StainError::Parse(format!(
                "unexpected header `{}`",
                header.trim()
            )));
        }
        let mut vals = Vec::with_capacity(8);
        for line in lines {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| StainError::Parse(format!("bad float `{tok}`")))?;
                vals.push(v);
            }
        }
        if vals.len() != 8 {
            return Err(StainError::Parse(format!(
                "expected 8 floats, found {}",
                vals.len()
            )));
        }
        // Values are stored verbatim so a parse of to_text_block output is
        // bit-identical; columns must already be unit length.
        let m = [
            [vals[0], vals[1]],
            [vals[2], vals[3]],
            [vals[4], vals[5]],
        ];
        for j in 0..2 {
            let col = [m[0][j], m[1][j], m[2][j]];
            if (norm3(&col) - 1.0).abs() > 1e-5 {
                return Err(StainError::Parse(format!(
                    "column {j} is not unit length (norm {})",
                    norm3(&col)
                )));
            }
        }
        let c99 = [vals[6], vals[7]];
        if c99.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(StainError::Parse(format!("bad c99 values {c99:?}")));
        }
        Ok(StainBasis { m, c99 })
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Indices of pixels that look like stained tissue: not near-white in RGB
/// and above the OD magnitude threshold.
fn tissue_pixels(img: &RgbPatch, od: &[f64], beta: f64) -> Vec<usize> {
    let mut idx = Vec::new();
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        if px.iter().all(|&v| v > LUMINOSITY_CUTOFF) {
            continue;
        }
        let o = &od[i * 3..i * 3 + 3];
        if (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt() > beta {
            idx.push(i);
        }
    }
    idx
}

/// Macenko stain estimation with default thresholds (β=0.15, α=1).
pub fn estimate_stain_basis(img: &RgbPatch) -> Result<StainBasis> {
    estimate_stain_basis_with(img, DEFAULT_BETA, DEFAULT_ALPHA)
}

pub fn estimate_stain_basis_with(img: &RgbPatch, beta: f64, alpha: f64) -> Result<StainBasis> {
    if !(0.0..50.0).contains(&alpha) {
        return Err(StainError::InvalidInput(format!(
            "alpha percentile {alpha} outside [0, 50)"
        )));
    }
    let od = od_image(img);
    let tissue = tissue_pixels(img, &od, beta);
    if tissue.len() < MIN_STAINED_PIXELS {
        return Err(StainError::InsufficientTissue {
            found: tissue.len(),
            need: MIN_STAINED_PIXELS,
        });
    }

    // Plane of maximal variance through the OD cloud.
    let n = tissue.len() as f64;
    let mut mean = Vector3::zeros();
    for &i in &tissue {
        mean += Vector3::new(od[i * 3], od[i * 3 + 1], od[i * 3 + 2]);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for &i in &tissue {
        let d = Vector3::new(od[i * 3], od[i * 3 + 1], od[i * 3 + 2]) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 / l1 < 1e-6 {
        return Err(StainError::DegenerateStains);
    }
    let mut e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    // Orient the first plane axis toward the cloud so angles stay in
    // (-90°, 90°) for non-negative OD mixtures.
    if e1.dot(&mean) < 0.0 {
        e1 = -e1;
    }

    // Extreme directions at the alpha / (100-alpha) angle percentiles.
    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|&i| {
            let p = Vector3::new(od[i * 3], od[i * 3 + 1], od[i * 3 + 2]);
            p.dot(&e2).atan2(p.dot(&e1))
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&angles, alpha);
    let hi = percentile_sorted(&angles, 100.0 - alpha);
    let dir = |phi: f64| -> [f64; 3] {
        let v = e1 * phi.cos() + e2 * phi.sin();
        let v = if v.sum() < 0.0 { -v } else { v };
        // Stain vectors are physically non-negative; clamp estimation noise.
        [v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)]
    };
    let (va, vb) = (dir(lo), dir(hi));
    if norm3(&va) == 0.0 || norm3(&vb) == 0.0 {
        return Err(StainError::DegenerateStains);
    }

    // Hematoxylin absorbs red/green and appears blue: larger blue OD.
    let (h, e) = if va[2] / norm3(&va) >= vb[2] / norm3(&vb) {
        (va, vb)
    } else {
        (vb, va)
    };
    let mut basis = StainBasis::new(h, e, [1.0, 1.0])?;
    let conc = concentrations(img, &basis);
    basis.c99 = [c99_of(&conc.h), c99_of(&conc.e)];
    if basis.c99.iter().any(|&c| !(c > 0.0)) {
        return Err(StainError::DegenerateStains);
    }
    Ok(basis)
}

fn c99_of(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, 99.0)
}

/// Per-pixel stain concentrations (clamped non-negative least squares via
/// the pseudo-inverse), one value per stain per pixel.
#[derive(Debug, Clone)]
pub struct Concentrations {
    pub h: Vec<f64>,
    pub e: Vec<f64>,
}

pub fn concentrations(img: &RgbPatch, basis: &StainBasis) -> Concentrations {
    let od = od_image(img);
    let m = Matrix3x2::from_fn(|r, c| basis.m[r][c]);
    let mtm: Matrix2<f64> = m.transpose() * m;
    // Columns are unit and non-collinear (enforced at estimation), so the
    // normal matrix is invertible.
    let pinv = mtm.try_inverse().expect("non-degenerate basis") * m.transpose();
    let n = od.len() / 3;
    let mut h = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for i in 0..n {
        let p = Vector3::new(od[i * 3], od[i * 3 + 1], od[i * 3 + 2]);
        let c: Vector2<f64> = pinv * p;
        h.push(c[0].max(0.0));
        e.push(c[1].max(0.0));
    }
    Concentrations { h, e }
}

/// Re-render `img` through `reference`: source concentrations are scaled
/// per stain by the ratio of reference to source c99 and pushed through the
/// reference stain matrix.
pub fn normalize_to_reference(img: &RgbPatch, reference: &StainBasis) -> Result<RgbPatch> {
    let src = estimate_stain_basis(img)?;
    let conc = concentrations(img, &src);
    let scale = [
        reference.c99[0] / src.c99[0],
        reference.c99[1] / src.c99[1],
    ];
    let mut od = vec![0.0; img.data().len()];
    for i in 0..conc.h.len() {
        let ch = conc.h[i] * scale[0];
        let ce = conc.e[i] * scale[1];
        for r in 0..3 {
            od[i * 3 + r] = reference.m[r][0] * ch + reference.m[r][1] * ce;
        }
    }
    image_from_od(&od, img.width(), img.height())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Realistic H&E OD directions (unnormalized).
    pub(super) fn reference_he() -> ([f64; 3], [f64; 3]) {
        ([0.65, 0.70, 0.29], [0.07, 0.99, 0.11])
    }

    /// Synthesize an image whose OD values are exact mixtures of a basis.
    pub(super) fn render_from_basis(
        h: [f64; 3],
        e: [f64; 3],
        conc: &[(f64, f64)],
        width: usize,
    ) -> RgbPatch {
        let nh = norm3(&h);
        let ne = norm3(&e);
        let height = conc.len() / width;
        let mut od = Vec::with_capacity(conc.len() * 3);
        for &(ch, ce) in conc {
            for r in 0..3 {
                od.push(h[r] / nh * ch + e[r] / ne * ce);
            }
        }
        image_from_od(&od, width, height).unwrap()
    }

    /// Concentration field covering both stain axes. 2.5% of pixels sit
    /// exactly on each pure stain so the percentile directions land on the
    /// true vectors and every pixel stays inside the recovered cone.
    pub(super) fn spread_concentrations(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = crate::rng::substream(seed, "stain-test");
        (0..n)
            .map(|i| {
                let mag: f64 = 0.3 + 1.2 * rng.gen::<f64>();
                let t: f64 = match i % 40 {
                    0 => 0.0,
                    1 => 1.0,
                    _ => 0.05 + 0.9 * rng.gen::<f64>(), // mixing angle parameter
                };
                let (s, c) = (t * std::f64::consts::FRAC_PI_2).sin_cos();
                (mag * c, mag * s)
            })
            .collect()
    }

    #[test]
    fn od_boundaries() {
        assert!(od_from_rgb(1.0).abs() < 1e-12);
        assert!((od_from_rgb(0.0) - 256f64.log10()).abs() < 1e-12);
        assert!(od_from_rgb(0.0) > 2.4 && od_from_rgb(0.0) < 2.41);
    }

    #[test]
    fn od_is_a_bijection_on_the_8bit_grid() {
        for level in 0..=255u32 {
            let v = level as f64 / 255.0;
            let round = rgb_from_od(od_from_rgb(v));
            assert!((round - v).abs() < 1e-12, "level {level}");
        }
    }

    #[test]
    fn od_round_trip_through_images() {
        let mut img = RgbPatch::new(16, 16).unwrap();
        let mut rng = crate::rng::substream(3, "odrt");
        for y in 0..16 {
            for x in 0..16 {
                img.set(x, y, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
        let od = od_image(&img);
        let back = image_from_od(&od, 16, 16).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blank_image_has_insufficient_tissue() {
        let img = RgbPatch::filled(32, 32, [1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            estimate_stain_basis(&img).unwrap_err(),
            StainError::InsufficientTissue { .. }
        ));
    }

    #[test]
    fn single_stain_is_degenerate() {
        let (h, _) = reference_he();
        let mut rng = crate::rng::substream(5, "rank1");
        let conc: Vec<(f64, f64)> = (0..1024)
            .map(|_| (0.3 + rng.gen::<f64>(), 0.0))
            .collect();
        let img = render_from_basis(h, [0.07, 0.99, 0.11], &conc, 32);
        assert!(matches!(
            estimate_stain_basis(&img).unwrap_err(),
            StainError::DegenerateStains
        ));
    }

    #[test]
    fn construct_then_recover_matches_basis() {
        let (h, e) = reference_he();
        let conc = spread_concentrations(4096, 11);
        let img = render_from_basis(h, e, &conc, 64);
        let basis = estimate_stain_basis(&img).unwrap();

        let cos = |a: [f64; 3], b: [f64; 3]| {
            (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (norm3(&a) * norm3(&b))
        };
        assert!(cos(basis.column(0), h) > 0.999, "H cosine {}", cos(basis.column(0), h));
        assert!(cos(basis.column(1), e) > 0.999, "E cosine {}", cos(basis.column(1), e));
        for j in 0..2 {
            let c = basis.column(j);
            assert!((norm3(&c) - 1.0).abs() < 1e-6);
            assert!(c.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn concentration_reconstruction_is_exact_on_forward_model() {
        let (h, e) = reference_he();
        let conc = spread_concentrations(1024, 13);
        let img = render_from_basis(h, e, &conc, 32);
        let basis = StainBasis::new(h, e, [1.0, 1.0]).unwrap();
        let rec = concentrations(&img, &basis);
        for (i, &(ch, ce)) in conc.iter().enumerate() {
            assert!((rec.h[i] - ch).abs() < 1e-4, "pixel {i}: {} vs {ch}", rec.h[i]);
            assert!((rec.e[i] - ce).abs() < 1e-4);
        }
    }

    #[test]
    fn concentrations_of_white_are_zero() {
        let img = RgbPatch::filled(8, 8, [1.0, 1.0, 1.0]).unwrap();
        let (h, e) = reference_he();
        let basis = StainBasis::new(h, e, [1.0, 1.0]).unwrap();
        let rec = concentrations(&img, &basis);
        assert!(rec.h.iter().chain(&rec.e).all(|&c| c.abs() < 1e-9));
    }

    #[test]
    fn concentrations_scale_linearly() {
        let (h, e) = reference_he();
        let conc: Vec<(f64, f64)> = spread_concentrations(256, 17)
            .into_iter()
            .map(|(a, b)| (0.4 * a, 0.4 * b))
            .collect();
        let doubled: Vec<(f64, f64)> = conc.iter().map(|&(a, b)| (2.0 * a, 2.0 * b)).collect();
        let basis = StainBasis::new(h, e, [1.0, 1.0]).unwrap();
        let r1 = concentrations(&render_from_basis(h, e, &conc, 16), &basis);
        let r2 = concentrations(&render_from_basis(h, e, &doubled, 16), &basis);
        for i in 0..r1.h.len() {
            if r1.h[i] > 0.05 {
                assert!((r2.h[i] / r1.h[i] - 2.0).abs() < 1e-3);
            }
            if r1.e[i] > 0.05 {
                assert!((r2.e[i] / r1.e[i] - 2.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn self_normalization_is_near_identity() {
        let (h, e) = reference_he();
        let conc = spread_concentrations(4096, 19);
        let img = render_from_basis(h, e, &conc, 64);
        let own = estimate_stain_basis(&img).unwrap();
        let normed = normalize_to_reference(&img, &own).unwrap();
        let tol = 2.0 / 255.0;
        for (a, b) in img.data().iter().zip(normed.data()) {
            assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let (h, e) = reference_he();
        let img = render_from_basis(h, e, &spread_concentrations(4096, 23), 64);
        let ref_basis = StainBasis::new(
            [0.55, 0.75, 0.35],
            [0.15, 0.90, 0.20],
            [1.2, 0.9],
        )
        .unwrap();
        let once = normalize_to_reference(&img, &ref_basis).unwrap();
        let twice = normalize_to_reference(&once, &ref_basis).unwrap();
        let tol = 2.0 / 255.0;
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= tol);
        }
    }

    #[test]
    fn common_concentrations_align_after_normalization() {
        let (h1, e1) = reference_he();
        let (h2, e2) = ([0.55, 0.72, 0.42], [0.10, 0.95, 0.05]);
        let conc = spread_concentrations(4096, 29);
        let img1 = render_from_basis(h1, e1, &conc, 64);
        let img2 = render_from_basis(h2, e2, &conc, 64);
        let target = StainBasis::new([0.60, 0.70, 0.38], [0.09, 0.97, 0.12], [1.0, 1.0]).unwrap();
        let n1 = normalize_to_reference(&img1, &target).unwrap();
        let n2 = normalize_to_reference(&img2, &target).unwrap();
        let tol = 2.0 / 255.0;
        for (a, b) in n1.data().iter().zip(n2.data()) {
            assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
    }

    #[test]
    fn text_block_round_trip() {
        let (h, e) = reference_he();
        let basis = StainBasis::new(h, e, [1.8423, 1.0524]).unwrap();
        let text = basis.to_text_block();
        let parsed = StainBasis::from_text_block(&text).unwrap();
        assert_eq!(basis, parsed);
    }

    #[test]
    fn text_block_rejects_malformed_input() {
        assert!(StainBasis::from_text_block("").is_err());
        assert!(StainBasis::from_text_block("wrong header\n1 2 3").is_err());
        assert!(StainBasis::from_text_block("stain_basis v1\n1 2 3").is_err());
        assert!(StainBasis::from_text_block("stain_basis v1\n1 2\n3 4\n5 6\n7 oops").is_err());
    }
}
