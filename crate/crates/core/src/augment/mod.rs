//! Seedable image augmentation driven by named policies.
//!
//! A policy is an ordered list of transform specs; applying one to a source
//! patch is a pure function of (policy, patch, seed). Every transform draws
//! from its own RNG substream keyed by position and kind, so inserting or
//! removing a transform does not silently reshuffle the randomness of the
//! others.
//!
//! The rotation crop expects an oversized source (60 px for a 40 px output,
//! and never less than ceil(out·√2)) so the rotated central window needs no
//! fill pixels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pixels::{PixelError, RgbPatch};
use crate::rng::{stream_seed, substream};
use crate::stain::{shift_to_stats, StainError, StainStatsModel};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("rotation source is {width}x{height}; need at least {min}x{min} for a {out} output")]
    SourceTooSmall {
        width: usize,
        height: usize,
        min: usize,
        out: usize,
    },
    #[error("policy config: {0}")]
    Config(String),
    #[error("policy `{0}` uses a stain mixture transform but no stain model was provided")]
    MissingStainModel(String),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    Pixel(#[from] PixelError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// One step of an augmentation pipeline. Probabilities gate whole
/// transforms; scale/ratio pairs are inclusive ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    /// Rotate by an angle uniform in [0, degrees), then take the central
    /// out_size crop. Padding-free by construction.
    RotateCrop { degrees: f64, out_size: usize },
    /// Crop a random area fraction at a random aspect (w/h), resize to
    /// out_size.
    RandomResizedCrop {
        scale: (f64, f64),
        ratio: (f64, f64),
        out_size: usize,
    },
    HorizontalFlip { p: f64 },
    /// Re-stain by sampling target statistics from a fitted mixture model.
    StainGmm { components: usize },
    /// Multiplicative brightness/contrast/saturation in
    /// [max(0,1−f), 1+f], additive hue in [−f, f] turns; sub-ops applied
    /// in random order.
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
        p: f64,
    },
    Grayscale { p: f64 },
    /// Blank a rectangle whose area fraction and h/w aspect stay inside
    /// the given ranges even after rounding to whole pixels.
    RandomErasing {
        p: f64,
        scale: (f64, f64),
        ratio: (f64, f64),
        fill: [f64; 3],
    },
    GaussianBlur { sigma: (f64, f64), p: f64 },
}

impl TransformSpec {
    fn label(&self) -> &'static str {
        match self {
            TransformSpec::RotateCrop { .. } => "rotate_crop",
            TransformSpec::RandomResizedCrop { .. } => "random_resized_crop",
            TransformSpec::HorizontalFlip { .. } => "horizontal_flip",
            TransformSpec::StainGmm { .. } => "stain_gmm",
            TransformSpec::ColorJitter { .. } => "color_jitter",
            TransformSpec::Grayscale { .. } => "grayscale",
            TransformSpec::RandomErasing { .. } => "random_erasing",
            TransformSpec::GaussianBlur { .. } => "gaussian_blur",
        }
    }

    fn validate(&self, i: usize) -> Result<()> {
        let bad = |msg: String| Err(AugmentError::Config(format!("transform {i}: {msg}")));
        let check_p = |p: f64, msg: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{msg} probability {p} outside [0, 1]"));
            }
            Ok(())
        };
        let check_range = |r: (f64, f64), msg: &str| -> Result<()> {
            if !(r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite()) {
                return bad(format!("{msg} range {r:?} is not a positive ascending pair"));
            }
            Ok(())
        };
        match *self {
            TransformSpec::RotateCrop { degrees, out_size } => {
                if !(0.0..=360.0).contains(&degrees) {
                    return bad(format!("rotation degrees {degrees} outside [0, 360]"));
                }
                if out_size == 0 {
                    return bad("rotation output size is zero".into());
                }
            }
            TransformSpec::RandomResizedCrop { scale, ratio, out_size } => {
                check_range(scale, "crop scale")?;
                check_range(ratio, "crop aspect")?;
                if out_size == 0 {
                    return bad("crop output size is zero".into());
                }
            }
            TransformSpec::HorizontalFlip { p } => check_p(p, "flip")?,
            TransformSpec::StainGmm { components } => {
                if components == 0 {
                    return bad("stain mixture needs at least one component".into());
                }
            }
            TransformSpec::ColorJitter { brightness, contrast, saturation, hue, p } => {
                check_p(p, "jitter")?;
                for (f, name) in [
                    (brightness, "brightness"),
                    (contrast, "contrast"),
                    (saturation, "saturation"),
                ] {
                    if !(f >= 0.0 && f.is_finite()) {
                        return bad(format!("{name} factor {f} is negative or non-finite"));
                    }
                }
                if !(0.0..=0.5).contains(&hue) {
                    return bad(format!("hue shift {hue} outside [0, 0.5] turns"));
                }
            }
            TransformSpec::Grayscale { p } => check_p(p, "grayscale")?,
            TransformSpec::RandomErasing { p, scale, ratio, fill } => {
                check_p(p, "erasing")?;
                check_range(scale, "erasing area")?;
                check_range(ratio, "erasing aspect")?;
                if scale.1 > 1.0 {
                    return bad(format!("erasing area fraction {} exceeds 1", scale.1));
                }
                if fill.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return bad(format!("erasing fill {fill:?} outside [0, 1]"));
                }
            }
            TransformSpec::GaussianBlur { sigma, p } => {
                check_p(p, "blur")?;
                check_range(sigma, "blur sigma")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub name: String,
    pub transforms: Vec<TransformSpec>,
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.transforms.iter().enumerate() {
            t.validate(i)?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<AugPolicy> {
        let policy: AugPolicy =
            toml::from_str(text).map_err(|e| AugmentError::Config(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }

    /// True if any transform needs a fitted stain model at apply time.
    pub fn needs_stain_model(&self) -> bool {
        self.transforms
            .iter()
            .any(|t| matches!(t, TransformSpec::StainGmm { .. }))
    }
}

/// Everything an application needs beyond the policy itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct AugContext<'a> {
    pub stain_model: Option<&'a StainStatsModel>,
}

/// The five built-in policies. Erasing fill defaults to mid-gray; override
/// through a policy file to use a dataset mean.
pub fn preset(name: &str) -> Result<AugPolicy> {
    const JITTER_P: f64 = 0.8;
    const GRAY_P: f64 = 0.2;
    let rrc = |scale: (f64, f64)| TransformSpec::RandomResizedCrop {
        scale,
        ratio: (0.75, 4.0 / 3.0),
        out_size: 40,
    };
    let jitter = |b: f64, c: f64, s: f64, h: f64| TransformSpec::ColorJitter {
        brightness: b,
        contrast: c,
        saturation: s,
        hue: h,
        p: JITTER_P,
    };
    let blur = TransformSpec::GaussianBlur {
        sigma: (0.1, 2.0),
        p: 1.0,
    };
    let a1 = |extra: Option<TransformSpec>| {
        let mut transforms = vec![
            TransformSpec::RotateCrop {
                degrees: 360.0,
                out_size: 40,
            },
            rrc((0.32, 1.0)),
            TransformSpec::HorizontalFlip { p: 0.5 },
        ];
        transforms.extend(extra);
        transforms.extend([
            jitter(0.6, 0.7, 0.5, 0.2),
            TransformSpec::Grayscale { p: GRAY_P },
            TransformSpec::RandomErasing {
                p: 0.3,
                scale: (0.1, 0.3),
                ratio: (0.8, 1.2),
                fill: [0.5; 3],
            },
            blur.clone(),
        ]);
        transforms
    };
    let transforms = match name {
        "a0" => vec![
            rrc((0.08, 1.0)),
            TransformSpec::HorizontalFlip { p: 0.5 },
            jitter(0.4, 0.4, 0.2, 0.1),
            TransformSpec::Grayscale { p: GRAY_P },
            blur,
        ],
        "a1" => a1(None),
        // The grayscale delta collapses onto a1's own grayscale step, so
        // the transform list is identical; only the name differs.
        "a1+gray" => a1(None),
        "a1+gmm1" => a1(Some(TransformSpec::StainGmm { components: 1 })),
        "a1+gmm10" => a1(Some(TransformSpec::StainGmm { components: 10 })),
        other => {
            return Err(AugmentError::Config(format!(
                "unknown policy `{other}`; expected one of a0, a1, a1+gray, a1+gmm1, a1+gmm10"
            )))
        }
    };
    Ok(AugPolicy {
        name: name.to_string(),
        transforms,
    })
}

/// Rotate about the patch center and take the central `out_size` crop.
/// The source must be large enough that no rotation needs fill pixels.
pub fn rotate_crop(src: &RgbPatch, angle_deg: f64, out_size: usize) -> Result<RgbPatch> {
    let min = (out_size as f64 * std::f64::consts::SQRT_2).ceil() as usize;
    if src.width() < min || src.height() < min {
        return Err(AugmentError::SourceTooSmall {
            width: src.width(),
            height: src.height(),
            min,
            out: out_size,
        });
    }
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (src.width() - 1) as f64 / 2.0;
    let cy = (src.height() - 1) as f64 / 2.0;
    let co = (out_size - 1) as f64 / 2.0;
    let mut out = RgbPatch::new(out_size, out_size)?;
    for y in 0..out_size {
        let v = y as f64 - co;
        for x in 0..out_size {
            let u = x as f64 - co;
            // Inverse rotation of the output offset locates the source
            // sample; the precondition keeps it inside the patch.
            let sx = cx + u * cos - v * sin;
            let sy = cy + u * sin + v * cos;
            out.set(x, y, src.sample_bilinear(sx, sy));
        }
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn random_resized_crop(
    img: &RgbPatch,
    scale: (f64, f64),
    ratio: (f64, f64),
    out_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RgbPatch> {
    let (w, h) = (img.width(), img.height());
    let area = (w * h) as f64;
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = (uniform(rng, ratio.0.ln(), ratio.1.ln())).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let left = rng.gen_range(0..=w - cw);
            let top = rng.gen_range(0..=h - ch);
            return Ok(img.resize_region_bilinear(
                left as f64,
                top as f64,
                cw as f64,
                ch as f64,
                out_size,
                out_size,
            )?);
        }
    }
    // Center fallback at the nearest in-range aspect.
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio.0 {
        (w, ((w as f64 / ratio.0).round() as usize).min(h))
    } else if in_ratio > ratio.1 {
        (((h as f64 * ratio.1).round() as usize).min(w), h)
    } else {
        (w, h)
    };
    let left = (w - cw) / 2;
    let top = (h - ch) / 2;
    Ok(img.resize_region_bilinear(
        left as f64,
        top as f64,
        cw as f64,
        ch as f64,
        out_size,
        out_size,
    )?)
}

fn flip_horizontal(img: &RgbPatch) -> RgbPatch {
    let mut out = RgbPatch::new(img.width(), img.height()).expect("non-empty");
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set(x, y, img.get(img.width() - 1 - x, y));
        }
    }
    out
}

pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    [h, s, v]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn color_jitter(
    img: &mut RgbPatch,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
    rng: &mut ChaCha8Rng,
) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for &op in &order {
        match op {
            0 => {
                let f = uniform(rng, (1.0 - brightness).max(0.0), 1.0 + brightness);
                for v in img.data_mut() {
                    *v = (*v * f).clamp(0.0, 1.0);
                }
            }
            1 => {
                let f = uniform(rng, (1.0 - contrast).max(0.0), 1.0 + contrast);
                let mean = img
                    .data()
                    .chunks_exact(3)
                    .map(|px| luminance([px[0], px[1], px[2]]))
                    .sum::<f64>()
                    / (img.width() * img.height()) as f64;
                for v in img.data_mut() {
                    *v = (*v * f + mean * (1.0 - f)).clamp(0.0, 1.0);
                }
            }
            2 => {
                let f = uniform(rng, (1.0 - saturation).max(0.0), 1.0 + saturation);
                for px in img.data_mut().chunks_exact_mut(3) {
                    let gray = luminance([px[0], px[1], px[2]]);
                    for v in px {
                        *v = (*v * f + gray * (1.0 - f)).clamp(0.0, 1.0);
                    }
                }
            }
            _ => {
                let shift = uniform(rng, -hue, hue);
                for px in img.data_mut().chunks_exact_mut(3) {
                    let mut hsv = rgb_to_hsv([px[0], px[1], px[2]]);
                    hsv[0] = (hsv[0] + shift).rem_euclid(1.0);
                    let rgb = hsv_to_rgb(hsv);
                    px.copy_from_slice(&rgb);
                }
            }
        }
    }
}

fn grayscale(img: &mut RgbPatch) {
    for px in img.data_mut().chunks_exact_mut(3) {
        let gray = luminance([px[0], px[1], px[2]]);
        px.fill(gray);
    }
}

fn random_erasing(
    img: &mut RgbPatch,
    scale: (f64, f64),
    ratio: (f64, f64),
    fill: [f64; 3],
    rng: &mut ChaCha8Rng,
) {
    let (w, h) = (img.width(), img.height());
    let area = (w * h) as f64;
    for _ in 0..50 {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = (uniform(rng, ratio.0.ln(), ratio.1.ln())).exp(); // h/w
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if ew == 0 || eh == 0 || ew > w || eh > h {
            continue;
        }
        // Rounding to whole pixels can push the region outside the spec'd
        // ranges; resample instead of accepting it.
        let frac = (ew * eh) as f64 / area;
        let got_aspect = eh as f64 / ew as f64;
        if !(scale.0..=scale.1).contains(&frac) || !(ratio.0..=ratio.1).contains(&got_aspect) {
            continue;
        }
        let left = rng.gen_range(0..=w - ew);
        let top = rng.gen_range(0..=h - eh);
        for y in top..top + eh {
            for x in left..left + ew {
                img.set(x, y, fill);
            }
        }
        return;
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    // Mirror without repeating the edge sample (-1 maps to 1).
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn gaussian_blur(img: &RgbPatch, sigma: f64) -> RgbPatch {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for j in -radius..=radius {
        kernel.push((-0.5 * (j as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (w, h) = (img.width(), img.height());
    let mut tmp = RgbPatch::new(w, h).expect("non-empty");
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, &k) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + ki as isize - radius, w);
                let px = img.get(sx, y);
                for c in 0..3 {
                    acc[c] += k * px[c];
                }
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = RgbPatch::new(w, h).expect("non-empty");
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, &k) in kernel.iter().enumerate() {
                let sy = reflect_index(y as isize + ki as isize - radius, h);
                let px = tmp.get(x, sy);
                for c in 0..3 {
                    acc[c] += k * px[c];
                }
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Run the policy over a source patch. Pure in (policy, src, seed): each
/// transform draws from `substream(seed, "t{index}/{kind}")`.
pub fn apply_policy(
    policy: &AugPolicy,
    src: &RgbPatch,
    seed: u64,
    ctx: AugContext<'_>,
) -> Result<RgbPatch> {
    policy.validate()?;
    let mut img = src.clone();
    for (i, t) in policy.transforms.iter().enumerate() {
        let mut rng = substream(seed, &format!("t{i}/{}", t.label()));
        match *t {
            TransformSpec::RotateCrop { degrees, out_size } => {
                let angle = degrees * rng.gen::<f64>();
                img = rotate_crop(&img, angle, out_size)?;
            }
            TransformSpec::RandomResizedCrop { scale, ratio, out_size } => {
                img = random_resized_crop(&img, scale, ratio, out_size, &mut rng)?;
            }
            TransformSpec::HorizontalFlip { p } => {
                if rng.gen::<f64>() < p {
                    img = flip_horizontal(&img);
                }
            }
            TransformSpec::StainGmm { components } => {
                let model = ctx
                    .stain_model
                    .ok_or_else(|| AugmentError::MissingStainModel(policy.name.clone()))?;
                if model.components != components {
                    return Err(AugmentError::Config(format!(
                        "policy expects a {components}-component stain model, got {}",
                        model.components
                    )));
                }
                let target = model.sample(&mut rng);
                img = shift_to_stats(&img, &target)?;
            }
            TransformSpec::ColorJitter { brightness, contrast, saturation, hue, p } => {
                if rng.gen::<f64>() < p {
                    color_jitter(&mut img, brightness, contrast, saturation, hue, &mut rng);
                }
            }
            TransformSpec::Grayscale { p } => {
                if rng.gen::<f64>() < p {
                    grayscale(&mut img);
                }
            }
            TransformSpec::RandomErasing { p, scale, ratio, fill } => {
                if rng.gen::<f64>() < p {
                    random_erasing(&mut img, scale, ratio, fill, &mut rng);
                }
            }
            TransformSpec::GaussianBlur { sigma, p } => {
                if rng.gen::<f64>() < p {
                    let s = uniform(&mut rng, sigma.0, sigma.1);
                    img = gaussian_blur(&img, s);
                }
            }
        }
    }
    img.clamp_unit();
    Ok(img)
}

/// Two independently augmented views of the same source.
pub fn two_views(
    policy: &AugPolicy,
    src: &RgbPatch,
    seed: u64,
    ctx: AugContext<'_>,
) -> Result<(RgbPatch, RgbPatch)> {
    let q = apply_policy(policy, src, stream_seed(seed, "view/q"), ctx)?;
    let k = apply_policy(policy, src, stream_seed(seed, "view/k"), ctx)?;
    Ok((q, k))
}
