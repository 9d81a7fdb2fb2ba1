//! Small vision transformer over fixed-size cell patches.
//!
//! The backbone is a standard pre-norm ViT: learned patch embedding, learned
//! 1-D positional embeddings, multi-head self-attention blocks, final layer
//! norm. Pooling is configurable: the class-token output, the mean of all
//! patch tokens, or the mean of a centered g×g block of patch tokens. With
//! center-token pooling the class token row is not part of the forward pass
//! at all, so that pooling is exactly invariant to its parameters.
//!
//! Projection/prediction heads and the optional prototype bank live in the
//! same parameter namespace under `projector.`, `predictor.` and
//! `prototypes` prefixes.

mod flops;
mod serial;

pub use flops::{vit_flops, FlopsBreakdown};
pub use serial::{
    load_encoder, read_checkpoint, save_encoder, write_checkpoint, Block, CheckpointError,
    CheckpointFile,
};
pub(crate) use serial::{blocks_to_params, params_to_blocks};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pixels::RgbPatch;
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("bad encoder input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// How the token sequence is reduced to one embedding per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ClassToken,
    MeanTokens,
    CenterTokens { grid: usize },
}

/// Dimension chains for the projection/prediction heads and the optional
/// prototype bank that maps head outputs to distillation logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Layer widths including input and output, e.g. `[384, 4096, 4096, 256]`.
    pub projector: Vec<usize>,
    /// Predictor widths (contrastive preset), e.g. `[256, 4096, 256]`.
    pub predictor: Option<Vec<usize>>,
    /// Number of prototype vectors (distillation preset logit count).
    pub prototypes: Option<usize>,
}

impl HeadSpec {
    /// MoCo-style heads: 3-layer projector to 256, 2-layer predictor.
    pub fn contrastive(dim: usize) -> Self {
        HeadSpec {
            projector: vec![dim, 4096, 4096, 256],
            predictor: Some(vec![256, 4096, 256]),
            prototypes: None,
        }
    }

    /// Distillation heads: 3-layer projector to 256 plus `k` prototypes.
    pub fn distillation(dim: usize, k: usize) -> Self {
        HeadSpec {
            projector: vec![dim, 4096, 4096, 256],
            predictor: None,
            prototypes: Some(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
    pub head_spec: Option<HeadSpec>,
}

impl VitConfig {
    /// ViT-S/8 for 40×40 inputs: depth 12, width 384, 6 heads, MLP ratio 4.
    pub fn vit_s_8() -> Self {
        VitConfig {
            image_size: 40,
            patch_size: 8,
            dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            pooling: Pooling::ClassToken,
            head_spec: None,
        }
    }

    /// Token grid side length.
    pub fn tokens_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens (excludes the class token).
    pub fn num_patches(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    /// Flattened patch pixel count (patch_size² × 3 channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn uses_class_token(&self) -> bool {
        !matches!(self.pooling, Pooling::CenterTokens { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(EncoderError::InvalidConfig(msg));
        if self.image_size == 0 || self.patch_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!(
                "width {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives no hidden units", self.mlp_ratio));
        }
        if let Pooling::CenterTokens { grid } = self.pooling {
            let side = self.tokens_per_side();
            if grid == 0 || grid > side {
                return fail(format!(
                    "center grid {grid} must be in 1..={side} for a {side}x{side} token grid"
                ));
            }
        }
        if let Some(hs) = &self.head_spec {
            if hs.projector.len() < 2 || hs.projector[0] != self.dim {
                return fail(format!(
                    "projector dims {:?} must start at width {}",
                    hs.projector, self.dim
                ));
            }
            if hs.projector.iter().any(|&d| d == 0) {
                return fail("projector layer widths must be positive".into());
            }
            let out = *hs.projector.last().expect("len checked");
            if let Some(pred) = &hs.predictor {
                if pred.len() < 2 || pred[0] != out || *pred.last().unwrap() != out {
                    return fail(format!(
                        "predictor dims {pred:?} must map projector output {out} to itself"
                    ));
                }
                if pred.iter().any(|&d| d == 0) {
                    return fail("predictor layer widths must be positive".into());
                }
            }
            if hs.prototypes == Some(0) {
                return fail("prototype count must be positive".into());
            }
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in serialization order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let t = self.num_patches();
        let h = self.mlp_hidden();
        let mut specs: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.w".into(), vec![self.patch_dim(), d]),
            ("patch_embed.b".into(), vec![d]),
            ("pos_embed".into(), vec![t + 1, d]),
            ("cls_token".into(), vec![1, d]),
            ("mask_token".into(), vec![1, d]),
        ];
        for i in 0..self.depth {
            let p = format!("block{i}");
            specs.push((format!("{p}.norm1.g"), vec![d]));
            specs.push((format!("{p}.norm1.b"), vec![d]));
            specs.push((format!("{p}.qkv.w"), vec![d, 3 * d]));
            specs.push((format!("{p}.qkv.b"), vec![3 * d]));
            specs.push((format!("{p}.proj.w"), vec![d, d]));
            specs.push((format!("{p}.proj.b"), vec![d]));
            specs.push((format!("{p}.norm2.g"), vec![d]));
            specs.push((format!("{p}.norm2.b"), vec![d]));
            specs.push((format!("{p}.mlp.fc1.w"), vec![d, h]));
            specs.push((format!("{p}.mlp.fc1.b"), vec![h]));
            specs.push((format!("{p}.mlp.fc2.w"), vec![h, d]));
            specs.push((format!("{p}.mlp.fc2.b"), vec![d]));
        }
        specs.push(("norm_f.g".into(), vec![d]));
        specs.push(("norm_f.b".into(), vec![d]));
        if let Some(hs) = &self.head_spec {
            push_mlp_specs(&mut specs, "projector", &hs.projector);
            if let Some(pred) = &hs.predictor {
                push_mlp_specs(&mut specs, "predictor", pred);
            }
            if let Some(k) = hs.prototypes {
                let out = *hs.projector.last().expect("validated");
                specs.push(("prototypes".into(), vec![out, k]));
            }
        }
        specs
    }
}

fn push_mlp_specs(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, dims: &[usize]) {
    for i in 0..dims.len() - 1 {
        specs.push((format!("{prefix}.fc{i}.w"), vec![dims[i], dims[i + 1]]));
        specs.push((format!("{prefix}.fc{i}.b"), vec![dims[i + 1]]));
        if i + 2 < dims.len() {
            specs.push((format!("{prefix}.ln{i}.g"), vec![dims[i + 1]]));
            specs.push((format!("{prefix}.ln{i}.b"), vec![dims[i + 1]]));
        }
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(EncoderError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| EncoderError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuild with a transform applied to every tensor, keeping order.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in &self.entries {
            out.insert(n, f(n, t)).expect("names already unique");
        }
        out
    }

    /// Same data, fresh tracked leaves (for training).
    pub fn tracked(&self) -> ParamSet {
        self.map(|_, t| t.tracked())
    }

    /// Same data, untracked leaves (for inference).
    pub fn detached(&self) -> ParamSet {
        self.map(|_, t| t.detach())
    }

    /// Values rounded to the nearest f32 (tracked leaves). Keeping live
    /// state f32-representable makes the f32 checkpoint format lossless.
    pub fn quantized_f32(&self) -> ParamSet {
        self.map(|_, t| {
            let data: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
            Tensor::from_vec(t.shape(), data).expect("same shape").tracked()
        })
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Deterministic parameter initialization: truncated normal (std 0.02,
/// clipped at 2σ by redraw) for weights and token/position embeddings, ones
/// for norm scales, zeros for biases and norm offsets. Each parameter draws
/// from its own named substream, so values do not depend on insertion order.
pub fn init_params(cfg: &VitConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    for (name, shape) in cfg.param_specs() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".g") {
            vec![1.0; n]
        } else if name.ends_with(".b") {
            vec![0.0; n]
        } else {
            let mut r = rng::substream(seed, &format!("init/{name}"));
            (0..n).map(|_| trunc_normal(&mut r) * 0.02).collect()
        };
        ps.insert(&name, Tensor::from_vec(&shape, data)?.tracked())?;
    }
    Ok(ps)
}

fn trunc_normal(r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    loop {
        let v = rng::normal(r);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}

/// Flatten images into `[n, tokens, patch_dim]` rows, patch-major within
/// each image, `(y, x, channel)` within each patch.
pub fn patchify(images: &[RgbPatch], cfg: &VitConfig) -> Result<Tensor> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(EncoderError::BadInput("empty batch".into()));
    }
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let side = cfg.tokens_per_side();
    let t = cfg.num_patches();
    let pd = cfg.patch_dim();
    let mut data = vec![0.0; images.len() * t * pd];
    for (i, img) in images.iter().enumerate() {
        if img.width() != s || img.height() != s {
            return Err(EncoderError::BadInput(format!(
                "image {i} is {}x{}, expected {s}x{s} (no implicit resize)",
                img.width(),
                img.height()
            )));
        }
        for (ti, chunk) in data[i * t * pd..(i + 1) * t * pd].chunks_exact_mut(pd).enumerate() {
            let (py, px) = (ti / side, ti % side);
            for y in 0..p {
                for x in 0..p {
                    let rgb = img.get(px * p + x, py * p + y);
                    let o = (y * p + x) * 3;
                    chunk[o..o + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), t, pd], data)?)
}

/// `[n, tokens, 1]` 0/1 tensor from per-image boolean masks.
pub fn mask_to_tensor(masks: &[Vec<bool>]) -> Result<Tensor> {
    let n = masks.len();
    if n == 0 {
        return Err(EncoderError::BadInput("empty mask batch".into()));
    }
    let t = masks[0].len();
    if masks.iter().any(|m| m.len() != t) {
        return Err(EncoderError::BadInput("ragged mask batch".into()));
    }
    let data: Vec<f64> = masks
        .iter()
        .flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(&[n, t, 1], data)?)
}

/// Forward pass outputs. `patch_tokens` excludes the class token.
#[derive(Debug)]
pub struct VitOutput {
    pub pooled: Tensor,
    pub patch_tokens: Tensor,
    pub class_token: Option<Tensor>,
}

const LN_EPS: f64 = 1e-6;

/// Run the backbone on pre-patchified input `[n, tokens, patch_dim]`.
/// `mask`, when given, replaces masked patch embeddings with the learned
/// mask token before position embeddings are added.
pub fn forward(cfg: &VitConfig, params: &ParamSet, patches: &Tensor, mask: Option<&Tensor>) -> Result<VitOutput> {
    cfg.validate()?;
    let t = cfg.num_patches();
    let d = cfg.dim;
    let shape = patches.shape();
    if shape.len() != 3 || shape[1] != t || shape[2] != cfg.patch_dim() {
        return Err(EncoderError::BadInput(format!(
            "patch batch has shape {shape:?}, expected [n, {t}, {}]",
            cfg.patch_dim()
        )));
    }
    let n = shape[0];

    let mut x = patches
        .matmul(params.get("patch_embed.w")?)?
        .add(params.get("patch_embed.b")?)?;

    if let Some(m) = mask {
        if m.shape() != [n, t, 1] {
            return Err(EncoderError::BadInput(format!(
                "mask has shape {:?}, expected [{n}, {t}, 1]",
                m.shape()
            )));
        }
        let keep = m.neg()?.add_scalar(1.0)?;
        let filled = params.get("mask_token")?.mul(m)?;
        x = x.mul(&keep)?.add(&filled)?;
    }

    let pos = params.get("pos_embed")?;
    let mut seq = if cfg.uses_class_token() {
        let cls = Tensor::zeros(&[n, 1, d]).add(params.get("cls_token")?)?;
        Tensor::concat(&[cls, x], 1)?.add(pos)?
    } else {
        x.add(&pos.narrow(0, 1, t)?)?
    };
    let s = seq.shape()[1];

    let (nh, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    for i in 0..cfg.depth {
        let p = format!("block{i}");
        let y = seq.layer_norm(
            params.get(&format!("{p}.norm1.g"))?,
            params.get(&format!("{p}.norm1.b"))?,
            LN_EPS,
        )?;
        let qkv = y
            .matmul(params.get(&format!("{p}.qkv.w"))?)?
            .add(params.get(&format!("{p}.qkv.b"))?)?
            .reshape(&[n, s, 3, nh, dh])?;
        let part = |j: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, j, 1)?
                .reshape(&[n, s, nh, dh])?
                .permute(&[0, 2, 1, 3])?)
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let attn = q
            .matmul(&k.permute(&[0, 1, 3, 2])?)?
            .scale(scale)?
            .softmax(1.0)?;
        let ctx = attn
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, s, d])?;
        let proj = ctx.linear(
            params.get(&format!("{p}.proj.w"))?,
            params.get(&format!("{p}.proj.b"))?,
        )?;
        seq = seq.add(&proj)?;

        let y2 = seq.layer_norm(
            params.get(&format!("{p}.norm2.g"))?,
            params.get(&format!("{p}.norm2.b"))?,
            LN_EPS,
        )?;
        let hidden = y2
            .linear(
                params.get(&format!("{p}.mlp.fc1.w"))?,
                params.get(&format!("{p}.mlp.fc1.b"))?,
            )?
            .gelu()?;
        let mlp = hidden.linear(
            params.get(&format!("{p}.mlp.fc2.w"))?,
            params.get(&format!("{p}.mlp.fc2.b"))?,
        )?;
        seq = seq.add(&mlp)?;
    }

    seq = seq.layer_norm(params.get("norm_f.g")?, params.get("norm_f.b")?, LN_EPS)?;

    if cfg.uses_class_token() {
        let class = seq.narrow(1, 0, 1)?.reshape(&[n, d])?;
        let patch_tokens = seq.narrow(1, 1, t)?;
        let pooled = match cfg.pooling {
            Pooling::ClassToken => class.clone(),
            Pooling::MeanTokens => patch_tokens.mean_axis(1, false)?,
            Pooling::CenterTokens { .. } => unreachable!("center pooling skips the class token"),
        };
        Ok(VitOutput {
            pooled,
            patch_tokens,
            class_token: Some(class),
        })
    } else {
        let Pooling::CenterTokens { grid } = cfg.pooling else {
            unreachable!("class token used for other poolings")
        };
        let idx = center_block_indices(cfg.tokens_per_side(), grid);
        let pooled = seq.index_select(1, &idx)?.mean_axis(1, false)?;
        Ok(VitOutput {
            pooled,
            patch_tokens: seq,
            class_token: None,
        })
    }
}

/// Token indices of the centered `grid`×`grid` block on a `side`×`side`
/// token grid (top-left-biased when the margin is odd).
pub fn center_block_indices(side: usize, grid: usize) -> Vec<usize> {
    let start = (side - grid) / 2;
    let mut idx = Vec::with_capacity(grid * grid);
    for r in start..start + grid {
        for c in start..start + grid {
            idx.push(r * side + c);
        }
    }
    idx
}

/// Convenience wrapper: patchify + forward, returning pooled embeddings.
pub fn encode(cfg: &VitConfig, params: &ParamSet, images: &[RgbPatch]) -> Result<Tensor> {
    let patches = patchify(images, cfg)?;
    Ok(forward(cfg, params, &patches, None)?.pooled)
}

/// MLP head forward: linear layers with layer norm + GELU between all but
/// the final layer. `dims` is the full width chain.
pub fn forward_mlp_head(params: &ParamSet, prefix: &str, dims: &[usize], x: &Tensor) -> Result<Tensor> {
    if dims.len() < 2 {
        return Err(EncoderError::InvalidConfig(format!(
            "head `{prefix}` needs at least one layer"
        )));
    }
    let mut h = x.clone();
    for i in 0..dims.len() - 1 {
        h = h.linear(
            params.get(&format!("{prefix}.fc{i}.w"))?,
            params.get(&format!("{prefix}.fc{i}.b"))?,
        )?;
        if i + 2 < dims.len() {
            h = h
                .layer_norm(
                    params.get(&format!("{prefix}.ln{i}.g"))?,
                    params.get(&format!("{prefix}.ln{i}.b"))?,
                    LN_EPS,
                )?
                .gelu()?;
        }
    }
    Ok(h)
}

/// Prototype logits: L2-normalized inputs against the prototype bank.
pub fn forward_prototypes(params: &ParamSet, z: &Tensor) -> Result<Tensor> {
    Ok(z.l2_normalize_rows(1e-12)?.matmul(params.get("prototypes")?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_sampled;

    fn toy_cfg(pooling: Pooling) -> VitConfig {
        VitConfig {
            image_size: 16,
            patch_size: 8,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            pooling,
            head_spec: None,
        }
    }

    fn ramp_images(n: usize, size: usize) -> Vec<RgbPatch> {
        (0..n)
            .map(|i| {
                let mut img = RgbPatch::new(size, size).unwrap();
                for y in 0..size {
                    for x in 0..size {
                        let v = ((x + y * size + i * 7) % 97) as f64 / 97.0;
                        img.set(x, y, [v, 1.0 - v, 0.5 * v]);
                    }
                }
                img
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_cfg(Pooling::ClassToken);
        assert!(cfg.validate().is_ok());
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        cfg.patch_size = 8;
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        cfg.pooling = Pooling::CenterTokens { grid: 3 };
        // 16/8 = 2 tokens per side, grid 3 too large
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shapes_for_each_pooling() {
        for pooling in [
            Pooling::ClassToken,
            Pooling::MeanTokens,
            Pooling::CenterTokens { grid: 1 },
        ] {
            let cfg = toy_cfg(pooling);
            let params = init_params(&cfg, 3).unwrap();
            let patches = patchify(&ramp_images(2, 16), &cfg).unwrap();
            let out = forward(&cfg, &params, &patches, None).unwrap();
            assert_eq!(out.pooled.shape(), &[2, 32]);
            assert_eq!(out.patch_tokens.shape(), &[2, 4, 32]);
            assert_eq!(out.class_token.is_some(), cfg.uses_class_token());
        }
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cfg = toy_cfg(Pooling::ClassToken);
        let err = encode(&cfg, &init_params(&cfg, 0).unwrap(), &ramp_images(1, 24)).unwrap_err();
        assert!(matches!(err, EncoderError::BadInput(_)));
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let cfg = toy_cfg(Pooling::ClassToken);
        let params = init_params(&cfg, 0).unwrap().map(|_, t| {
            Tensor::zeros(t.shape()).tracked()
        });
        let z = encode(&cfg, &params, &ramp_images(2, 16)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_pooling_matches_brute_force_index_mean() {
        // 40×40 at patch 8 → 5×5 grid; grid 3 block starts at row/col 1.
        let cfg = VitConfig {
            image_size: 40,
            patch_size: 8,
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            pooling: Pooling::CenterTokens { grid: 3 },
            head_spec: None,
        };
        let params = init_params(&cfg, 5).unwrap();
        let patches = patchify(&ramp_images(2, 40), &cfg).unwrap();
        let out = forward(&cfg, &params, &patches, None).unwrap();
        let idx = center_block_indices(5, 3);
        assert_eq!(idx, vec![6, 7, 8, 11, 12, 13, 16, 17, 18]);
        let toks = out.patch_tokens.data();
        for img in 0..2 {
            for j in 0..16 {
                let manual: f64 = idx
                    .iter()
                    .map(|&t| toks[(img * 25 + t) * 16 + j])
                    .sum::<f64>()
                    / 9.0;
                let got = out.pooled.data()[img * 16 + j];
                assert!((manual - got).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_pooling_ignores_class_token_params() {
        let cfg = toy_cfg(Pooling::CenterTokens { grid: 2 });
        let base = init_params(&cfg, 9).unwrap();
        let jittered = base.map(|name, t| {
            if name == "cls_token" {
                Tensor::full(t.shape(), 123.0).tracked()
            } else {
                t.clone()
            }
        });
        let imgs = ramp_images(2, 16);
        let a = encode(&cfg, &base, &imgs).unwrap();
        let b = encode(&cfg, &jittered, &imgs).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn token_permutation_with_pos_embed_permutes_outputs() {
        let cfg = toy_cfg(Pooling::ClassToken);
        let params = init_params(&cfg, 11).unwrap();
        let patches = patchify(&ramp_images(1, 16), &cfg).unwrap();
        let perm = [2usize, 0, 3, 1];

        let permuted_patches = patches.index_select(1, &perm).unwrap();
        let permuted_params = params.map(|name, t| {
            if name == "pos_embed" {
                let rows: Vec<usize> =
                    std::iter::once(0).chain(perm.iter().map(|&p| p + 1)).collect();
                t.index_select(0, &rows).unwrap().tracked()
            } else {
                t.clone()
            }
        });

        let base = forward(&cfg, &params, &patches, None).unwrap();
        let perm_out = forward(&cfg, &permuted_params, &permuted_patches, None).unwrap();
        let expected = base.patch_tokens.index_select(1, &perm).unwrap();
        for (a, b) in expected.data().iter().zip(perm_out.patch_tokens.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in base
            .class_token
            .unwrap()
            .data()
            .iter()
            .zip(perm_out.class_token.unwrap().data())
        {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fully_masked_forward_ignores_pixel_content() {
        let cfg = toy_cfg(Pooling::ClassToken);
        let params = init_params(&cfg, 2).unwrap();
        let imgs = ramp_images(2, 16);
        let all_masked = mask_to_tensor(&[vec![true; 4], vec![true; 4]]).unwrap();
        let a = forward(&cfg, &params, &patchify(&imgs[..1], &cfg).unwrap(), Some(&all_masked.narrow(0, 0, 1).unwrap())).unwrap();
        let b = forward(&cfg, &params, &patchify(&imgs[1..], &cfg).unwrap(), Some(&all_masked.narrow(0, 1, 1).unwrap())).unwrap();
        for (x, y) in a.pooled.data().iter().zip(b.pooled.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let cfg = toy_cfg(Pooling::ClassToken);
        let params = init_params(&cfg, 17).unwrap();
        let patches = patchify(&ramp_images(2, 16), &cfg).unwrap();
        let mask = mask_to_tensor(&[vec![true, false, false, true], vec![false; 4]]).unwrap();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

        let rebuild = move |xs: &[Tensor]| {
            let mut ps = ParamSet::new();
            for (n, t) in names.iter().zip(xs) {
                ps.insert(n, t.clone()).unwrap();
            }
            ps
        };
        let cfg2 = cfg.clone();
        let rep = grad_check_sampled(
            move |xs| {
                let ps = rebuild(xs);
                let plain = forward(&cfg2, &ps, &patches, None)
                    .map_err(|_| crate::tensor::TensorError::GradCheck("forward failed".into()))?;
                let masked = forward(&cfg2, &ps, &patches, Some(&mask))
                    .map_err(|_| crate::tensor::TensorError::GradCheck("forward failed".into()))?;
                let w1: Vec<f64> = (0..plain.pooled.numel()).map(|i| 0.05 + 0.01 * i as f64).collect();
                let w2: Vec<f64> = (0..masked.patch_tokens.numel())
                    .map(|i| 0.03 + 0.002 * (i % 31) as f64)
                    .collect();
                let s1 = plain
                    .pooled
                    .mul(&Tensor::from_vec(plain.pooled.shape(), w1)?)?
                    .sum_all()?;
                let s2 = masked
                    .patch_tokens
                    .mul(&Tensor::from_vec(masked.patch_tokens.shape(), w2)?)?
                    .sum_all()?;
                s1.add(&s2)
            },
            &tensors,
            1e-4,
            6,
            99,
        )
        .unwrap();
        assert!(
            rep.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            rep.max_rel_err,
            rep.worst
        );
    }

    #[test]
    fn heads_forward_and_gradients() {
        let spec = HeadSpec {
            projector: vec![8, 16, 16, 4],
            predictor: Some(vec![4, 16, 4]),
            prototypes: Some(6),
        };
        let cfg = VitConfig {
            image_size: 16,
            patch_size: 8,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            pooling: Pooling::ClassToken,
            head_spec: Some(spec.clone()),
        };
        let params = init_params(&cfg, 21).unwrap();
        let z = Tensor::from_vec(&[3, 8], (0..24).map(|i| 0.1 * i as f64 - 1.0).collect())
            .unwrap()
            .tracked();
        let proj = forward_mlp_head(&params, "projector", &spec.projector, &z).unwrap();
        assert_eq!(proj.shape(), &[3, 4]);
        let pred = forward_mlp_head(&params, "predictor", spec.predictor.as_ref().unwrap(), &proj).unwrap();
        assert_eq!(pred.shape(), &[3, 4]);
        let logits = forward_prototypes(&params, &proj).unwrap();
        assert_eq!(logits.shape(), &[3, 6]);

        let rep = grad_check_sampled(
            |xs| {
                let proj = forward_mlp_head(&params, "projector", &spec.projector, &xs[0])
                    .map_err(|_| crate::tensor::TensorError::GradCheck("head".into()))?;
                let logits = forward_prototypes(&params, &proj)
                    .map_err(|_| crate::tensor::TensorError::GradCheck("head".into()))?;
                logits.log_softmax(1.0)?.mean_all()
            },
            &[z],
            1e-4,
            12,
            5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn init_is_deterministic_and_order_free() {
        let cfg = toy_cfg(Pooling::ClassToken);
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(
            a.get("patch_embed.w").unwrap().data(),
            c.get("patch_embed.w").unwrap().data()
        );
    }
}
