//! Teacher–student training loop for both presets: cosine learning-rate and
//! EMA schedules, decoupled-weight-decay optimizer, block-wise token masking,
//! collapse monitoring, checkpointing.
//!
//! Two design rules keep runs exactly reproducible:
//!
//! * There is no ambient RNG state. Every draw comes from a stream named by
//!   `(config.seed, step, sample index)`, so the trajectory is independent of
//!   worker count and a resumed run continues the same stream.
//! * All state that persists across steps (parameters, optimizer moments,
//!   center) is re-quantized to the f32 grid after every step. The f32
//!   checkpoint format is therefore lossless, and training resumed from disk
//!   is bit-identical to a run that never stopped.

mod checkpoint;

pub use checkpoint::{load_train_state, read_train_config, save_train_state};

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{two_views, AugContext, AugPolicy, AugmentError};
use crate::encoder::{
    forward, forward_mlp_head, forward_prototypes, init_params, mask_to_tensor, patchify,
    CheckpointError, EncoderError, HeadSpec, ParamSet, VitConfig,
};
use crate::objectives::{
    center_update, dino_global, ibot_loss, info_nce, kde_loss, koleo_loss, DistillParams,
    LossWeights, ObjectiveError, Regularizer, INFO_NCE_TAU,
};
use crate::pixels::RgbPatch;
use crate::rng::{stream_seed, substream};
use crate::tensor::{Gradients, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("loss term `{term}` is not finite at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error("parameter `{name}`: teacher shape {teacher:?} vs student shape {student:?}")]
    ShapeMismatch {
        name: String,
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mocov3,
    Dinov2Variant,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
/// Student temperature of the distillation preset.
pub const STUDENT_TEMP: f64 = 0.1;
/// Momentum of the running center over teacher logits.
pub const CENTER_MOMENTUM: f64 = 0.9;
/// Teacher temperature rises linearly from start to end over the first
/// `TAU_T_WARMUP_FRAC` of the run, then stays flat.
pub const TAU_T_START: f64 = 0.04;
pub const TAU_T_END: f64 = 0.07;
const TAU_T_WARMUP_FRAC: f64 = 0.3;
/// A batch whose normalized embeddings have mean per-dimension std below
/// this is reported as collapsed.
pub const COLLAPSE_STD_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// EMA momentum at step 0; rises to `ema_end` on a cosine.
    pub ema_start: f64,
    pub ema_end: f64,
    /// Fraction of patch tokens masked in each student view (distillation
    /// preset only).
    pub mask_ratio: f64,
    /// vMF kernel concentration of the KDE regularizer (distillation preset
    /// only).
    pub kde_kappa: f64,
    pub seed: u64,
    /// Augmentation policy name, resolved by the caller.
    pub aug_policy: String,
}

impl TrainConfig {
    /// Desk-scale defaults: 20 epochs of 2,000 steps at batch 64.
    pub fn desk_scale(preset: Preset) -> Self {
        TrainConfig {
            preset,
            epochs: 20,
            steps_per_epoch: 2_000,
            batch_size: 64,
            base_lr: 1e-3,
            weight_decay: 0.04,
            warmup_steps: 1_000,
            ema_start: 0.992,
            ema_end: 1.0,
            mask_ratio: 0.3,
            kde_kappa: 5.0,
            seed: 0,
            aug_policy: "a1".into(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainerError::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size {} is below 2", self.batch_size));
        }
        if self.total_steps() == 0 {
            return fail("epochs x steps_per_epoch must be positive".into());
        }
        if self.warmup_steps >= self.total_steps() {
            return fail(format!(
                "warmup_steps {} must stay below total steps {}",
                self.warmup_steps,
                self.total_steps()
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return fail(format!("base_lr {} is not a finite non-negative value", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay {} is not a finite non-negative value",
                self.weight_decay
            ));
        }
        for (label, v) in [("ema_start", self.ema_start), ("ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{label} {v} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !(self.kde_kappa.is_finite() && self.kde_kappa > 0.0) {
            return fail(format!("kde_kappa {} is not a finite positive value", self.kde_kappa));
        }
        Ok(())
    }
}

/// Learning rate at step `t`: linear warmup to `base_lr`, reached exactly at
/// `t = warmup_steps`, then cosine decay to exactly zero at the final step.
pub fn lr_schedule(cfg: &TrainConfig, t: u64) -> f64 {
    let w = cfg.warmup_steps;
    if t < w {
        return cfg.base_lr * t as f64 / w as f64;
    }
    let span = (cfg.total_steps() - 1).saturating_sub(w).max(1) as f64;
    let x = ((t - w) as f64 / span).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// EMA momentum at step `t`: cosine rise from `ema_start` at step 0 to
/// `ema_end` at the final step.
pub fn ema_schedule(cfg: &TrainConfig, t: u64) -> f64 {
    let span = (cfg.total_steps() - 1).max(1) as f64;
    let x = (t as f64 / span).min(1.0);
    cfg.ema_end - (cfg.ema_end - cfg.ema_start) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Teacher temperature at step `t` (distillation preset).
pub fn teacher_temp_schedule(cfg: &TrainConfig, t: u64) -> f64 {
    let span = (cfg.total_steps() as f64 * TAU_T_WARMUP_FRAC).max(1.0);
    let x = (t as f64 / span).min(1.0);
    TAU_T_START + (TAU_T_END - TAU_T_START) * x
}

/// θ_t ← m·θ_t + (1−m)·θ_s elementwise over matching parameter maps.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, m: f64) -> Result<ParamSet> {
    if !(0.0..=1.0).contains(&m) {
        return Err(TrainerError::Config(format!("ema momentum {m} outside [0, 1]")));
    }
    if teacher.len() != student.len() {
        return Err(TrainerError::Config(format!(
            "teacher holds {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut out = ParamSet::new();
    for (name, t) in teacher.iter() {
        let s = student.get(name)?;
        if s.shape() != t.shape() {
            return Err(TrainerError::ShapeMismatch {
                name: name.to_string(),
                teacher: t.shape().to_vec(),
                student: s.shape().to_vec(),
            });
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(&a, &b)| m * a + (1.0 - m) * b)
            .collect();
        out.insert(name, Tensor::from_vec(t.shape(), data)?)?;
    }
    Ok(out)
}

/// Decay applies to weight matrices and the prototype bank only; biases,
/// norm parameters and the token/position embeddings are exempt.
fn applies_weight_decay(name: &str) -> bool {
    name.ends_with(".w") || name == "prototypes"
}

/// Decoupled-weight-decay adaptive-moment optimizer. Moments live on the f32
/// grid like the parameters (see module docs).
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub(crate) m: BTreeMap<String, Vec<f64>>,
    pub(crate) v: BTreeMap<String, Vec<f64>>,
    /// Completed updates; bias-correction exponent.
    pub(crate) t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the tracked leaves in `params`. A parameter that
    /// received no gradient keeps its value and moments untouched.
    pub fn step(
        &mut self,
        params: &ParamSet,
        grads: &Gradients,
        lr: f64,
        weight_decay: f64,
    ) -> Result<ParamSet> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut out = ParamSet::new();
        for (name, p) in params.iter() {
            let Some(g) = grads.wrt(p) else {
                out.insert(name, p.detach())?;
                continue;
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let wd = if applies_weight_decay(name) { weight_decay } else { 0.0 };
            let mut data = Vec::with_capacity(p.numel());
            for (i, (&pv, &gv)) in p.data().iter().zip(g).enumerate() {
                let mi = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gv;
                let vi = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gv * gv;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS) + wd * pv;
                data.push((pv - lr * update) as f32 as f64);
                m[i] = mi as f32 as f64;
                v[i] = vi as f32 as f64;
            }
            out.insert(name, Tensor::from_vec(p.shape(), data)?)?;
        }
        Ok(out)
    }
}

/// Block-wise token mask over a `side`×`side` grid: random rectangles
/// accumulate until exactly `round(ratio·side²)` cells are set; overflow
/// from the last rectangle is trimmed in scan order.
pub fn blockwise_mask(rng: &mut ChaCha8Rng, side: usize, ratio: f64) -> Vec<bool> {
    let cells = side * side;
    let target = (cells as f64 * ratio).round() as usize;
    let mut mask = vec![false; cells];
    let mut count = 0usize;
    let mut stalled = 0usize;
    while count < target {
        let area = rng.gen_range(1..=target - count);
        let aspect = rng.gen_range(0.5f64.ln()..=2.0f64.ln()).exp();
        let h = ((area as f64 * aspect).sqrt().round() as usize).clamp(1, side);
        let w = ((area as f64 / aspect).sqrt().round() as usize).clamp(1, side);
        let top = rng.gen_range(0..=side - h);
        let left = rng.gen_range(0..=side - w);
        let before = count;
        'block: for r in top..top + h {
            for c in left..left + w {
                if count == target {
                    break 'block;
                }
                let cell = &mut mask[r * side + c];
                if !*cell {
                    *cell = true;
                    count += 1;
                }
            }
        }
        if count == before {
            stalled += 1;
            // Rectangles keep landing on masked cells; finish in scan order.
            if stalled > 64 {
                for cell in mask.iter_mut() {
                    if count == target {
                        break;
                    }
                    if !*cell {
                        *cell = true;
                        count += 1;
                    }
                }
            }
        } else {
            stalled = 0;
        }
    }
    mask
}

/// Batch-collapse diagnostics over L2-normalized embeddings.
#[derive(Debug, Clone, Serialize)]
pub struct CollapseReport {
    pub per_dim_std: Vec<f64>,
    pub mean_per_dim_std: f64,
    pub mean_off_diag_cosine: f64,
    pub collapsed: bool,
}

/// Per-dimension spread and mean pairwise cosine of `[n, d]` embeddings.
/// Rows are L2-normalized first, so both statistics are scale-free.
pub fn collapse_monitor(embeddings: &Tensor) -> Result<CollapseReport> {
    let (n, d) = match embeddings.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(TrainerError::Config(format!(
                "collapse monitor needs [n, d] embeddings, got {other:?}"
            )))
        }
    };
    if n < 2 {
        return Err(TrainerError::Config(format!(
            "collapse monitor needs at least 2 embeddings, got {n}"
        )));
    }
    let raw = embeddings.data();
    let mut z = vec![0.0; n * d];
    for i in 0..n {
        let row = &raw[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (j, &v) in row.iter().enumerate() {
            z[i * d + j] = v / norm;
        }
    }
    let mut per_dim_std = Vec::with_capacity(d);
    for j in 0..d {
        let mean = (0..n).map(|i| z[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (z[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        per_dim_std.push(var.sqrt());
    }
    let mean_per_dim_std = per_dim_std.iter().sum::<f64>() / d as f64;
    // Σ_{i≠j} zi·zj = ‖Σ zi‖² − Σ ‖zi‖².
    let mut colsum = vec![0.0; d];
    let mut diag = 0.0;
    for i in 0..n {
        let row = &z[i * d..(i + 1) * d];
        diag += row.iter().map(|v| v * v).sum::<f64>();
        for (j, &v) in row.iter().enumerate() {
            colsum[j] += v;
        }
    }
    let gross: f64 = colsum.iter().map(|v| v * v).sum();
    let mean_off_diag_cosine = (gross - diag) / (n * (n - 1)) as f64;
    Ok(CollapseReport {
        per_dim_std,
        mean_per_dim_std,
        mean_off_diag_cosine,
        collapsed: mean_per_dim_std < COLLAPSE_STD_THRESHOLD,
    })
}

/// Everything a run carries between steps. RNG state is implicit: every draw
/// derives from `config.seed` and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: VitConfig,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub opt: AdamW,
    /// Running center over teacher prototype logits (distillation preset;
    /// empty otherwise).
    pub center: Vec<f64>,
    pub step: u64,
}

impl TrainState {
    /// Fresh state: student initialized from the config seed, teacher a copy.
    pub fn new(config: TrainConfig, encoder: VitConfig) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        let head = encoder
            .head_spec
            .as_ref()
            .ok_or_else(|| TrainerError::Config("encoder config carries no heads".into()))?;
        let prototypes = match config.preset {
            Preset::Mocov3 => {
                if head.predictor.is_none() {
                    return Err(TrainerError::Config(
                        "the contrastive preset needs a predictor head".into(),
                    ));
                }
                0
            }
            Preset::Dinov2Variant => {
                let k = head.prototypes.ok_or_else(|| {
                    TrainerError::Config("the distillation preset needs a prototype bank".into())
                })?;
                if k < 2 {
                    return Err(TrainerError::Config(format!(
                        "prototype bank of {k} is below 2"
                    )));
                }
                k
            }
        };
        let student = init_params(&encoder, config.seed)?.quantized_f32();
        let teacher = student.detached();
        Ok(TrainState {
            config,
            encoder,
            student,
            teacher,
            opt: AdamW::new(),
            center: vec![0.0; prototypes],
            step: 0,
        })
    }
}

/// Per-step record; `per_dim_std` is the mean per-dimension std of the
/// student's pooled embeddings over both views.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub ema_momentum: f64,
    pub per_dim_std: f64,
    /// Unweighted loss terms by name.
    pub terms: Vec<(&'static str, f64)>,
}

struct PresetOutput {
    loss: Tensor,
    terms: Vec<(&'static str, Tensor)>,
    /// Teacher prototype logits for the center update (distillation only).
    teacher_logits: Option<Tensor>,
    /// Student pooled embeddings of both views, detached.
    pooled: Tensor,
}

fn mocov3_output(
    enc: &VitConfig,
    head: &HeadSpec,
    student: &ParamSet,
    teacher: &ParamSet,
    x1: &Tensor,
    x2: &Tensor,
) -> Result<PresetOutput> {
    let proj = &head.projector;
    let pred = head.predictor.as_ref().ok_or_else(|| {
        TrainerError::Config("the contrastive preset needs a predictor head".into())
    })?;
    let s1 = forward(enc, student, x1, None)?;
    let s2 = forward(enc, student, x2, None)?;
    let query = |pooled: &Tensor| -> Result<Tensor> {
        let z = forward_mlp_head(student, "projector", proj, pooled)?;
        Ok(forward_mlp_head(student, "predictor", pred, &z)?)
    };
    let key = |x: &Tensor| -> Result<Tensor> {
        let out = forward(enc, teacher, x, None)?;
        Ok(forward_mlp_head(teacher, "projector", proj, &out.pooled)?)
    };
    let q1 = query(&s1.pooled)?;
    let q2 = query(&s2.pooled)?;
    let k1 = key(x1)?;
    let k2 = key(x2)?;
    let a = info_nce(&q1, &k2, None, INFO_NCE_TAU)?;
    let b = info_nce(&q2, &k1, None, INFO_NCE_TAU)?;
    let loss = a.add(&b)?.scale(0.5)?;
    Ok(PresetOutput {
        loss,
        terms: vec![("info_nce_12", a), ("info_nce_21", b)],
        teacher_logits: None,
        pooled: Tensor::concat(&[s1.pooled.detach(), s2.pooled.detach()], 0)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn dinov2_output(
    cfg: &TrainConfig,
    enc: &VitConfig,
    head: &HeadSpec,
    student: &ParamSet,
    teacher: &ParamSet,
    x1: &Tensor,
    x2: &Tensor,
    center: &[f64],
    step: u64,
) -> Result<PresetOutput> {
    let proj = &head.projector;
    if head.prototypes.is_none() {
        return Err(TrainerError::Config(
            "the distillation preset needs a prototype bank".into(),
        ));
    }
    let n = x1.shape()[0];
    let side = enc.tokens_per_side();
    let sample_mask = |i: usize, view: usize| {
        let mut r = substream(cfg.seed, &format!("mask/{step}/{i}/{view}"));
        blockwise_mask(&mut r, side, cfg.mask_ratio)
    };
    let masks1: Vec<Vec<bool>> = (0..n).map(|i| sample_mask(i, 0)).collect();
    let masks2: Vec<Vec<bool>> = (0..n).map(|i| sample_mask(i, 1)).collect();
    let m1 = mask_to_tensor(&masks1)?;
    let m2 = mask_to_tensor(&masks2)?;

    let s1 = forward(enc, student, x1, Some(&m1))?;
    let s2 = forward(enc, student, x2, Some(&m2))?;
    let t1 = forward(enc, teacher, x1, None)?;
    let t2 = forward(enc, teacher, x2, None)?;
    let logits = |ps: &ParamSet, z: &Tensor| -> Result<Tensor> {
        let h = forward_mlp_head(ps, "projector", proj, z)?;
        Ok(forward_prototypes(ps, &h)?)
    };

    let dparams = DistillParams {
        tau_s: STUDENT_TEMP,
        tau_t: teacher_temp_schedule(cfg, step),
        center: center.to_vec(),
        center_momentum: CENTER_MOMENTUM,
    };
    let weights = LossWeights {
        kde_kappa: cfg.kde_kappa,
        ..LossWeights::lemon_dinov2()
    };

    let sl1 = logits(student, &s1.pooled)?;
    let sl2 = logits(student, &s2.pooled)?;
    let tl1 = logits(teacher, &t1.pooled)?;
    let tl2 = logits(teacher, &t2.pooled)?;
    let dino = dino_global((&sl1, &sl2), (&tl1, &tl2), &dparams)?;

    let pairs = |masks: &[Vec<bool>]| -> Vec<(usize, usize)> {
        masks
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.iter().enumerate().filter(|(_, &b)| b).map(move |(j, _)| (i, j)))
            .collect()
    };
    let ibot1 = ibot_loss(
        &logits(student, &s1.patch_tokens)?,
        &logits(teacher, &t1.patch_tokens)?,
        &pairs(&masks1),
        &dparams,
    )?;
    let ibot2 = ibot_loss(
        &logits(student, &s2.patch_tokens)?,
        &logits(teacher, &t2.patch_tokens)?,
        &pairs(&masks2),
        &dparams,
    )?;
    let ibot = ibot1.add(&ibot2)?.scale(0.5)?;

    let reg_term = |z: &Tensor| -> Result<Tensor> {
        Ok(match weights.regularizer {
            Regularizer::Kde => kde_loss(z, weights.kde_kappa)?,
            Regularizer::KoLeo => koleo_loss(z)?,
        })
    };
    let reg = reg_term(&s1.pooled)?.add(&reg_term(&s2.pooled)?)?.scale(0.5)?;
    let reg_name = match weights.regularizer {
        Regularizer::Kde => "kde",
        Regularizer::KoLeo => "koleo",
    };

    let loss = dino
        .add(&ibot.scale(weights.ibot_weight)?)?
        .add(&reg.scale(weights.reg_weight)?)?;
    Ok(PresetOutput {
        loss,
        terms: vec![("dino", dino), ("ibot", ibot), (reg_name, reg)],
        teacher_logits: Some(Tensor::concat(&[tl1, tl2], 0)?),
        pooled: Tensor::concat(&[s1.pooled.detach(), s2.pooled.detach()], 0)?,
    })
}

fn check_finite(term: &'static str, t: &Tensor, step: u64) -> Result<f64> {
    let v = t.scalar()?;
    if !v.is_finite() {
        return Err(TrainerError::NonFinite {
            term: term.into(),
            step,
        });
    }
    Ok(v)
}

/// One optimization step: augment two views per sample, evaluate the preset
/// loss, update the student, move the teacher by EMA, advance the center
/// (distillation preset).
pub fn train_step(
    state: &mut TrainState,
    batch: &[RgbPatch],
    policy: &AugPolicy,
    ctx: AugContext<'_>,
) -> Result<StepStats> {
    if batch.len() < 2 {
        return Err(TrainerError::Config(format!(
            "batch of {} images; need at least 2",
            batch.len()
        )));
    }
    let step = state.step;
    let cfg = state.config.clone();
    let head = state
        .encoder
        .head_spec
        .clone()
        .ok_or_else(|| TrainerError::Config("encoder config carries no heads".into()))?;
    let lr = lr_schedule(&cfg, step);
    let ema_m = ema_schedule(&cfg, step);

    // Each sample owns a named stream, so the views are independent of
    // worker count and batch composition order.
    let seeds: Vec<u64> = (0..batch.len())
        .map(|i| stream_seed(cfg.seed, &format!("aug/{step}/{i}")))
        .collect();
    let views: Vec<(RgbPatch, RgbPatch)> = batch
        .par_iter()
        .zip(&seeds)
        .map(|(img, &s)| two_views(policy, img, s, ctx))
        .collect::<std::result::Result<_, _>>()?;
    let (v1, v2): (Vec<_>, Vec<_>) = views.into_iter().unzip();
    let x1 = patchify(&v1, &state.encoder)?;
    let x2 = patchify(&v2, &state.encoder)?;

    let student = state.student.tracked();
    let teacher = state.teacher.detached();
    let out = match cfg.preset {
        Preset::Mocov3 => mocov3_output(&state.encoder, &head, &student, &teacher, &x1, &x2)?,
        Preset::Dinov2Variant => dinov2_output(
            &cfg,
            &state.encoder,
            &head,
            &student,
            &teacher,
            &x1,
            &x2,
            &state.center,
            step,
        )?,
    };

    let mut term_values = Vec::with_capacity(out.terms.len());
    for (name, t) in &out.terms {
        term_values.push((*name, check_finite(name, t, step)?));
    }
    let loss_value = check_finite("total", &out.loss, step)?;

    let grads = out.loss.backward()?;
    // The update set is the student map by construction; on top of that the
    // teacher must be outside the gradient graph entirely.
    for (name, t) in teacher.iter() {
        assert!(
            grads.wrt(t).is_none(),
            "teacher parameter `{name}` received a gradient"
        );
    }

    let new_student = state.opt.step(&student, &grads, lr, cfg.weight_decay)?;
    let new_teacher = ema_update(&state.teacher, &new_student, ema_m)?.quantized_f32();
    if let Some(tl) = &out.teacher_logits {
        let c = center_update(&state.center, tl, CENTER_MOMENTUM)?;
        state.center = c.into_iter().map(|v| v as f32 as f64).collect();
    }
    state.student = new_student;
    state.teacher = new_teacher;
    state.step += 1;

    let report = collapse_monitor(&out.pooled)?;
    Ok(StepStats {
        step,
        loss: loss_value,
        lr,
        ema_momentum: ema_m,
        per_dim_std: report.mean_per_dim_std,
        terms: term_values,
    })
}

/// Drive [`train_step`] from the current step to the end of the schedule.
/// `next_batch` is called with the step index. `log`, when given, receives
/// one tab-separated line per step: step, loss, lr, EMA momentum, mean
/// per-dimension std.
pub fn train_loop<F>(
    state: &mut TrainState,
    policy: &AugPolicy,
    ctx: AugContext<'_>,
    mut next_batch: F,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepStats>>
where
    F: FnMut(u64) -> Result<Vec<RgbPatch>>,
{
    let total = state.config.total_steps();
    let mut stats = Vec::with_capacity(total.saturating_sub(state.step) as usize);
    while state.step < total {
        let batch = next_batch(state.step)?;
        let s = train_step(state, &batch, policy, ctx)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                s.step, s.loss, s.lr, s.ema_momentum, s.per_dim_std
            )?;
        }
        stats.push(s);
    }
    Ok(stats)
}
