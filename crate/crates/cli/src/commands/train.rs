//! Self-supervised training. Settings resolve as defaults < config file <
//! flags; the seed additionally falls back to `NSSL_SEED`. Outputs:
//! `checkpoint.nssl`, `train_log.tsv`, `exclusions.tsv`, and the run
//! manifest. Given the same manifest, settings, and seed the checkpoint
//! and log are byte-identical, whatever the worker count.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;

use nssl_core::augment::{preset, AugContext, AugPolicy, TransformSpec};
use nssl_core::dataio::SOURCE_PATCH_SIZE;
use nssl_core::rng;
use nssl_core::stain::{gmm_fit, stain_stats, StainStatsModel};
use nssl_core::trainer::{load_train_state, save_train_state, train_loop, TrainState};

use crate::config::{load_config_file, TrainOverlay, TrainSettings};
use crate::manifest::{prepare_out_dir, RunRecorder};
use crate::{resolve_seed, CliError, Result};

const GMM_MAX_ITERS: usize = 500;
const GMM_TOL: f64 = 1e-6;
/// Mean per-dimension std below this on the last step gets a warning.
const COLLAPSE_WARN_STD: f64 = 0.01;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Cell manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,

    /// Image root for relative manifest paths; defaults to the manifest's
    /// directory.
    #[arg(long)]
    pub images: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// TOML config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Shorthand for a single epoch of exactly this many steps.
    #[arg(long, conflicts_with_all = ["epochs", "steps_per_epoch"])]
    pub steps: Option<usize>,

    /// Continue from `<out>/checkpoint.nssl` instead of starting fresh.
    #[arg(long)]
    pub resume: bool,

    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub ema: Option<f64>,
    #[arg(long)]
    pub ema_end: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub kde_kappa: Option<f64>,
    /// Augmentation policy: preset name (a0, a1, a1+gray, a1+gmm1,
    /// a1+gmm10) or a policy TOML path.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub prototypes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    fn overlay(&self) -> TrainOverlay {
        TrainOverlay {
            preset: self.preset.clone(),
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_schedule: None,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ema: self.ema,
            ema_end: self.ema_end,
            mask_ratio: self.mask_ratio,
            kde_kappa: self.kde_kappa,
            policy: self.policy.clone(),
            seed: self.seed,
            image_size: None,
            patch_size: None,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: None,
            pooling: self.pooling.clone(),
            projector: None,
            predictor: None,
            prototypes: self.prototypes,
        }
    }
}

/// A policy names a preset or a TOML file; preset names win. Returns the
/// file path when one was read, for the input digest.
pub fn resolve_policy(name: &str) -> Result<(AugPolicy, Option<PathBuf>)> {
    match preset(name) {
        Ok(p) => Ok((p, None)),
        Err(preset_err) => {
            let path = Path::new(name);
            if path.is_file() {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("policy file {name}: {e}")))?;
                let policy = AugPolicy::from_toml_str(&text)
                    .map_err(|e| CliError::Input(format!("policy file {name}: {e}")))?;
                Ok((policy, Some(path.to_path_buf())))
            } else {
                Err(CliError::Input(format!(
                    "policy `{name}` is neither a preset nor a file ({preset_err})"
                )))
            }
        }
    }
}

/// Fits the stain GMM the policy asks for, if any.
fn fit_stain_model(
    policy: &AugPolicy,
    patches: &[nssl_core::pixels::RgbPatch],
    seed: u64,
) -> Result<Option<StainStatsModel>> {
    if !policy.needs_stain_model() {
        return Ok(None);
    }
    let components = policy
        .transforms
        .iter()
        .find_map(|t| match t {
            TransformSpec::StainGmm { components } => Some(*components),
            _ => None,
        })
        .expect("needs_stain_model implies a stain_gmm transform");
    let stats: Vec<[f64; 6]> = patches.par_iter().map(stain_stats).collect();
    let model = gmm_fit(
        &stats,
        components,
        rng::stream_seed(seed, "stain-model"),
        GMM_MAX_ITERS,
        GMM_TOL,
    )?;
    Ok(Some(model))
}

pub fn run(args: TrainArgs) -> Result<()> {
    prepare_out_dir(&args.out)?;

    let mut settings = TrainSettings::default();
    if let Some(path) = &args.config {
        settings.apply(&load_config_file(path)?);
    }
    settings.apply(&args.overlay());
    if let Some(steps) = args.steps {
        settings.epochs = 1;
        settings.steps_per_epoch = Some(steps);
    }
    let seed = resolve_seed(settings.seed, None)?;

    let (_, extraction) = super::load_cells(&args.manifest, args.images.as_deref(), SOURCE_PATCH_SIZE)?;
    super::write_exclusions(&args.out, &super::exclusion_rows(&extraction.excluded))?;
    let n = extraction.patches.len();

    let (policy, policy_file) = resolve_policy(&settings.policy)?;
    let (train_cfg, vit_cfg) = settings.materialize(n, seed)?;
    if train_cfg.batch_size > n {
        return Err(CliError::Input(format!(
            "batch_size {} exceeds the {n} usable cells",
            train_cfg.batch_size
        )));
    }

    let model = fit_stain_model(&policy, &extraction.patches, seed)?;
    let ctx = AugContext {
        stain_model: model.as_ref(),
    };

    let ckpt_path = args.out.join("checkpoint.nssl");
    let mut state = if args.resume {
        load_train_state(&ckpt_path, &train_cfg)?
    } else {
        TrainState::new(train_cfg.clone(), vit_cfg)?
    };

    let log_path = args.out.join("train_log.tsv");
    let mut log: std::fs::File = if args.resume && log_path.is_file() {
        std::fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "step\tloss\tlr\tema_momentum\tper_dim_std")?;
        f
    };

    let patches = &extraction.patches;
    let batch = train_cfg.batch_size;
    let stats = train_loop(
        &mut state,
        &policy,
        ctx,
        |step| {
            let mut r = rng::substream(seed, &format!("batch/{step}"));
            let idx = rand::seq::index::sample(&mut r, n, batch);
            Ok(idx.iter().map(|i| patches[i].clone()).collect())
        },
        Some(&mut log),
    )?;
    log.flush()?;
    save_train_state(&ckpt_path, &state)?;

    println!(
        "cells: {n} usable, {} excluded",
        extraction.excluded.len()
    );
    match (stats.first(), stats.last()) {
        (Some(first), Some(last)) => {
            println!(
                "steps {}..{}: loss {} -> {}",
                first.step,
                last.step + 1,
                first.loss,
                last.loss
            );
            if last.per_dim_std < COLLAPSE_WARN_STD {
                eprintln!(
                    "warning: embeddings near collapse (per-dim std {})",
                    last.per_dim_std
                );
            }
        }
        _ => println!("checkpoint already at step {}; nothing to do", state.step),
    }
    println!("checkpoint: {}", ckpt_path.display());

    let mut rec = RunRecorder::new("train", seed, serde_json::to_value(&settings).unwrap());
    rec.add_input(&args.manifest)?;
    if let Some(path) = &args.config {
        rec.add_input(path)?;
    }
    if let Some(path) = &policy_file {
        rec.add_input(path)?;
    }
    rec.finish(&args.out)
}
