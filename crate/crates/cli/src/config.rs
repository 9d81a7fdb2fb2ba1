//! Training configuration: built-in defaults, overridden by a TOML file,
//! overridden by flags, in that order. Unknown file keys are rejected with a
//! nearest-key suggestion so typos never silently fall back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use nssl_core::encoder::{HeadSpec, Pooling, VitConfig};
use nssl_core::trainer::{Preset, TrainConfig};

use crate::{CliError, Result};

/// Fully resolved training settings. Field names double as config-file keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Objective family: `mocov3` or `dinov2`.
    pub preset: String,
    pub epochs: usize,
    /// Steps per epoch; omitted means one pass over the dataset,
    /// `ceil(cells / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// The only schedule on offer; the key exists so the resolved config
    /// names it explicitly.
    pub lr_schedule: String,
    pub weight_decay: f64,
    /// Omitted means `min(1000, total_steps / 10)`.
    pub warmup_steps: Option<u64>,
    pub ema: f64,
    pub ema_end: f64,
    pub mask_ratio: f64,
    pub kde_kappa: f64,
    /// Augmentation policy: a preset name or a policy TOML path.
    pub policy: String,
    pub seed: Option<u64>,

    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// `class_token`, `mean_tokens`, or `center_tokens:<grid>`.
    pub pooling: String,
    /// Projector hidden and output widths; the encoder dim is prepended.
    pub projector: Vec<usize>,
    /// Predictor hidden widths; input and output equal the projector output
    /// (contrastive preset only).
    pub predictor: Vec<usize>,
    /// Prototype bank size (distillation preset only).
    pub prototypes: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            preset: "mocov3".into(),
            epochs: 20,
            steps_per_epoch: None,
            batch_size: 64,
            lr: 1e-3,
            lr_schedule: "warmup_cosine".into(),
            weight_decay: 0.04,
            warmup_steps: None,
            ema: 0.992,
            ema_end: 1.0,
            mask_ratio: 0.3,
            kde_kappa: 5.0,
            policy: "a1".into(),
            seed: None,
            image_size: 40,
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            pooling: "class_token".into(),
            projector: vec![512, 512, 128],
            predictor: vec![512],
            prototypes: 1024,
        }
    }
}

/// Every field of [`TrainSettings`], in declaration order.
const KNOWN_KEYS: [&str; 24] = [
    "preset",
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "lr",
    "lr_schedule",
    "weight_decay",
    "warmup_steps",
    "ema",
    "ema_end",
    "mask_ratio",
    "kde_kappa",
    "policy",
    "seed",
    "image_size",
    "patch_size",
    "dim",
    "depth",
    "heads",
    "mlp_ratio",
    "pooling",
    "projector",
    "predictor",
    "prototypes",
];

/// Overlay of the same fields, all optional; what a config file or the flag
/// set may provide.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct TrainOverlay {
    pub preset: Option<String>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_schedule: Option<String>,
    pub weight_decay: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub ema: Option<f64>,
    pub ema_end: Option<f64>,
    pub mask_ratio: Option<f64>,
    pub kde_kappa: Option<f64>,
    pub policy: Option<String>,
    pub seed: Option<u64>,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub pooling: Option<String>,
    pub projector: Option<Vec<usize>>,
    pub predictor: Option<Vec<usize>>,
    pub prototypes: Option<usize>,
}

impl TrainSettings {
    pub fn apply(&mut self, o: &TrainOverlay) {
        macro_rules! set {
            ($($f:ident),*) => {
                $(if let Some(v) = &o.$f { self.$f = v.clone(); })*
            };
        }
        set!(
            preset,
            epochs,
            batch_size,
            lr,
            lr_schedule,
            weight_decay,
            ema,
            ema_end,
            mask_ratio,
            kde_kappa,
            policy,
            image_size,
            patch_size,
            dim,
            depth,
            heads,
            mlp_ratio,
            pooling,
            projector,
            predictor,
            prototypes
        );
        if o.steps_per_epoch.is_some() {
            self.steps_per_epoch = o.steps_per_epoch;
        }
        if o.warmup_steps.is_some() {
            self.warmup_steps = o.warmup_steps;
        }
        if o.seed.is_some() {
            self.seed = o.seed;
        }
    }

    pub fn preset_kind(&self) -> Result<Preset> {
        match self.preset.as_str() {
            "mocov3" => Ok(Preset::Mocov3),
            "dinov2" | "dinov2_variant" => Ok(Preset::Dinov2Variant),
            other => Err(CliError::Input(format!(
                "unknown preset `{other}`; expected `mocov3` or `dinov2`"
            ))),
        }
    }

    fn pooling_kind(&self) -> Result<Pooling> {
        let p = self.pooling.as_str();
        if p == "class_token" {
            return Ok(Pooling::ClassToken);
        }
        if p == "mean_tokens" {
            return Ok(Pooling::MeanTokens);
        }
        if let Some(grid) = p.strip_prefix("center_tokens:") {
            let grid: usize = grid.parse().map_err(|_| {
                CliError::Input(format!("pooling `{p}`: grid must be an integer"))
            })?;
            return Ok(Pooling::CenterTokens { grid });
        }
        Err(CliError::Input(format!(
            "unknown pooling `{p}`; expected `class_token`, `mean_tokens`, or `center_tokens:<grid>`"
        )))
    }

    /// Concrete trainer and encoder configs for a dataset of `cells` cells.
    /// Also fills the derived fields in place so the serialized settings
    /// state what actually ran.
    pub fn materialize(&mut self, cells: usize, seed: u64) -> Result<(TrainConfig, VitConfig)> {
        if self.lr_schedule != "warmup_cosine" {
            return Err(CliError::Input(format!(
                "unknown lr_schedule `{}`; the only schedule is `warmup_cosine`",
                self.lr_schedule
            )));
        }
        let preset = self.preset_kind()?;
        if self.batch_size == 0 {
            return Err(CliError::Input("batch_size must be positive".into()));
        }
        let steps_per_epoch = match self.steps_per_epoch {
            Some(s) => s,
            None => {
                if cells == 0 {
                    return Err(CliError::Input("dataset has no usable cells".into()));
                }
                cells.div_ceil(self.batch_size)
            }
        };
        let total = (self.epochs * steps_per_epoch) as u64;
        let warmup = self.warmup_steps.unwrap_or_else(|| 1000.min(total / 10));
        self.steps_per_epoch = Some(steps_per_epoch);
        self.warmup_steps = Some(warmup);
        self.seed = Some(seed);

        let head_spec = match preset {
            Preset::Mocov3 => {
                let mut projector = vec![self.dim];
                projector.extend(&self.projector);
                let out = *projector.last().expect("nonempty by construction");
                let mut predictor = vec![out];
                predictor.extend(&self.predictor);
                predictor.push(out);
                HeadSpec {
                    projector,
                    predictor: Some(predictor),
                    prototypes: None,
                }
            }
            Preset::Dinov2Variant => {
                let mut projector = vec![self.dim];
                projector.extend(&self.projector);
                HeadSpec {
                    projector,
                    predictor: None,
                    prototypes: Some(self.prototypes),
                }
            }
        };
        let encoder = VitConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            pooling: self.pooling_kind()?,
            head_spec: Some(head_spec),
        };
        encoder.validate()?;

        let train = TrainConfig {
            preset,
            epochs: self.epochs,
            steps_per_epoch,
            batch_size: self.batch_size,
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: warmup,
            ema_start: self.ema,
            ema_end: self.ema_end,
            mask_ratio: self.mask_ratio,
            kde_kappa: self.kde_kappa,
            seed,
            aug_policy: self.policy.clone(),
        };
        train.validate()?;
        Ok((train, encoder))
    }
}

/// Parse a config file into an overlay, rejecting unknown keys with a
/// nearest-key suggestion.
pub fn load_config_file(path: &Path) -> Result<TrainOverlay> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("config file {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Input(format!("config file {}: {e}", path.display())))?;
    for key in table.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::Input(unknown_key_message(key)));
        }
    }
    table
        .try_into()
        .map_err(|e| CliError::Input(format!("config file {}: {e}", path.display())))
}

fn unknown_key_message(key: &str) -> String {
    let nearest = KNOWN_KEYS
        .iter()
        .min_by_key(|k| strsim::levenshtein(key, k))
        .expect("key list is nonempty");
    if strsim::levenshtein(key, nearest) <= 1 + key.len() / 2 {
        format!("unknown config key `{key}`; did you mean `{nearest}`?")
    } else {
        format!("unknown config key `{key}`")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_materialize() {
        let mut s = TrainSettings::default();
        let (train, enc) = s.materialize(640, 3).unwrap();
        assert_eq!(train.batch_size, 64);
        assert_eq!(train.steps_per_epoch, 10);
        assert_eq!(train.warmup_steps, 20);
        assert_eq!(enc.dim, 64);
        assert_eq!(s.steps_per_epoch, Some(10));
        assert_eq!(s.seed, Some(3));
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let mut s = TrainSettings::default();
        let file: TrainOverlay = toml::from_str("epochs = 5\nlr = 0.01").unwrap();
        s.apply(&file);
        assert_eq!(s.epochs, 5);
        assert_eq!(s.lr, 0.01);
        let flags = TrainOverlay {
            lr: Some(0.5),
            ..TrainOverlay::default()
        };
        s.apply(&flags);
        assert_eq!(s.lr, 0.5);
        assert_eq!(s.epochs, 5);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        // Adjacent transposition: distance 2 to `lr_schedule`, far from
        // everything else.
        let msg = unknown_key_message("lr_scheduel");
        assert!(msg.contains("`lr_scheduel`"), "{msg}");
        assert!(msg.contains("did you mean `lr_schedule`?"), "{msg}");
    }

    #[test]
    fn levenshtein_matches_hand_computed_cases() {
        // Fixed oracle triples (a, b, distance) worked out by hand.
        for (a, b, d) in [
            ("", "abc", 3),
            ("kitten", "sitting", 3),
            ("lr", "lr", 0),
            ("epohcs", "epochs", 2),
            ("dim", "dims", 1),
        ] {
            assert_eq!(strsim::levenshtein(a, b), d, "{a} vs {b}");
        }
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epochs = \"ten\"\n").unwrap();
        let err = load_config_file(&path).unwrap_err();
        let msg = err.message().to_string();
        assert!(msg.contains("epochs"), "{msg}");
        assert!(msg.contains("invalid type"), "{msg}");
    }

    #[test]
    fn dinov2_head_carries_prototypes() {
        let mut s = TrainSettings {
            preset: "dinov2".into(),
            prototypes: 64,
            ..TrainSettings::default()
        };
        let (train, enc) = s.materialize(128, 0).unwrap();
        assert_eq!(train.preset, Preset::Dinov2Variant);
        let head = enc.head_spec.unwrap();
        assert_eq!(head.prototypes, Some(64));
        assert!(head.predictor.is_none());
        assert_eq!(head.projector, vec![64, 512, 512, 128]);
    }
}
