//! Trainer checkpoints reuse the encoder container: the config text holds
//! the train/encoder configs and step counters as TOML, the blocks hold the
//! student and teacher parameters plus optimizer moments and the center
//! vector under name prefixes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, Result, TrainConfig, TrainState, TrainerError};
use crate::encoder::{
    blocks_to_params, params_to_blocks, read_checkpoint, write_checkpoint, Block, CheckpointError,
    CheckpointFile, VitConfig,
};

const META_KIND: &str = "trainer_state_v1";

#[derive(Debug, Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    step: u64,
    adam_step: u64,
    train: TrainConfig,
    encoder: VitConfig,
}

fn prefixed(prefix: &str, blocks: Vec<Block>) -> impl Iterator<Item = Block> + '_ {
    blocks.into_iter().map(move |b| Block {
        name: format!("{prefix}{}", b.name),
        ..b
    })
}

pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    state.config.validate()?;
    state
        .encoder
        .validate()
        .map_err(|e| CheckpointError::Validation(e.to_string()))?;
    let meta = TrainMeta {
        kind: META_KIND.into(),
        step: state.step,
        adam_step: state.opt.t,
        train: state.config.clone(),
        encoder: state.encoder.clone(),
    };
    let config_text = toml::to_string(&meta)
        .map_err(|e| CheckpointError::Validation(format!("meta serialization: {e}")))?;
    let mut blocks: Vec<Block> = Vec::new();
    blocks.extend(prefixed(
        "student/",
        params_to_blocks(&state.encoder, &state.student)?,
    ));
    blocks.extend(prefixed(
        "teacher/",
        params_to_blocks(&state.encoder, &state.teacher)?,
    ));
    for (group, moments) in [("opt/m/", &state.opt.m), ("opt/v/", &state.opt.v)] {
        for (name, m) in moments {
            blocks.push(Block {
                name: format!("{group}{name}"),
                shape: vec![m.len()],
                data: m.iter().map(|&v| v as f32).collect(),
            });
        }
    }
    blocks.push(Block {
        name: "center".into(),
        shape: vec![state.center.len()],
        data: state.center.iter().map(|&v| v as f32).collect(),
    });
    write_checkpoint(path, &CheckpointFile { config_text, blocks })?;
    Ok(())
}

/// Read back the configs a checkpoint was written under, without loading the
/// parameter blocks. Lets downstream consumers (embedding extraction) open a
/// checkpoint with no outside knowledge of the run.
pub fn read_train_config(path: &Path) -> Result<(TrainConfig, VitConfig)> {
    let file = read_checkpoint(path)?;
    let meta: TrainMeta = toml::from_str(&file.config_text).map_err(|e| {
        TrainerError::from(CheckpointError::Validation(format!(
            "not a trainer checkpoint: {e}"
        )))
    })?;
    if meta.kind != META_KIND {
        return Err(CheckpointError::Validation(format!(
            "config text kind `{}` is not `{META_KIND}`",
            meta.kind
        ))
        .into());
    }
    Ok((meta.train, meta.encoder))
}

/// Restore a run. `expected` must equal the stored train config; resuming
/// under silently different hyperparameters is the classic way to corrupt a
/// trajectory.
pub fn load_train_state(path: &Path, expected: &TrainConfig) -> Result<TrainState> {
    let file = read_checkpoint(path)?;
    let meta: TrainMeta = toml::from_str(&file.config_text).map_err(|e| {
        TrainerError::from(CheckpointError::Validation(format!(
            "not a trainer checkpoint: {e}"
        )))
    })?;
    if meta.kind != META_KIND {
        return Err(CheckpointError::Validation(format!(
            "config text kind `{}` is not `{META_KIND}`",
            meta.kind
        ))
        .into());
    }
    if &meta.train != expected {
        return Err(CheckpointError::Validation(
            "train config in the checkpoint does not match the requested one".into(),
        )
        .into());
    }
    meta.train.validate()?;
    meta.encoder
        .validate()
        .map_err(|e| CheckpointError::Validation(e.to_string()))?;

    let subset = |prefix: &str| -> Vec<Block> {
        file.blocks
            .iter()
            .filter(|b| b.name.starts_with(prefix))
            .map(|b| Block {
                name: b.name[prefix.len()..].to_string(),
                shape: b.shape.clone(),
                data: b.data.clone(),
            })
            .collect()
    };
    let student = blocks_to_params(&meta.encoder, &subset("student/"), false)?;
    let teacher = blocks_to_params(&meta.encoder, &subset("teacher/"), false)?;

    let moments = |prefix: &str| -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for b in subset(prefix) {
            if !student.contains(&b.name) {
                return Err(CheckpointError::Validation(format!(
                    "optimizer moment `{}{}` refers to no parameter",
                    prefix, b.name
                ))
                .into());
            }
            out.insert(b.name, b.data.iter().map(|&v| v as f64).collect());
        }
        Ok(out)
    };
    let m = moments("opt/m/")?;
    let v = moments("opt/v/")?;

    let center_block = file
        .block("center")
        .ok_or_else(|| CheckpointError::Validation("missing center block".into()))?;
    let center: Vec<f64> = center_block.data.iter().map(|&v| v as f64).collect();
    if let Some(k) = meta
        .encoder
        .head_spec
        .as_ref()
        .and_then(|h| h.prototypes)
        .filter(|_| matches!(meta.train.preset, super::Preset::Dinov2Variant))
    {
        if center.len() != k {
            return Err(CheckpointError::Validation(format!(
                "center has {} entries, prototype bank has {k}",
                center.len()
            ))
            .into());
        }
    }

    Ok(TrainState {
        config: meta.train,
        encoder: meta.encoder,
        student,
        teacher,
        opt: AdamW {
            m,
            v,
            t: meta.adam_step,
        },
        center,
        step: meta.step,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{toy_batch, toy_config, toy_encoder, toy_policy};
    use super::super::{train_step, Preset, TrainState};
    use super::*;
    use crate::augment::AugContext;
    use crate::encoder::save_encoder;

    fn state_snapshot(s: &TrainState) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, u64, u64) {
        (
            s.student.iter().map(|(_, t)| t.data().to_vec()).collect(),
            s.teacher.iter().map(|(_, t)| t.data().to_vec()).collect(),
            s.center.clone(),
            s.step,
            s.opt.t,
        )
    }

    fn resume_matches_uninterrupted(preset: Preset) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.nssl");
        let cfg = toy_config(preset);
        let batch = toy_batch(4, 9);
        let policy = toy_policy();

        let mut run = TrainState::new(cfg.clone(), toy_encoder(preset)).unwrap();
        for _ in 0..3 {
            train_step(&mut run, &batch, &policy, AugContext::default()).unwrap();
        }
        save_train_state(&path, &run).unwrap();
        let mut resumed = load_train_state(&path, &cfg).unwrap();
        assert_eq!(state_snapshot(&run), state_snapshot(&resumed));

        let mut direct = Vec::new();
        let mut rerun = Vec::new();
        for _ in 0..2 {
            direct.push(train_step(&mut run, &batch, &policy, AugContext::default()).unwrap().loss);
            rerun.push(
                train_step(&mut resumed, &batch, &policy, AugContext::default())
                    .unwrap()
                    .loss,
            );
        }
        assert_eq!(direct, rerun);
        assert_eq!(state_snapshot(&run), state_snapshot(&resumed));
    }

    #[test]
    fn resume_is_bit_identical_for_the_contrastive_preset() {
        resume_matches_uninterrupted(Preset::Mocov3);
    }

    #[test]
    fn resume_is_bit_identical_for_the_distillation_preset() {
        resume_matches_uninterrupted(Preset::Dinov2Variant);
    }

    #[test]
    fn mismatched_train_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.nssl");
        let cfg = toy_config(Preset::Mocov3);
        let state = TrainState::new(cfg.clone(), toy_encoder(Preset::Mocov3)).unwrap();
        save_train_state(&path, &state).unwrap();
        let mut other = cfg;
        other.base_lr *= 2.0;
        assert!(matches!(
            load_train_state(&path, &other).unwrap_err(),
            TrainerError::Checkpoint(CheckpointError::Validation(_))
        ));
    }

    #[test]
    fn partial_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.nssl");
        let cfg = toy_config(Preset::Dinov2Variant);
        let state = TrainState::new(cfg.clone(), toy_encoder(Preset::Dinov2Variant)).unwrap();
        save_train_state(&path, &state).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.nssl");
        std::fs::write(&cut, &bytes[..bytes.len() * 2 / 3]).unwrap();
        assert!(matches!(
            load_train_state(&cut, &cfg).unwrap_err(),
            TrainerError::Checkpoint(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn a_plain_encoder_checkpoint_is_not_trainer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.nssl");
        let enc = toy_encoder(Preset::Mocov3);
        let params = crate::encoder::init_params(&enc, 0).unwrap();
        save_encoder(&path, &enc, &params).unwrap();
        let err = load_train_state(&path, &toy_config(Preset::Mocov3)).unwrap_err();
        assert!(err.to_string().contains("not a trainer checkpoint"), "{err}");
    }
}
