//! Checkpoint container: magic "NSSL", little-endian, a length-prefixed
//! UTF-8 config text, then named f32 parameter blocks with explicit shapes.
//!
//! The same container carries plain encoder checkpoints (parameters only)
//! and trainer checkpoints (additional optimizer/center blocks, identified
//! by the config text).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamSet, VitConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NSSL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint validation failed: {0}")]
    Validation(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub config_text: String,
    pub blocks: Vec<Block>,
}

impl CheckpointFile {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

pub fn write_checkpoint(path: &Path, file: &CheckpointFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = file.config_text.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(file.blocks.len() as u32).to_le_bytes())?;
    for b in &file.blocks {
        let expect: usize = b.shape.iter().product();
        if expect != b.data.len() {
            return Err(CheckpointError::Validation(format!(
                "block `{}` holds {} values but shape {:?} needs {expect}",
                b.name,
                b.data.len(),
                b.shape
            )));
        }
        let name = b.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
        for &d in &b.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(b.data.len() * 4);
        for &v in &b.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_all(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    if cfg_len > 1 << 24 {
        return Err(CheckpointError::Corrupt(format!(
            "config text of {cfg_len} bytes is implausible"
        )));
    }
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_all(&mut r, &mut cfg_bytes)?;
    let config_text = String::from_utf8(cfg_bytes)
        .map_err(|_| CheckpointError::Corrupt("config text is not UTF-8".into()))?;

    let count = read_u32(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt(format!(
                "parameter name of {name_len} bytes is implausible"
            )));
        }
        let mut name = vec![0u8; name_len];
        read_all(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!(
                "rank {rank} is implausible for `{name}`"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)? as usize;
            count = count
                .checked_mul(d)
                .filter(|&c| c <= 1 << 32)
                .ok_or_else(|| {
                    CheckpointError::Corrupt(format!("shape overflow in `{name}`"))
                })?;
            shape.push(d);
        }
        let mut raw = vec![0u8; count * 4];
        read_all(&mut r, &mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(Block { name, shape, data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after last block".into()));
    }
    Ok(CheckpointFile { config_text, blocks })
}

fn read_all(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Corrupt("unexpected end of file".into())
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_all(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_all(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Blocks for every parameter in spec order.
pub(crate) fn params_to_blocks(cfg: &VitConfig, params: &ParamSet) -> Result<Vec<Block>> {
    let mut blocks = Vec::new();
    for (name, shape) in cfg.param_specs() {
        let t = params
            .get(&name)
            .map_err(|_| CheckpointError::Validation(format!("missing parameter `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::Validation(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        blocks.push(Block {
            name,
            shape,
            data: t.to_f32(),
        });
    }
    Ok(blocks)
}

/// Rebuild a validated ParamSet from blocks (untracked leaves).
pub(crate) fn blocks_to_params(
    cfg: &VitConfig,
    blocks: &[Block],
    allow_extra: bool,
) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    let expected = cfg.param_specs();
    for (name, shape) in &expected {
        let b = blocks
            .iter()
            .find(|b| &b.name == name)
            .ok_or_else(|| CheckpointError::Validation(format!("missing parameter `{name}`")))?;
        if &b.shape != shape {
            return Err(CheckpointError::Validation(format!(
                "parameter `{name}` has shape {:?} in file, config requires {shape:?}",
                b.shape
            )));
        }
        let t = Tensor::from_f32(shape, &b.data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        ps.insert(name, t)
            .map_err(|e| CheckpointError::Validation(e.to_string()))?;
    }
    if !allow_extra && blocks.len() != expected.len() {
        return Err(CheckpointError::Validation(format!(
            "file has {} blocks, config expects {}",
            blocks.len(),
            expected.len()
        )));
    }
    Ok(ps)
}

/// Write an encoder checkpoint: config as TOML plus all parameters.
pub fn save_encoder(path: &Path, cfg: &VitConfig, params: &ParamSet) -> Result<()> {
    cfg.validate()
        .map_err(|e| CheckpointError::Validation(e.to_string()))?;
    let config_text = toml::to_string(cfg)
        .map_err(|e| CheckpointError::Validation(format!("config serialization: {e}")))?;
    let blocks = params_to_blocks(cfg, params)?;
    write_checkpoint(path, &CheckpointFile { config_text, blocks })
}

/// Load an encoder checkpoint; parameters come back as untracked leaves.
pub fn load_encoder(path: &Path) -> Result<(VitConfig, ParamSet)> {
    let file = read_checkpoint(path)?;
    let cfg: VitConfig = toml::from_str(&file.config_text)
        .map_err(|e| CheckpointError::Validation(format!("config parse: {e}")))?;
    cfg.validate()
        .map_err(|e| CheckpointError::Validation(e.to_string()))?;
    let params = blocks_to_params(&cfg, &file.blocks, false)?;
    Ok((cfg, params))
}
