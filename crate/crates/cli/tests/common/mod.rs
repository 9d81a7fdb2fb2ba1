//! Helpers shared by the CLI integration suites: synthetic datasets on
//! disk and subprocess plumbing around the built binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nssl_core::synth::{sample_dataset, write_dataset, StainCondition, SynthDataset};

pub const BIN: &str = env!("CARGO_BIN_EXE_nssl");

/// Tile pitch that fits the 60 px training window with margin.
pub const TILE: usize = 64;

/// Renders `cells` nuclei across `slides` images under the reference stain
/// and returns the manifest path.
pub fn gen_dataset(dir: &Path, cells: usize, slides: usize, seed: u64) -> PathBuf {
    let ds = sample_dataset(cells, slides, seed);
    write_dataset(dir, &ds, &StainCondition::reference(), TILE)
        .expect("render dataset")
        .manifest
}

pub fn gen_dataset_under(
    dir: &Path,
    ds: &SynthDataset,
    cond: &StainCondition,
) -> PathBuf {
    write_dataset(dir, ds, cond, TILE).expect("render dataset").manifest
}

/// Runs the binary with a scrubbed seed environment.
pub fn nssl(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("NSSL_SEED")
        .output()
        .expect("spawn nssl")
}

pub fn nssl_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("NSSL_SEED")
        .env(key, value)
        .output()
        .expect("spawn nssl")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

pub fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// A small fast-training config; tests pass it via --config.
pub fn tiny_train_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "preset = \"mocov3\"\n\
         batch_size = 8\n\
         dim = 16\n\
         depth = 1\n\
         heads = 2\n\
         projector = [32, 16]\n\
         predictor = [32]\n\
         policy = \"a0\"\n",
    )
    .expect("write config");
    path
}
