//! Frozen-encoder embedding of manifest cells. Patches are extracted at
//! the encoder's input size (the evaluation convention: no rotation, the
//! window centered on the centroid). Outputs `embeddings.lemb`,
//! `exclusions.tsv`, and the run manifest.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use nssl_core::dataio::write_embeddings;
use nssl_core::trainer::{load_train_state, read_train_config};

use crate::manifest::{prepare_out_dir, RunRecorder};
use crate::Result;

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Cell manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,

    /// Image root for relative manifest paths; defaults to the manifest's
    /// directory.
    #[arg(long)]
    pub images: Option<PathBuf>,

    /// Trainer checkpoint to embed with.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Forward-pass chunk size.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,

    /// Which encoder to use: `teacher` (default) or `student`.
    #[arg(long, default_value = "teacher")]
    pub weights: String,
}

#[derive(Serialize)]
struct EmbedSettings<'a> {
    checkpoint: String,
    weights: &'a str,
    batch: usize,
    image_size: usize,
    step: u64,
}

pub fn run(args: EmbedArgs) -> Result<()> {
    prepare_out_dir(&args.out)?;

    let (train_cfg, vit_cfg) = read_train_config(&args.checkpoint)?;
    let state = load_train_state(&args.checkpoint, &train_cfg)?;
    let params = super::select_weights(&state, &args.weights)?;

    let (_, extraction) =
        super::load_cells(&args.manifest, args.images.as_deref(), vit_cfg.image_size)?;
    super::write_exclusions(&args.out, &super::exclusion_rows(&extraction.excluded))?;

    let matrix = super::encode_all(&vit_cfg, params, &extraction.patches, args.batch)?;
    let path = args.out.join("embeddings.lemb");
    write_embeddings(&path, &extraction.cell_ids, &matrix)?;

    println!(
        "embedded {} cells ({} excluded) into {} ({} dims)",
        extraction.cell_ids.len(),
        extraction.excluded.len(),
        path.display(),
        matrix.shape()[1]
    );

    let settings = EmbedSettings {
        checkpoint: args.checkpoint.display().to_string(),
        weights: &args.weights,
        batch: args.batch,
        image_size: vit_cfg.image_size,
        step: state.step,
    };
    let mut rec = RunRecorder::new("embed", 0, serde_json::to_value(&settings).unwrap());
    rec.add_input(&args.manifest)?;
    rec.add_input(&args.checkpoint)?;
    rec.finish(&args.out)
}
