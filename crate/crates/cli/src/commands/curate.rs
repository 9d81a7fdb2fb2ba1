//! Representative-slide selection: k-medoids over slide-level embeddings.
//! The medoid ids land in `whitelist.txt`; the full assignment with
//! distances in `assignment.tsv`.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use nssl_core::analysis::{kmedoids, DistanceMatrix};
use nssl_core::dataio::read_embeddings;

use crate::manifest::{prepare_out_dir, RunRecorder};
use crate::{resolve_seed, Result};

#[derive(Args, Debug)]
pub struct CurateArgs {
    /// Embedding table (.lemb), one row per candidate (typically a slide).
    #[arg(long)]
    pub embeddings: PathBuf,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Number of medoids to select.
    #[arg(long)]
    pub clusters: usize,

    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct CurateSettings {
    clusters: usize,
    candidates: usize,
}

pub fn run(args: CurateArgs) -> Result<()> {
    prepare_out_dir(&args.out)?;
    let seed = resolve_seed(args.seed, None)?;

    let emb = read_embeddings(&args.embeddings)?;
    let matrix = emb.matrix();
    let d = DistanceMatrix::from_embeddings(&matrix)?;
    let result = kmedoids(&d, args.clusters, seed)?;

    let mut whitelist = String::new();
    for &m in &result.medoids {
        writeln!(whitelist, "{}", emb.ids()[m]).unwrap();
    }
    std::fs::write(args.out.join("whitelist.txt"), whitelist)?;

    let mut tsv = String::from("id\tmedoid\tdistance\n");
    for (i, &slot) in result.assignment.iter().enumerate() {
        let m = result.medoids[slot];
        writeln!(tsv, "{}\t{}\t{}", emb.ids()[i], emb.ids()[m], d.get(i, m)).unwrap();
    }
    std::fs::write(args.out.join("assignment.tsv"), tsv)?;

    println!(
        "{} medoids over {} candidates, total cost {}",
        result.medoids.len(),
        emb.len(),
        result.cost
    );

    let settings = CurateSettings {
        clusters: args.clusters,
        candidates: emb.len(),
    };
    let mut rec = RunRecorder::new("curate", seed, serde_json::to_value(&settings).unwrap());
    rec.add_input(&args.embeddings)?;
    rec.finish(&args.out)
}
