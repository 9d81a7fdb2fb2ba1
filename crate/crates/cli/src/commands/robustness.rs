//! Embedding robustness to stain normalization: every cell is re-rendered
//! against each reference basis, re-embedded, and compared to the original
//! embedding by RMSE, cosine, and top-k neighborhood overlap in the
//! original PCA space. Cells that fail normalization under any reference
//! are excluded from all conditions so the matrices stay row-aligned.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use nssl_core::analysis::shift_metrics;
use nssl_core::dataio::{load_image, write_embeddings};
use nssl_core::pixels::RgbPatch;
use nssl_core::probe::{run_probe, ProbeConfig, ProbeReport, ProbeTask, Splitter, Targets};
use nssl_core::stain::{estimate_stain_basis, normalize_to_reference, StainBasis};
use nssl_core::trainer::{load_train_state, read_train_config};

use crate::manifest::{prepare_out_dir, RunRecorder};
use crate::{resolve_seed, CliError, Result};

#[derive(Args, Debug)]
pub struct RobustnessArgs {
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

    /// Reference images, one stain condition each.
    #[arg(long, required = true, num_args = 1..)]
    pub references: Vec<PathBuf>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Neighborhood size for the overlap metric.
    #[arg(long, default_value_t = 100)]
    pub k: usize,

    /// PCA dimension of the shared comparison space (capped at the
    /// embedding width).
    #[arg(long, default_value_t = 50)]
    pub pca_dim: usize,

    /// Forward-pass chunk size.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,

    /// Which encoder to use: `teacher` (default) or `student`.
    #[arg(long, default_value = "teacher")]
    pub weights: String,

    /// Also probe labels per condition.
    #[arg(long)]
    pub probe: bool,

    /// Fold count for the per-condition probe.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,

    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct RobustnessSettings {
    checkpoint: String,
    weights: String,
    conditions: Vec<String>,
    k: usize,
    pca_dim: usize,
    batch: usize,
    probe: bool,
    folds: usize,
    cells: usize,
}

/// One name per reference: file stems, or index-prefixed stems when they
/// collide.
fn condition_names(references: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = references
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "reference".into())
        })
        .collect();
    let mut unique = stems.clone();
    unique.sort();
    unique.dedup();
    if unique.len() == stems.len() {
        stems
    } else {
        stems
            .into_iter()
            .enumerate()
            .map(|(i, s)| format!("ref{i}_{s}"))
            .collect()
    }
}

pub fn run(args: RobustnessArgs) -> Result<()> {
    prepare_out_dir(&args.out)?;
    let seed = resolve_seed(args.seed, None)?;

    let (train_cfg, vit_cfg) = read_train_config(&args.checkpoint)?;
    let state = load_train_state(&args.checkpoint, &train_cfg)?;
    let params = super::select_weights(&state, &args.weights)?;

    let (manifest, extraction) =
        super::load_cells(&args.manifest, args.images.as_deref(), vit_cfg.image_size)?;

    let names = condition_names(&args.references);
    let mut bases: Vec<StainBasis> = Vec::with_capacity(args.references.len());
    for (path, name) in args.references.iter().zip(&names) {
        let img = load_image(path)?;
        let basis = estimate_stain_basis(&img).map_err(|e| {
            CliError::Input(format!("reference `{name}` ({}): {e}", path.display()))
        })?;
        bases.push(basis);
    }

    // Normalize every kept cell under every basis; one failure drops the
    // cell everywhere.
    let normalized: Vec<Vec<std::result::Result<RgbPatch, String>>> = extraction
        .patches
        .par_iter()
        .map(|p| {
            bases
                .iter()
                .zip(&names)
                .map(|(b, name)| {
                    normalize_to_reference(p, b).map_err(|e| format!("`{name}`: {e}"))
                })
                .collect()
        })
        .collect();

    let mut exclusions = super::exclusion_rows(&extraction.excluded);
    let mut kept_rows: Vec<usize> = Vec::new();
    for (row, conds) in normalized.iter().enumerate() {
        match conds.iter().find_map(|r| r.as_ref().err()) {
            None => kept_rows.push(row),
            Some(reason) => exclusions.push((
                extraction.cell_ids[row].clone(),
                format!("stain normalization under {reason}"),
            )),
        }
    }
    super::write_exclusions(&args.out, &exclusions)?;
    let n = kept_rows.len();
    if n <= args.k {
        return Err(CliError::Input(format!(
            "overlap k = {} needs more than {n} normalizable cells",
            args.k
        )));
    }

    let ids: Vec<String> = kept_rows
        .iter()
        .map(|&r| extraction.cell_ids[r].clone())
        .collect();
    let orig_patches: Vec<RgbPatch> = kept_rows
        .iter()
        .map(|&r| extraction.patches[r].clone())
        .collect();

    let orig = super::encode_all(&vit_cfg, params, &orig_patches, args.batch)?;
    let mut conditions = Vec::with_capacity(bases.len());
    for c in 0..bases.len() {
        let patches: Vec<RgbPatch> = kept_rows
            .iter()
            .map(|&r| normalized[r][c].as_ref().expect("kept rows all normalized").clone())
            .collect();
        conditions.push(super::encode_all(&vit_cfg, params, &patches, args.batch)?);
    }

    let report = shift_metrics(&orig, &conditions, args.k, args.pca_dim)?;

    let emb_dir = args.out.join("embeddings");
    prepare_out_dir(&emb_dir)?;
    write_embeddings(&emb_dir.join("orig.lemb"), &ids, &orig)?;
    for (name, cond) in names.iter().zip(&conditions) {
        write_embeddings(&emb_dir.join(format!("{name}.lemb")), &ids, cond)?;
    }

    let mut tsv = String::new();
    writeln!(tsv, "# k={}\tpca_dim={}\tcells={n}", args.k, args.pca_dim).unwrap();
    writeln!(tsv, "condition\trmse\tcosine\toverlap").unwrap();
    for (name, c) in names.iter().zip(&report.conditions) {
        writeln!(tsv, "{name}\t{}\t{}\t{}", c.rmse, c.cosine, c.overlap).unwrap();
    }
    writeln!(
        tsv,
        "mean\t{}\t{}\t{}",
        report.rmse.mean, report.cosine.mean, report.overlap.mean
    )
    .unwrap();
    writeln!(
        tsv,
        "sd\t{}\t{}\t{}",
        report.rmse.sd, report.cosine.sd, report.overlap.sd
    )
    .unwrap();
    std::fs::write(args.out.join("shift_report.tsv"), tsv)?;

    println!(
        "{} conditions over {n} cells: overlap {:.4} +/- {:.4}, rmse {:.4}, cosine {:.4}",
        names.len(),
        report.overlap.mean,
        report.overlap.sd,
        report.rmse.mean,
        report.cosine.mean
    );

    if args.probe {
        let labeled: Vec<String> = kept_rows
            .iter()
            .map(|&r| {
                let id = &extraction.cell_ids[r];
                manifest
                    .records()
                    .iter()
                    .find(|rec| &rec.cell_id == id)
                    .and_then(|rec| rec.label.clone())
                    .ok_or_else(|| CliError::Input(format!("cell `{id}` has no label")))
            })
            .collect::<Result<_>>()?;
        let classes: Vec<String> = {
            let mut c: Vec<String> = labeled.clone();
            c.sort();
            c.dedup();
            c
        };
        let labels: Vec<usize> = labeled
            .iter()
            .map(|l| classes.binary_search(l).expect("built from these labels"))
            .collect();

        let mut tsv = String::from("condition\tbalanced_accuracy\tsd\n");
        for (name, emb) in std::iter::once((&"orig".to_string(), &orig))
            .chain(names.iter().zip(&conditions))
        {
            let task = ProbeTask {
                embeddings: emb.clone(),
                targets: Targets::Labels(labels.clone()),
                slides: Vec::new(),
                splitter: Splitter::StratifiedKfold {
                    k: args.folds,
                    seed,
                },
            };
            let probe_report = run_probe(&task, &ProbeConfig { seed, ..ProbeConfig::default() })?;
            if let ProbeReport::Classification(r) = probe_report {
                writeln!(
                    tsv,
                    "{name}\t{}\t{}",
                    r.balanced_accuracy.mean, r.balanced_accuracy.sd
                )
                .unwrap();
            }
        }
        std::fs::write(args.out.join("probe_by_condition.tsv"), tsv)?;
    }

    let settings = RobustnessSettings {
        checkpoint: args.checkpoint.display().to_string(),
        weights: args.weights.clone(),
        conditions: names,
        k: args.k,
        pca_dim: args.pca_dim,
        batch: args.batch,
        probe: args.probe,
        folds: args.folds,
        cells: n,
    };
    let mut rec = RunRecorder::new("robustness", seed, serde_json::to_value(&settings).unwrap());
    rec.add_input(&args.manifest)?;
    rec.add_input(&args.checkpoint)?;
    for path in &args.references {
        rec.add_input(path)?;
    }
    rec.finish(&args.out)
}
