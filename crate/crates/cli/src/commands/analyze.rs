//! Spatial structure of gene expression over the embedding neighborhood
//! graph: Moran's I per gene on a kNN graph built from the embeddings.
//! Outputs `morans_i.tsv` sorted by descending I, and the run manifest.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use nssl_core::analysis::{knn_graph, morans_i, AnalysisError};
use nssl_core::dataio::{load_gene_counts, read_embeddings};
use nssl_core::probe::select_target_genes;

use crate::manifest::{prepare_out_dir, RunRecorder};
use crate::{CliError, Result};

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Embedding table (.lemb).
    #[arg(long)]
    pub embeddings: PathBuf,

    /// Gene count table covering every embedded cell.
    #[arg(long)]
    pub genes: PathBuf,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Neighbors per cell in the graph.
    #[arg(long, default_value_t = 15)]
    pub k: usize,

    /// Restrict to the top genes by mean expression; all genes when
    /// omitted.
    #[arg(long)]
    pub top: Option<usize>,

    /// Count transform before scoring: `log1p` or `raw`.
    #[arg(long, default_value = "log1p")]
    pub normalize: String,

    /// Symmetrize the graph (union of directed edges) before scoring.
    #[arg(long)]
    pub symmetrize: bool,
}

#[derive(Serialize)]
struct AnalyzeSettings {
    k: usize,
    top: Option<usize>,
    normalize: String,
    symmetrize: bool,
    cells: usize,
    genes: usize,
}

pub fn run(args: AnalyzeArgs) -> Result<()> {
    prepare_out_dir(&args.out)?;
    if args.normalize != "log1p" && args.normalize != "raw" {
        return Err(CliError::Input(format!(
            "unknown --normalize `{}`; expected `log1p` or `raw`",
            args.normalize
        )));
    }

    let emb = read_embeddings(&args.embeddings)?;
    let ids = emb.ids().to_vec();
    let matrix = emb.matrix();
    let table = load_gene_counts(&args.genes)?;
    let counts = table.aligned(&ids)?;

    let panel: Vec<String> = match args.top {
        // One pseudo-slide: rank by mean expression over the whole table.
        Some(top) => {
            let selection = select_target_genes(&table.genes, &[counts.clone()], top)?;
            for w in &selection.warnings {
                eprintln!("warning: {w}");
            }
            selection.genes
        }
        None => table.genes.clone(),
    };

    let graph = knn_graph(&matrix, args.k)?;
    let graph = if args.symmetrize {
        graph.symmetrized()
    } else {
        graph
    };

    let g = table.genes.len();
    let data = counts.data();
    let mut scored: Vec<(String, f64)> = Vec::new();
    let mut flat: Vec<String> = Vec::new();
    for gene in &panel {
        let col = table.genes.iter().position(|t| t == gene).expect("panel");
        let x: Vec<f64> = (0..ids.len())
            .map(|row| {
                let v = data[row * g + col];
                if args.normalize == "log1p" {
                    v.ln_1p()
                } else {
                    v
                }
            })
            .collect();
        match morans_i(&graph, &x) {
            Ok(v) => scored.push((gene.clone(), v)),
            Err(AnalysisError::ZeroVariance(_)) => flat.push(gene.clone()),
            Err(e) => return Err(e.into()),
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    flat.sort();

    let mut tsv = String::new();
    writeln!(
        tsv,
        "# k={}\tnormalize={}\tsymmetrized={}\tcells={}",
        args.k,
        args.normalize,
        args.symmetrize,
        ids.len()
    )
    .unwrap();
    writeln!(tsv, "gene\tmorans_i\tstatus").unwrap();
    for (gene, v) in &scored {
        writeln!(tsv, "{gene}\t{v}\tok").unwrap();
    }
    for gene in &flat {
        writeln!(tsv, "{gene}\tnan\tzero_variance").unwrap();
    }
    std::fs::write(args.out.join("morans_i.tsv"), tsv)?;

    match scored.first() {
        Some((gene, v)) => println!(
            "scored {} genes over {} cells; top: {gene} (I = {v:.4})",
            scored.len() + flat.len(),
            ids.len()
        ),
        None => println!("no gene had variance to score"),
    }

    let settings = AnalyzeSettings {
        k: args.k,
        top: args.top,
        normalize: args.normalize.clone(),
        symmetrize: args.symmetrize,
        cells: ids.len(),
        genes: panel.len(),
    };
    let mut rec = RunRecorder::new("analyze", 0, serde_json::to_value(&settings).unwrap());
    rec.add_input(&args.embeddings)?;
    rec.add_input(&args.genes)?;
    rec.finish(&args.out)
}
