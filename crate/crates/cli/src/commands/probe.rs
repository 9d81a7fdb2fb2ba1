//! Linear probing of frozen embeddings: logistic regression on labels or
//! ridge regression on log1p gene counts, with stratified k-fold or
//! leave-one-slide-out splits. Outputs `probe_report.json`,
//! `probe_summary.tsv`, and the run manifest.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use nssl_core::dataio::{load_gene_counts, read_embeddings, CellManifest};
use nssl_core::probe::{
    run_probe, select_target_genes, subsample_cells, ProbeConfig, ProbeError, ProbeReport,
    ProbeTask, Splitter, Targets,
};
use nssl_core::tensor::Tensor;

use crate::manifest::{prepare_out_dir, RunRecorder};
use crate::{resolve_seed, CliError, Result};

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Embedding table (.lemb).
    #[arg(long)]
    pub embeddings: PathBuf,

    /// Cell manifest CSV with labels / slide ids.
    #[arg(long)]
    pub manifest: PathBuf,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// `cls` (labels) or `genes` (expression regression).
    #[arg(long, default_value = "cls")]
    pub task: String,

    /// Gene count table; required for the genes task.
    #[arg(long)]
    pub genes: Option<PathBuf>,

    /// Stratified k-fold split count.
    #[arg(long, default_value_t = 5, conflicts_with = "loso")]
    pub folds: usize,

    /// Leave-one-slide-out splits instead of k-fold.
    #[arg(long)]
    pub loso: bool,

    /// Panel size for the genes task, chosen by mean expression rank
    /// aggregated across slides.
    #[arg(long, default_value_t = 50)]
    pub top_genes: usize,

    /// Per-slide cap; larger slides are subsampled with a slide-keyed
    /// draw.
    #[arg(long, default_value_t = 10_000)]
    pub max_cells_per_slide: usize,

    /// Ridge penalty for the genes task.
    #[arg(long)]
    pub ridge_lambda: Option<f64>,

    /// Comma-separated l2 grid for the logistic head.
    #[arg(long, value_delimiter = ',')]
    pub l2_grid: Option<Vec<f64>>,

    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct ProbeSettings {
    task: String,
    splitter: String,
    top_genes: usize,
    max_cells_per_slide: usize,
    l2_grid: Vec<f64>,
    ridge_lambda: f64,
    cells: usize,
    classes: Option<Vec<String>>,
}

/// Full report document; `classes` maps label indices back to strings.
#[derive(Serialize)]
struct ReportDoc<'a> {
    task: &'a str,
    cells: usize,
    classes: &'a Option<Vec<String>>,
    report: &'a ProbeReport,
}

pub fn run(args: ProbeArgs) -> Result<()> {
    prepare_out_dir(&args.out)?;
    let seed = resolve_seed(args.seed, None)?;

    let emb = read_embeddings(&args.embeddings)?;
    let manifest = CellManifest::load(&args.manifest)?;

    // Manifest rows with an embedding, in manifest order.
    let present: Vec<usize> = (0..manifest.len())
        .filter(|&i| emb.row(&manifest.records()[i].cell_id).is_some())
        .collect();
    let skipped = manifest.len() - present.len();
    if skipped > 0 {
        eprintln!("warning: {skipped} manifest cells have no embedding row; skipped");
    }
    if present.is_empty() {
        return Err(CliError::Input(
            "no manifest cell has an embedding row".into(),
        ));
    }

    // Per-slide cap, keyed by slide id so slides subsample independently.
    let mut keep: HashSet<usize> = HashSet::new();
    for slide in manifest.slides() {
        let rows: Vec<usize> = present
            .iter()
            .copied()
            .filter(|&i| manifest.records()[i].slide_id == slide)
            .collect();
        for local in subsample_cells(rows.len(), args.max_cells_per_slide, slide, seed) {
            keep.insert(rows[local]);
        }
    }
    let kept: Vec<usize> = present.iter().copied().filter(|i| keep.contains(i)).collect();

    let ids: Vec<String> = kept
        .iter()
        .map(|&i| manifest.records()[i].cell_id.clone())
        .collect();
    let slides: Vec<String> = kept
        .iter()
        .map(|&i| manifest.records()[i].slide_id.clone())
        .collect();
    let matrix = emb.aligned(&ids)?;

    let splitter = if args.loso {
        Splitter::LeaveOneSlideOut
    } else {
        Splitter::StratifiedKfold {
            k: args.folds,
            seed,
        }
    };
    let cfg = ProbeConfig {
        l2_grid: args
            .l2_grid
            .clone()
            .unwrap_or_else(|| ProbeConfig::default().l2_grid),
        ridge_lambda: args.ridge_lambda.unwrap_or(1.0),
        seed,
        ..ProbeConfig::default()
    };

    let (targets, classes) = match args.task.as_str() {
        "cls" => {
            let mut names: Vec<String> = Vec::with_capacity(kept.len());
            for &i in &kept {
                let rec = &manifest.records()[i];
                names.push(rec.label.clone().ok_or_else(|| {
                    CliError::Input(format!("cell `{}` has no label", rec.cell_id))
                })?);
            }
            let classes: Vec<String> = names
                .iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .cloned()
                .collect();
            let labels: Vec<usize> = names
                .iter()
                .map(|n| classes.binary_search(n).expect("built from these names"))
                .collect();
            (Targets::Labels(labels), Some(classes))
        }
        "genes" => {
            let path = args.genes.as_ref().ok_or_else(|| {
                CliError::Input("the genes task needs --genes <counts table>".into())
            })?;
            let table = load_gene_counts(path)?;
            let mut slide_order: Vec<&String> = Vec::new();
            for s in &slides {
                if !slide_order.contains(&s) {
                    slide_order.push(s);
                }
            }
            let mut per_slide = Vec::with_capacity(slide_order.len());
            for s in &slide_order {
                let slide_ids: Vec<String> = ids
                    .iter()
                    .zip(&slides)
                    .filter(|(_, sl)| *sl == *s)
                    .map(|(id, _)| id.clone())
                    .collect();
                per_slide.push(table.aligned(&slide_ids)?);
            }
            let selection = select_target_genes(&table.genes, &per_slide, args.top_genes)?;
            for w in &selection.warnings {
                eprintln!("warning: {w}");
            }
            let cols: Vec<usize> = selection
                .genes
                .iter()
                .map(|g| table.genes.iter().position(|t| t == g).expect("selected"))
                .collect();
            let full = table.aligned(&ids)?;
            let g = table.genes.len();
            let data = full.data();
            let mut panel = Vec::with_capacity(ids.len() * cols.len());
            for row in 0..ids.len() {
                for &c in &cols {
                    panel.push(data[row * g + c]);
                }
            }
            let counts = Tensor::from_vec(&[ids.len(), cols.len()], panel)?;
            (
                Targets::GeneCounts {
                    counts,
                    genes: selection.genes,
                },
                None,
            )
        }
        other => {
            return Err(CliError::Input(format!(
                "unknown --task `{other}`; expected `cls` or `genes`"
            )))
        }
    };

    let task = ProbeTask {
        embeddings: matrix,
        targets,
        slides,
        splitter,
    };
    let report = run_probe(&task, &cfg).map_err(|e| match e {
        // Label indices are internal; report the class by name.
        ProbeError::MissingClass { fold, class } => CliError::Input(match &classes {
            Some(names) if class < names.len() => format!(
                "fold `{fold}` has no training samples of class `{}`",
                names[class]
            ),
            _ => format!("fold `{fold}` has no training samples of class {class}"),
        }),
        ProbeError::TooFewPerClass { class, got, need } => CliError::Input(match &classes {
            Some(names) if class < names.len() => format!(
                "class `{}` has {got} members; {need}-fold stratification needs at least {need}",
                names[class]
            ),
            _ => format!(
                "class {class} has {got} members; {need}-fold stratification needs at least {need}"
            ),
        }),
        other => CliError::from(other),
    })?;

    let doc = ReportDoc {
        task: &args.task,
        cells: ids.len(),
        classes: &classes,
        report: &report,
    };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| CliError::Input(format!("report serialization: {e}")))?;
    std::fs::write(args.out.join("probe_report.json"), json + "\n")?;

    let mut tsv = String::new();
    match &report {
        ProbeReport::Classification(r) => {
            for w in &r.warnings {
                writeln!(tsv, "# warning: {w}").unwrap();
            }
            writeln!(tsv, "metric\tmean\tsd").unwrap();
            for (name, m) in [
                ("balanced_accuracy", &r.balanced_accuracy),
                ("auc", &r.auc),
                ("aupr", &r.aupr),
                ("f1_macro", &r.f1_macro),
                ("f1_weighted", &r.f1_weighted),
            ] {
                writeln!(tsv, "{name}\t{}\t{}", m.mean, m.sd).unwrap();
            }
            println!(
                "balanced accuracy {:.4} +/- {:.4} over {} folds",
                r.balanced_accuracy.mean,
                r.balanced_accuracy.sd,
                r.fold_names.len()
            );
        }
        ProbeReport::Regression(r) => {
            for w in &r.warnings {
                writeln!(tsv, "# warning: {w}").unwrap();
            }
            writeln!(tsv, "# {} (fold, gene) pairs skipped for zero variance", r.excluded).unwrap();
            writeln!(tsv, "metric\tmean\tsd").unwrap();
            writeln!(tsv, "mean_pcc\t{}\t{}", r.mean_pcc.mean, r.mean_pcc.sd).unwrap();
            writeln!(tsv, "gene\tpcc").unwrap();
            for (g, pcc) in r.genes.iter().zip(&r.per_gene_pcc) {
                match pcc {
                    Some(v) => writeln!(tsv, "{g}\t{v}").unwrap(),
                    None => writeln!(tsv, "{g}\tnan").unwrap(),
                }
            }
            println!(
                "mean PCC {:.4} +/- {:.4} over {} genes",
                r.mean_pcc.mean,
                r.mean_pcc.sd,
                r.genes.len()
            );
        }
    }
    std::fs::write(args.out.join("probe_summary.tsv"), tsv)?;

    let settings = ProbeSettings {
        task: args.task.clone(),
        splitter: if args.loso {
            "leave_one_slide_out".into()
        } else {
            format!("stratified_{}fold", args.folds)
        },
        top_genes: args.top_genes,
        max_cells_per_slide: args.max_cells_per_slide,
        l2_grid: cfg.l2_grid.clone(),
        ridge_lambda: cfg.ridge_lambda,
        cells: ids.len(),
        classes,
    };
    let mut rec = RunRecorder::new("probe", seed, serde_json::to_value(&settings).unwrap());
    rec.add_input(&args.embeddings)?;
    rec.add_input(&args.manifest)?;
    if let Some(path) = &args.genes {
        rec.add_input(path)?;
    }
    rec.finish(&args.out)
}
