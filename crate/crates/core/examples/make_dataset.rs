//! Renders a synthetic nucleus dataset the CLI can train on: slide PNGs,
//! a cell manifest, and a gene count table.
//!
//! Usage: make_dataset <cells> <slides> <seed> <dir>

use std::path::Path;

use nssl_core::synth::{sample_dataset, write_dataset, write_gene_table, StainCondition};

const TILE: usize = 64;
const GENES: usize = 30;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 5 {
        eprintln!("usage: make_dataset <cells> <slides> <seed> <dir>");
        std::process::exit(1);
    }
    let cells: usize = args[1].parse().expect("cells");
    let slides: usize = args[2].parse().expect("slides");
    let seed: u64 = args[3].parse().expect("seed");
    let dir = Path::new(&args[4]);
    std::fs::create_dir_all(dir).expect("create dir");

    let ds = sample_dataset(cells, slides, seed);
    let written = write_dataset(dir, &ds, &StainCondition::reference(), TILE).expect("render");
    write_gene_table(&dir.join("genes.csv"), &ds, GENES, seed).expect("genes");
    println!("{}", written.manifest.display());
}
