//! Per-block forward-pass FLOP counts for an encoder preset. Without
//! `--out` this is a pure query and leaves no artifacts.

use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use nssl_core::encoder::{vit_flops, VitConfig};

use crate::manifest::{prepare_out_dir, RunRecorder};
use crate::{CliError, Result};

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Encoder preset to count.
    #[arg(long, default_value = "vits8")]
    pub preset: String,

    /// Also write the table to `<out>/flops.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn preset_config(name: &str) -> Result<VitConfig> {
    match name {
        "vits8" => Ok(VitConfig::vit_s_8()),
        other => Err(CliError::Input(format!(
            "unknown preset `{other}`; available: vits8"
        ))),
    }
}

pub fn run(args: FlopsArgs) -> Result<()> {
    let cfg = preset_config(&args.preset)?;
    let breakdown = vit_flops(&cfg);

    let mut table = String::new();
    for (name, count) in breakdown.items() {
        table.push_str(&format!("{name}\t{count}\n"));
    }
    table.push_str(&format!("total\t{}\n", breakdown.total()));

    print!("{table}");
    println!(
        "{}: {:.4} GFLOPs per forward pass at {}x{}",
        args.preset, breakdown.giga(), cfg.image_size, cfg.image_size
    );

    if let Some(out) = &args.out {
        prepare_out_dir(out)?;
        let path = out.join("flops.tsv");
        std::fs::write(&path, &table)
            .map_err(|e| CliError::Input(format!("writing {}: {e}", path.display())))?;
        let rec = RunRecorder::new("flops", 0, json!({ "preset": args.preset }));
        rec.finish(out)?;
    }
    Ok(())
}
