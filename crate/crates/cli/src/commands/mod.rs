//! One module per subcommand, plus the plumbing they share: manifest
//! loading with patch extraction, chunked encoding, and the exclusion
//! report. Everything written here is byte-stable across runs and worker
//! counts; timestamps live only in the run manifest.

use std::path::{Path, PathBuf};

use nssl_core::dataio::{extract_patches, CellManifest, ExcludedCell, Extraction};
use nssl_core::encoder::{encode, ParamSet, VitConfig};
use nssl_core::pixels::RgbPatch;
use nssl_core::tensor::Tensor;

use crate::{CliError, Result};

pub mod analyze;
pub mod curate;
pub mod embed;
pub mod flops;
pub mod probe;
pub mod robustness;
pub mod train;

/// Loads a manifest and extracts one `size`-pixel window per cell. The
/// image root defaults to the manifest's directory.
pub fn load_cells(
    manifest_path: &Path,
    images: Option<&Path>,
    size: usize,
) -> Result<(CellManifest, Extraction)> {
    let manifest = CellManifest::load(manifest_path)?;
    let root: PathBuf = match images {
        Some(dir) => dir.to_path_buf(),
        None => manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let extraction = extract_patches(&manifest, &root, size)?;
    if extraction.patches.is_empty() {
        return Err(CliError::Input(format!(
            "no usable cells: all {} manifest rows were excluded",
            manifest.len()
        )));
    }
    Ok((manifest, extraction))
}

/// Writes `exclusions.tsv` (cell_id, reason) under `out`. Always written,
/// even when empty, so downstream tooling can rely on the file.
pub fn write_exclusions(out: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut text = String::from("cell_id\treason\n");
    for (id, reason) in rows {
        text.push_str(&format!("{id}\t{reason}\n"));
    }
    let path = out.join("exclusions.tsv");
    std::fs::write(&path, text)
        .map_err(|e| CliError::Input(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

/// Exclusion rows as written to `exclusions.tsv`.
pub fn exclusion_rows(excluded: &[ExcludedCell]) -> Vec<(String, String)> {
    excluded
        .iter()
        .map(|e| (e.cell_id.clone(), e.reason.to_string()))
        .collect()
}

/// Forward pass over all patches in fixed-size chunks; rows come back in
/// input order regardless of chunking.
pub fn encode_all(
    cfg: &VitConfig,
    params: &ParamSet,
    patches: &[RgbPatch],
    batch: usize,
) -> Result<Tensor> {
    if batch == 0 {
        return Err(CliError::Input("--batch must be at least 1".into()));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut dims = 0;
    for chunk in patches.chunks(batch) {
        let z = encode(cfg, params, chunk)?;
        dims = z.shape()[1];
        rows.extend_from_slice(z.data());
    }
    Ok(Tensor::from_vec(&[patches.len(), dims], rows)?)
}

/// Picks encoder weights out of a checkpoint by role name.
pub fn select_weights<'a>(
    state: &'a nssl_core::trainer::TrainState,
    which: &str,
) -> Result<&'a ParamSet> {
    match which {
        "teacher" => Ok(&state.teacher),
        "student" => Ok(&state.student),
        other => Err(CliError::Input(format!(
            "unknown --weights `{other}`; expected `teacher` or `student`"
        ))),
    }
}
