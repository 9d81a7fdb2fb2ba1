//! Dataset ingestion: cell manifests, source images, nucleus-window
//! extraction, gene-count tables, and the embedding container.

mod embfile;
mod genes;

pub use embfile::{read_embeddings, write_embeddings, Embeddings};
pub use genes::{load_gene_counts, write_gene_counts, GeneCounts};

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::pixels::{PixelError, RgbPatch};

/// Source window side for nucleus extraction.
pub const SOURCE_PATCH_SIZE: usize = 60;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse {
        row: usize,
        col: usize,
        msg: String,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid embeddings: {0}")]
    Embeddings(String),
    #[error("invalid gene table: {0}")]
    Genes(String),
    #[error(transparent)]
    Pixel(#[from] PixelError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell_id: String,
    pub image_path: PathBuf,
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub slide_id: String,
    pub organ: String,
    pub label: Option<String>,
    /// Path to a gene-count table holding this cell's row, if any.
    pub counts: Option<PathBuf>,
}

/// Parsed cell manifest; row order is preserved.
#[derive(Debug, Clone)]
pub struct CellManifest {
    records: Vec<CellRecord>,
}

const REQUIRED_COLUMNS: [&str; 6] = [
    "cell_id",
    "image_path",
    "centroid_x",
    "centroid_y",
    "slide_id",
    "organ",
];

impl CellManifest {
    pub fn records(&self) -> &[CellRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct slide ids in first-appearance order.
    pub fn slides(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.slide_id.as_str()) {
                out.push(&r.slide_id);
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<CellManifest> {
        let mut text = String::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    /// Comma-separated UTF-8 with a header row; `#` starts a comment line.
    /// The six required columns may be followed by optional `label` and
    /// `counts` columns in any order.
    pub fn parse(text: &str) -> Result<CellManifest> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());

        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| DataError::Manifest(format!("unreadable header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut index = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if index.insert(h.as_str(), i).is_some() {
                return Err(DataError::Manifest(format!("duplicate column `{h}`")));
            }
        }
        for col in REQUIRED_COLUMNS {
            if !index.contains_key(col) {
                return Err(DataError::Manifest(format!("missing column `{col}`")));
            }
        }
        for h in &headers {
            if !REQUIRED_COLUMNS.contains(&h.as_str()) && h != "label" && h != "counts" {
                return Err(DataError::Manifest(format!("unknown column `{h}`")));
            }
        }

        let field = |rec: &csv::StringRecord, col: &str| -> Option<String> {
            index
                .get(col)
                .and_then(|&i| rec.get(i))
                .map(str::to_string)
                .filter(|s| !s.is_empty())
        };

        let mut records = Vec::new();
        let mut seen_ids: HashMap<String, usize> = HashMap::new();
        for (row, rec) in reader.records().enumerate() {
            let row_no = row + 2; // 1-based, after the header
            let rec = rec.map_err(|e| DataError::Parse {
                row: row_no,
                col: 0,
                msg: e.to_string(),
            })?;
            let required = |col: &str| {
                field(&rec, col).ok_or_else(|| DataError::Parse {
                    row: row_no,
                    col: index[col] + 1,
                    msg: format!("empty `{col}`"),
                })
            };
            let coord = |col: &str| -> Result<f64> {
                let raw = required(col)?;
                let v: f64 = raw.parse().map_err(|_| DataError::Parse {
                    row: row_no,
                    col: index[col] + 1,
                    msg: format!("`{raw}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Parse {
                        row: row_no,
                        col: index[col] + 1,
                        msg: format!("non-finite coordinate {v}"),
                    });
                }
                Ok(v)
            };

            let cell_id = required("cell_id")?;
            if let Some(first) = seen_ids.insert(cell_id.clone(), row_no) {
                return Err(DataError::Manifest(format!(
                    "duplicate cell_id `{cell_id}` on rows {first} and {row_no}"
                )));
            }
            records.push(CellRecord {
                cell_id,
                image_path: PathBuf::from(required("image_path")?),
                centroid_x: coord("centroid_x")?,
                centroid_y: coord("centroid_y")?,
                slide_id: required("slide_id")?,
                organ: required("organ")?,
                label: field(&rec, "label"),
                counts: field(&rec, "counts").map(PathBuf::from),
            });
        }
        if records.is_empty() {
            return Err(DataError::Manifest("no data rows".into()));
        }
        Ok(CellManifest { records })
    }
}

/// Why a cell was skipped during extraction.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum Exclusion {
    #[error(
        "{size}x{size} window at ({x0}, {y0}) crosses the {width}x{height} image bounds"
    )]
    BorderClip {
        x0: i64,
        y0: i64,
        size: usize,
        width: usize,
        height: usize,
    },
}

/// Copies the `size`x`size` window centered on the rounded centroid, or
/// reports why it cannot. No padding is ever introduced.
pub fn extract_patch(
    image: &RgbPatch,
    centroid_x: f64,
    centroid_y: f64,
    size: usize,
) -> std::result::Result<RgbPatch, Exclusion> {
    let half = (size / 2) as i64;
    let x0 = centroid_x.round() as i64 - half;
    let y0 = centroid_y.round() as i64 - half;
    let (w, h) = (image.width(), image.height());
    if x0 < 0 || y0 < 0 || x0 + size as i64 > w as i64 || y0 + size as i64 > h as i64 {
        return Err(Exclusion::BorderClip {
            x0,
            y0,
            size,
            width: w,
            height: h,
        });
    }
    let mut out = RgbPatch::new(size, size).expect("size checked nonzero");
    for y in 0..size {
        for x in 0..size {
            out.set(x, y, image.get(x0 as usize + x, y0 as usize + y));
        }
    }
    Ok(out)
}

/// Loads an 8-bit PNG into unit-range floats (`v / 255`).
pub fn load_image(path: &Path) -> Result<RgbPatch> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => io_err(path, io),
            other => DataError::Corrupt(format!("{}: {other}", path.display())),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Ok(RgbPatch::from_data(w, h, data)?)
}

/// Writes unit-range floats as an 8-bit PNG (values clamped, then rounded).
pub fn save_image(path: &Path, patch: &RgbPatch) -> Result<()> {
    let (w, h) = (patch.width(), patch.height());
    let bytes: Vec<u8> = patch
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    img.save(path)
        .map_err(|e| DataError::Corrupt(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// One excluded cell with its reason, reported exactly once.
#[derive(Debug, Clone)]
pub struct ExcludedCell {
    pub cell_id: String,
    pub reason: Exclusion,
}

/// Bulk extraction result; `cell_ids` and `patches` stay aligned in
/// manifest order.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub cell_ids: Vec<String>,
    pub patches: Vec<RgbPatch>,
    pub excluded: Vec<ExcludedCell>,
}

/// Extracts the source window for every manifest cell. Images load once
/// each and shard across workers; results merge back in manifest order, so
/// the output is independent of worker count and row order.
pub fn extract_patches(
    manifest: &CellManifest,
    root: &Path,
    size: usize,
) -> Result<Extraction> {
    let mut by_image: Vec<(PathBuf, Vec<usize>)> = Vec::new();
    let mut image_index: HashMap<&Path, usize> = HashMap::new();
    for (row, rec) in manifest.records().iter().enumerate() {
        match image_index.get(rec.image_path.as_path()) {
            Some(&i) => by_image[i].1.push(row),
            None => {
                image_index.insert(&rec.image_path, by_image.len());
                let resolved = if rec.image_path.is_absolute() {
                    rec.image_path.clone()
                } else {
                    root.join(&rec.image_path)
                };
                by_image.push((resolved, vec![row]));
            }
        }
    }

    let per_row: Vec<Result<Vec<(usize, std::result::Result<RgbPatch, Exclusion>)>>> = by_image
        .par_iter()
        .map(|(path, rows)| {
            let image = load_image(path)?;
            Ok(rows
                .iter()
                .map(|&row| {
                    let rec = &manifest.records()[row];
                    (
                        row,
                        extract_patch(&image, rec.centroid_x, rec.centroid_y, size),
                    )
                })
                .collect())
        })
        .collect();

    let mut slots: Vec<Option<std::result::Result<RgbPatch, Exclusion>>> =
        vec![None; manifest.len()];
    for group in per_row {
        for (row, item) in group? {
            slots[row] = Some(item);
        }
    }

    let mut out = Extraction {
        cell_ids: Vec::new(),
        patches: Vec::new(),
        excluded: Vec::new(),
    };
    for (rec, slot) in manifest.records().iter().zip(slots) {
        match slot.expect("every row extracted") {
            Ok(patch) => {
                out.cell_ids.push(rec.cell_id.clone());
                out.patches.push(patch);
            }
            Err(reason) => out.excluded.push(ExcludedCell {
                cell_id: rec.cell_id.clone(),
                reason,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::rotate_crop;
    use crate::rng;
    use rand::Rng;

    const MANIFEST: &str = "\
# synthetic fixture
cell_id,image_path,centroid_x,centroid_y,slide_id,organ,label
c1,tiles/a.png,50,50,s1,breast,tumor
c2,tiles/a.png,31.6,40.2,s1,breast,stroma
c3,tiles/b.png,10,50,s2,lung,
";

    #[test]
    fn manifest_parses_rows_comments_and_optional_fields() {
        let m = CellManifest::parse(MANIFEST).unwrap();
        assert_eq!(m.len(), 3);
        let r = &m.records()[0];
        assert_eq!(r.cell_id, "c1");
        assert_eq!(r.image_path, PathBuf::from("tiles/a.png"));
        assert_eq!((r.centroid_x, r.centroid_y), (50.0, 50.0));
        assert_eq!(r.label.as_deref(), Some("tumor"));
        assert_eq!(r.counts, None);
        assert_eq!(m.records()[1].centroid_x, 31.6);
        assert_eq!(m.records()[2].label, None);
        assert_eq!(m.slides(), vec!["s1", "s2"]);
    }

    #[test]
    fn manifest_rejects_structural_problems() {
        let dup = MANIFEST.replace("c2", "c1");
        assert!(matches!(
            CellManifest::parse(&dup).unwrap_err(),
            DataError::Manifest(msg) if msg.contains("c1")
        ));

        let missing = MANIFEST.replace("slide_id", "slide");
        assert!(CellManifest::parse(&missing).is_err());

        let bad_coord = MANIFEST.replace("31.6", "wide");
        match CellManifest::parse(&bad_coord).unwrap_err() {
            DataError::Parse { row, col, .. } => assert_eq!((row, col), (3, 3)),
            other => panic!("unexpected error {other:?}"),
        }

        assert!(CellManifest::parse("cell_id,image_path\n").is_err());
        let empty = "cell_id,image_path,centroid_x,centroid_y,slide_id,organ\n";
        assert!(matches!(
            CellManifest::parse(empty).unwrap_err(),
            DataError::Manifest(msg) if msg.contains("no data rows")
        ));
    }

    fn gradient_image(w: usize, h: usize) -> RgbPatch {
        let mut img = RgbPatch::new(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.set(
                    x,
                    y,
                    [
                        x as f64 / w as f64,
                        y as f64 / h as f64,
                        (x + y) as f64 / (w + h) as f64,
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn centered_window_lands_on_the_documented_bounds() {
        let img = gradient_image(100, 100);
        let patch = extract_patch(&img, 50.0, 50.0, 60).unwrap();
        assert_eq!((patch.width(), patch.height()), (60, 60));
        // Window is [20, 80)^2: spot-check the corners.
        assert_eq!(patch.get(0, 0), img.get(20, 20));
        assert_eq!(patch.get(59, 59), img.get(79, 79));
    }

    #[test]
    fn near_border_centroids_are_excluded_not_padded() {
        let img = gradient_image(100, 100);
        match extract_patch(&img, 10.0, 50.0, 60).unwrap_err() {
            Exclusion::BorderClip { x0, .. } => assert_eq!(x0, -20),
        }
        assert!(extract_patch(&img, 50.0, 93.0, 60).is_err());
        assert!(extract_patch(&img, 30.0, 30.0, 60).is_ok());
        assert!(extract_patch(&img, 29.0, 30.0, 60).is_err());
    }

    #[test]
    fn zero_rotation_crop_equals_direct_extraction() {
        let img = gradient_image(120, 120);
        let (cx, cy) = (61.0, 58.0);
        let src = extract_patch(&img, cx, cy, 60).unwrap();
        let via_rotate = rotate_crop(&src, 0.0, 40).unwrap();
        let direct = extract_patch(&img, cx, cy, 40).unwrap();
        assert_eq!(via_rotate.width(), 40);
        for (a, b) in via_rotate.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn extraction_is_order_independent_and_reports_exclusions_once() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(100, 100);
        save_image(&dir.path().join("a.png"), &img).unwrap();
        save_image(&dir.path().join("b.png"), &img).unwrap();

        let manifest = CellManifest::parse(
            "cell_id,image_path,centroid_x,centroid_y,slide_id,organ\n\
             c1,a.png,50,50,s1,breast\n\
             c2,b.png,40,40,s1,breast\n\
             c3,a.png,10,50,s1,breast\n\
             c4,a.png,66,63,s1,breast\n",
        )
        .unwrap();
        let shuffled = CellManifest::parse(
            "cell_id,image_path,centroid_x,centroid_y,slide_id,organ\n\
             c4,a.png,66,63,s1,breast\n\
             c3,a.png,10,50,s1,breast\n\
             c1,a.png,50,50,s1,breast\n\
             c2,b.png,40,40,s1,breast\n",
        )
        .unwrap();

        let a = extract_patches(&manifest, dir.path(), 60).unwrap();
        let b = extract_patches(&shuffled, dir.path(), 60).unwrap();
        assert_eq!(a.cell_ids, vec!["c1", "c2", "c4"]);
        assert_eq!(a.excluded.len(), 1);
        assert_eq!(a.excluded[0].cell_id, "c3");
        assert_eq!(b.excluded.len(), 1);

        // Same per-cell pixels regardless of manifest order.
        for (id, patch) in a.cell_ids.iter().zip(&a.patches) {
            let j = b.cell_ids.iter().position(|x| x == id).unwrap();
            assert_eq!(patch.data(), b.patches[j].data(), "cell {id}");
        }
    }

    #[test]
    fn png_round_trip_preserves_8bit_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::substream(3, "png");
        let mut img = RgbPatch::new(31, 17).unwrap();
        for v in img.data_mut() {
            *v = f64::from(r.gen_range(0..=255u8)) / 255.0;
        }
        let path = dir.path().join("t.png");
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.width(), back.height()), (31, 17));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_image_files_are_io_errors_with_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = CellManifest::parse(
            "cell_id,image_path,centroid_x,centroid_y,slide_id,organ\n\
             c1,absent.png,50,50,s1,breast\n",
        )
        .unwrap();
        match extract_patches(&manifest, dir.path(), 60).unwrap_err() {
            DataError::Io { path, .. } => {
                assert!(path.ends_with("absent.png"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
