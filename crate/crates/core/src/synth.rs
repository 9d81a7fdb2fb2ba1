//! Procedural nucleus patches with known generative parameters.
//!
//! Four morphology classes, told apart by size, eccentricity, and chromatin
//! texture. Nuisance factors (orientation, sub-pixel placement, per-cell
//! stain gains, speckle phases) vary freely within every class, so nothing
//! about the rendering pipeline leaks the label through first-order color
//! statistics. Rendering happens in optical density through an H&E-like
//! basis; re-rendering the same cells under a different [`StainCondition`]
//! produces color-shifted views of identical morphology.
//!
//! Everything is a pure function of the seed, which makes datasets
//! reproducible across machines and runs.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::dataio::{save_image, write_gene_counts, DataError, GeneCounts};
use crate::pixels::RgbPatch;
use crate::rng::substream;
use crate::tensor::Tensor;

/// Generative description of one nucleus. `class` is the morphology label;
/// every other field is either class-determined (within a class-specific
/// range) or pure nuisance.
#[derive(Debug, Clone, PartialEq)]
pub struct NucleusParams {
    pub class: usize,
    /// Geometric mean of the ellipse semi-axes, px.
    pub radius: f64,
    /// Major/minor axis ratio, >= 1.
    pub eccentricity: f64,
    /// Chromatin speckle contrast in [0, 1).
    pub texture_amp: f64,
    /// Speckle cycles across the nucleus diameter.
    pub texture_freq: f64,
    /// Boundary lobe amplitude as a fraction of the radius.
    pub irregularity: f64,
    /// Boundary lobe count.
    pub lobes: u32,
    /// Ellipse orientation, radians. Nuisance.
    pub orientation: f64,
    /// Nucleus center minus patch center, px. Nuisance.
    pub offset: (f64, f64),
    /// Per-cell hematoxylin concentration gain. Nuisance.
    pub h_gain: f64,
    /// Per-cell eosin concentration gain. Nuisance.
    pub e_gain: f64,
    /// Seed for speckle wave phases and boundary phase. Nuisance.
    pub noise_seed: u64,
}

pub const ORACLE_FEATURE_NAMES: [&str; 5] = [
    "radius",
    "eccentricity",
    "texture_amp",
    "texture_freq",
    "irregularity",
];

impl NucleusParams {
    /// The class-bearing generative parameters, nuisance excluded.
    pub fn oracle_features(&self) -> [f64; 5] {
        [
            self.radius,
            self.eccentricity,
            self.texture_amp,
            self.texture_freq,
            self.irregularity,
        ]
    }
}

/// Half-open parameter ranges for one class.
struct ClassSpec {
    radius: (f64, f64),
    ecc: (f64, f64),
    tex: (f64, f64),
    freq: (f64, f64),
    irr: (f64, f64),
    lobes: (u32, u32),
}

pub const CLASSES: usize = 4;

/// Ranges are disjoint across classes on at least one oracle feature, with
/// comfortable margins, so a linear model on oracle features separates the
/// classes essentially perfectly.
fn class_spec(class: usize) -> ClassSpec {
    match class {
        // Small round smooth.
        0 => ClassSpec {
            radius: (5.0, 6.5),
            ecc: (1.0, 1.15),
            tex: (0.05, 0.15),
            freq: (1.0, 2.0),
            irr: (0.0, 0.05),
            lobes: (2, 4),
        },
        // Large round smooth.
        1 => ClassSpec {
            radius: (11.0, 13.0),
            ecc: (1.0, 1.15),
            tex: (0.05, 0.15),
            freq: (1.0, 2.0),
            irr: (0.0, 0.05),
            lobes: (2, 4),
        },
        // Elongated.
        2 => ClassSpec {
            radius: (7.5, 9.0),
            ecc: (2.2, 2.8),
            tex: (0.05, 0.15),
            freq: (1.0, 2.0),
            irr: (0.0, 0.05),
            lobes: (2, 4),
        },
        // Speckled with a lobed boundary.
        3 => ClassSpec {
            radius: (7.5, 9.0),
            ecc: (1.0, 1.3),
            tex: (0.55, 0.8),
            freq: (3.0, 5.0),
            irr: (0.25, 0.4),
            lobes: (4, 7),
        },
        other => panic!("class {other} out of range, have {CLASSES}"),
    }
}

/// Largest offset magnitude, px. Chosen so the biggest nucleus still fits a
/// centered 40 px crop.
pub const MAX_OFFSET: f64 = 6.0;

pub fn sample_params<R: Rng>(class: usize, rng: &mut R) -> NucleusParams {
    let s = class_spec(class);
    let u = |rng: &mut R, (lo, hi): (f64, f64)| rng.gen_range(lo..hi);
    NucleusParams {
        class,
        radius: u(rng, s.radius),
        eccentricity: u(rng, s.ecc),
        texture_amp: u(rng, s.tex),
        texture_freq: u(rng, s.freq),
        irregularity: u(rng, s.irr),
        lobes: rng.gen_range(s.lobes.0..s.lobes.1),
        orientation: rng.gen_range(0.0..2.0 * PI),
        offset: (
            rng.gen_range(-MAX_OFFSET..MAX_OFFSET),
            rng.gen_range(-MAX_OFFSET..MAX_OFFSET),
        ),
        h_gain: (rng.gen_range(-0.15..0.15f64)).exp(),
        e_gain: (rng.gen_range(-0.15..0.15f64)).exp(),
        noise_seed: rng.gen(),
    }
}

/// A stain basis plus per-stain concentration scales. Re-rendering cells
/// under shifted conditions changes color statistics only.
#[derive(Debug, Clone, PartialEq)]
pub struct StainCondition {
    pub name: String,
    /// Hematoxylin OD direction; normalized at render time.
    pub hema: [f64; 3],
    /// Eosin OD direction; normalized at render time.
    pub eosin: [f64; 3],
    pub h_scale: f64,
    pub e_scale: f64,
}

/// Standard H&E OD directions (Ruifrok/Johnston deconvolution values).
const HEMA_OD: [f64; 3] = [0.650, 0.704, 0.286];
const EOSIN_OD: [f64; 3] = [0.072, 0.990, 0.105];

impl StainCondition {
    pub fn reference() -> Self {
        StainCondition {
            name: "reference".into(),
            hema: HEMA_OD,
            eosin: EOSIN_OD,
            h_scale: 1.0,
            e_scale: 1.0,
        }
    }

    /// Systematic shifts sitting outside the per-cell gain range used at
    /// sampling time, for robustness evaluation against unseen conditions.
    pub fn held_out_shifts() -> Vec<Self> {
        let mix = |a: [f64; 3], wa: f64, b: [f64; 3], wb: f64| {
            [
                wa * a[0] + wb * b[0],
                wa * a[1] + wb * b[1],
                wa * a[2] + wb * b[2],
            ]
        };
        vec![
            StainCondition {
                name: "hema_heavy".into(),
                hema: HEMA_OD,
                eosin: EOSIN_OD,
                h_scale: 1.45,
                e_scale: 0.70,
            },
            StainCondition {
                name: "eosin_heavy".into(),
                hema: HEMA_OD,
                eosin: EOSIN_OD,
                h_scale: 0.65,
                e_scale: 1.50,
            },
            StainCondition {
                name: "basis_rotated".into(),
                hema: mix(HEMA_OD, 0.90, EOSIN_OD, 0.35),
                eosin: mix(HEMA_OD, 0.25, EOSIN_OD, 0.95),
                h_scale: 1.05,
                e_scale: 0.95,
            },
        ]
    }
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Band-limited speckle: a fixed set of random-phase plane waves, unit
/// standard deviation in expectation.
struct Speckle {
    waves: Vec<(f64, f64, f64)>,
    scale: f64,
}

const SPECKLE_WAVES: usize = 6;

impl Speckle {
    fn new(p: &NucleusParams) -> Self {
        let mut rng = substream(p.noise_seed, "speckle");
        let k = PI * p.texture_freq / p.radius;
        let waves = (0..SPECKLE_WAVES)
            .map(|_| {
                let dir = rng.gen_range(0.0..2.0 * PI);
                let phase = rng.gen_range(0.0..2.0 * PI);
                (k * dir.cos(), k * dir.sin(), phase)
            })
            .collect();
        Speckle {
            waves,
            scale: (2.0 / SPECKLE_WAVES as f64).sqrt(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(kx, ky, ph)| (kx * u + ky * v + ph).sin())
            .sum();
        s * self.scale
    }
}

/// Baseline eosin concentration away from any cell.
const EOSIN_FLOOR: f64 = 0.17;
/// Residual hematoxylin haze outside nuclei.
const HEMA_FLOOR: f64 = 0.015;

/// Render one nucleus into a `size`x`size` patch. Pure in all arguments.
///
/// Total nuclear optical density is partially equalized across sizes
/// (chromatin mass grows slower than area), so mean intensity alone is a
/// poor class cue.
pub fn render_cell(p: &NucleusParams, cond: &StainCondition, size: usize) -> RgbPatch {
    let hema = normalized(cond.hema);
    let eosin = normalized(cond.eosin);
    let speckle = Speckle::new(p);
    let boundary_phase = substream(p.noise_seed, "boundary").gen_range(0.0..2.0 * PI);

    let center = (size as f64 - 1.0) / 2.0;
    let (cx, cy) = (center + p.offset.0, center + p.offset.1);
    let (sin_o, cos_o) = p.orientation.sin_cos();
    let a = p.radius * p.eccentricity.sqrt();
    let b = p.radius / p.eccentricity.sqrt();
    let base_h = 0.85 * (8.5 / p.radius).powf(0.7) * p.h_gain;

    let mut od = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = cos_o * dx + sin_o * dy;
            let v = -sin_o * dx + cos_o * dy;
            let theta = v.atan2(u);
            let wobble = 1.0 + p.irregularity * (p.lobes as f64 * theta + boundary_phase).sin();
            let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt() / wobble;

            // Sigmoid edge roughly 1 px wide regardless of radius.
            let cover = 1.0 / (1.0 + ((rho - 1.0) * p.radius * 2.2).exp());
            let chromatin = (1.0 + p.texture_amp * speckle.at(u, v)).max(0.0);
            let c_h = base_h * cover * chromatin + HEMA_FLOOR;

            // Cytoplasm halo decaying over ~3.5 px beyond the boundary.
            let halo = (-((rho - 1.0).max(0.0) * p.radius / 3.5).powi(2)).exp();
            let c_e = p.e_gain * (EOSIN_FLOOR + 0.25 * halo * (1.0 - cover));

            let (ch, ce) = (c_h * cond.h_scale, c_e * cond.e_scale);
            let i = (y * size + x) * 3;
            for ch_idx in 0..3 {
                od[i + ch_idx] = hema[ch_idx] * ch + eosin[ch_idx] * ce;
            }
        }
    }
    crate::stain::image_from_od(&od, size, size).expect("sized by construction")
}

/// A sampled cell population with a slide assignment. Slides interleave
/// classes, so every slide carries all of them.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub cells: Vec<NucleusParams>,
    /// Slide index per cell, in `0..slides`.
    pub slide_of: Vec<usize>,
    pub slides: usize,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.cells.iter().map(|p| p.class).collect()
    }

    pub fn cell_id(i: usize) -> String {
        format!("c{i:05}")
    }

    pub fn cell_ids(&self) -> Vec<String> {
        (0..self.len()).map(Self::cell_id).collect()
    }

    pub fn slide_id(j: usize) -> String {
        format!("s{j:02}")
    }

    /// Oracle feature matrix, one row per cell.
    pub fn oracle_features(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * ORACLE_FEATURE_NAMES.len());
        for p in &self.cells {
            data.extend(p.oracle_features());
        }
        Tensor::from_vec(&[self.len(), ORACLE_FEATURE_NAMES.len()], data)
            .expect("sized by construction")
    }

    /// Render every cell under one condition.
    pub fn render_all(&self, cond: &StainCondition, size: usize) -> Vec<RgbPatch> {
        self.cells
            .iter()
            .map(|p| render_cell(p, cond, size))
            .collect()
    }
}

/// Sample `n` cells over `slides` slides. Classes cycle `i % 4`, slides
/// cycle `i % slides`; per-cell draws come from independent substreams, so
/// any prefix of the dataset is stable under changes to `n`.
pub fn sample_dataset(n: usize, slides: usize, seed: u64) -> SynthDataset {
    assert!(slides >= 1, "need at least one slide");
    let cells = (0..n)
        .map(|i| {
            let mut rng = substream(seed, &format!("cell/{i}"));
            sample_params(i % CLASSES, &mut rng)
        })
        .collect();
    let slide_of = (0..n).map(|i| i % slides).collect();
    SynthDataset {
        cells,
        slide_of,
        slides,
    }
}

/// On-disk rendering of a dataset.
#[derive(Debug, Clone)]
pub struct WrittenDataset {
    pub manifest: PathBuf,
    pub images: Vec<PathBuf>,
}

/// Write one PNG per slide (cells on a `tile`-pitch grid) plus a manifest
/// whose centroids sit at exact tile centers. `tile` must accommodate the
/// source patch the trainer extracts.
pub fn write_dataset(
    dir: &Path,
    ds: &SynthDataset,
    cond: &StainCondition,
    tile: usize,
) -> Result<WrittenDataset, DataError> {
    if tile < 16 {
        return Err(DataError::Manifest(format!("tile of {tile} px is too small")));
    }
    if ds.is_empty() {
        return Err(DataError::Manifest("empty dataset".into()));
    }

    // Grid spot of every cell within its slide.
    let mut per_slide: Vec<Vec<usize>> = vec![Vec::new(); ds.slides];
    let mut placement = vec![(0usize, 0usize); ds.len()];
    for (i, &s) in ds.slide_of.iter().enumerate() {
        placement[i] = (s, per_slide[s].len());
        per_slide[s].push(i);
    }
    let grid_cols = |count: usize| (count as f64).sqrt().ceil() as usize;

    let mut images = Vec::new();
    for (j, cells) in per_slide.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let cols = grid_cols(cells.len());
        let rows = cells.len().div_ceil(cols);
        let mut slide = RgbPatch::filled(cols * tile, rows * tile, [1.0; 3])?;
        for (spot, &i) in cells.iter().enumerate() {
            let (r, c) = (spot / cols, spot % cols);
            let patch = render_cell(&ds.cells[i], cond, tile);
            for y in 0..tile {
                for x in 0..tile {
                    slide.set(c * tile + x, r * tile + y, patch.get(x, y));
                }
            }
        }
        let path = dir.join(format!("{}.png", SynthDataset::slide_id(j)));
        save_image(&path, &slide)?;
        images.push(path);
    }

    // Manifest rows in dataset order; extraction restores this order no
    // matter how cells are grouped into images.
    let mut manifest = String::from("cell_id,image_path,centroid_x,centroid_y,slide_id,organ,label\n");
    for (i, p) in ds.cells.iter().enumerate() {
        let (j, spot) = placement[i];
        let cols = grid_cols(per_slide[j].len());
        let (r, c) = (spot / cols, spot % cols);
        // Tile center: integral, so extraction windows align exactly.
        let cx = (c * tile + tile / 2) as f64;
        let cy = (r * tile + tile / 2) as f64;
        let _ = writeln!(
            manifest,
            "{},{}.png,{cx},{cy},{},synthetic,{}",
            SynthDataset::cell_id(i),
            SynthDataset::slide_id(j),
            SynthDataset::slide_id(j),
            p.class
        );
    }

    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| DataError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    Ok(WrittenDataset {
        manifest: manifest_path,
        images,
    })
}

/// Synthetic gene counts: each gene gets per-class rates, each cell a
/// log-normal wobble around its class rate. Integer-valued by rounding.
pub fn write_gene_table(
    path: &Path,
    ds: &SynthDataset,
    genes: usize,
    seed: u64,
) -> Result<GeneCounts, DataError> {
    let mut rate_rng = substream(seed, "gene-rates");
    let rates: Vec<Vec<f64>> = (0..genes)
        .map(|_| (0..CLASSES).map(|_| rate_rng.gen_range(0.5..30.0)).collect())
        .collect();

    let mut counts = Vec::with_capacity(ds.len() * genes);
    for (i, p) in ds.cells.iter().enumerate() {
        let mut rng = substream(seed, &format!("gene-cell/{i}"));
        for r in &rates {
            let wobble: f64 = rng.gen_range(-0.35..0.35f64);
            counts.push((r[p.class] * wobble.exp()).round().max(0.0));
        }
    }
    let table = GeneCounts {
        cell_ids: ds.cell_ids(),
        genes: (0..genes).map(|g| format!("g{g:03}")).collect(),
        counts: Tensor::from_vec(&[ds.len(), genes], counts).expect("sized by construction"),
    };
    write_gene_counts(path, &table)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{extract_patches, CellManifest};
    use crate::probe::{
        run_probe, ProbeConfig, ProbeReport, ProbeTask, Splitter, Targets,
    };

    #[test]
    fn sampling_is_deterministic_and_prefix_stable() {
        let a = sample_dataset(24, 3, 11);
        let b = sample_dataset(24, 3, 11);
        assert_eq!(a.cells, b.cells);
        let longer = sample_dataset(40, 3, 11);
        assert_eq!(&longer.cells[..24], &a.cells[..]);
        let img_a = render_cell(&a.cells[5], &StainCondition::reference(), 60);
        let img_b = render_cell(&b.cells[5], &StainCondition::reference(), 60);
        assert_eq!(img_a, img_b);
    }

    #[test]
    fn class_ranges_have_margins() {
        // Pairwise, at least one oracle feature has disjoint ranges.
        let disjoint = |a: (f64, f64), b: (f64, f64)| a.1 < b.0 || b.1 < a.0;
        for c1 in 0..CLASSES {
            for c2 in (c1 + 1)..CLASSES {
                let (s1, s2) = (class_spec(c1), class_spec(c2));
                let separated = disjoint(s1.radius, s2.radius)
                    || disjoint(s1.ecc, s2.ecc)
                    || disjoint(s1.tex, s2.tex);
                assert!(separated, "classes {c1} and {c2} overlap everywhere");
            }
        }
    }

    #[test]
    fn oracle_features_probe_perfectly() {
        let ds = sample_dataset(240, 3, 5);
        let task = ProbeTask {
            embeddings: ds.oracle_features(),
            targets: Targets::Labels(ds.labels()),
            slides: ds.slide_of.iter().map(|&j| SynthDataset::slide_id(j)).collect(),
            splitter: Splitter::StratifiedKfold { k: 3, seed: 9 },
        };
        let report = run_probe(&task, &ProbeConfig::default()).unwrap();
        let ProbeReport::Classification(r) = report else {
            panic!("expected a classification report");
        };
        assert!(
            r.balanced_accuracy.mean > 0.99,
            "oracle features should separate classes, got {}",
            r.balanced_accuracy.mean
        );
    }

    #[test]
    fn rendered_colors_look_like_h_and_e() {
        let ds = sample_dataset(8, 1, 3);
        for p in &ds.cells {
            let mut centered = p.clone();
            centered.offset = (0.0, 0.0);
            let img = render_cell(&centered, &StainCondition::reference(), 60);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let center = img.get(30, 30);
            let corner = img.get(1, 1);
            // Nucleus absorbs more light overall than the background.
            let lum = |p: [f64; 3]| p.iter().sum::<f64>();
            assert!(lum(center) < lum(corner));
            // Hematoxylin passes blue; eosin background passes red.
            assert!(center[2] > center[0], "nucleus should lean blue: {center:?}");
            assert!(corner[0] > corner[1], "background should lean pink: {corner:?}");
        }
    }

    #[test]
    fn offset_moves_the_darkest_region() {
        let base = {
            let mut rng = substream(1, "cell/0");
            sample_params(1, &mut rng)
        };
        let darkest = |img: &RgbPatch| {
            let mut best = (0usize, 0usize);
            let mut lo = f64::INFINITY;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let s = img.get(x, y).iter().sum::<f64>();
                    if s < lo {
                        lo = s;
                        best = (x, y);
                    }
                }
            }
            best
        };
        let mut left = base.clone();
        left.offset = (-MAX_OFFSET, 0.0);
        let mut right = base;
        right.offset = (MAX_OFFSET, 0.0);
        let ref_cond = StainCondition::reference();
        let lx = darkest(&render_cell(&left, &ref_cond, 60)).0;
        let rx = darkest(&render_cell(&right, &ref_cond, 60)).0;
        assert!(lx < 30 && rx > 30, "darkest pixels at x={lx} and x={rx}");
    }

    #[test]
    fn stain_shift_changes_color_not_geometry() {
        let ds = sample_dataset(4, 1, 7);
        let base = StainCondition::reference();
        for shift in StainCondition::held_out_shifts() {
            for p in &ds.cells {
                let a = render_cell(p, &base, 60);
                let b = render_cell(p, &shift, 60);
                let ma = a.mean_rgb();
                let mb = b.mean_rgb();
                let dist = (0..3).map(|c| (ma[c] - mb[c]).abs()).fold(0.0, f64::max);
                assert!(dist > 0.01, "{}: mean color barely moved", shift.name);

                // Darkness ranking of pixels is driven by morphology alone.
                let lum = |img: &RgbPatch, i: usize| {
                    img.data()[3 * i] + img.data()[3 * i + 1] + img.data()[3 * i + 2]
                };
                let argmin = |img: &RgbPatch| {
                    (0..60 * 60)
                        .min_by(|&i, &j| lum(img, i).total_cmp(&lum(img, j)))
                        .unwrap()
                };
                let (ia, ib) = (argmin(&a), argmin(&b));
                let (ax, ay) = (ia % 60, ia / 60);
                let (bx, by) = (ib % 60, ib / 60);
                assert!(
                    (ax as i64 - bx as i64).abs() <= 2 && (ay as i64 - by as i64).abs() <= 2,
                    "darkest pixel moved from ({ax},{ay}) to ({bx},{by})"
                );
            }
        }
    }

    #[test]
    fn written_dataset_round_trips_through_extraction() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset(10, 2, 21);
        let cond = StainCondition::reference();
        let written = write_dataset(dir.path(), &ds, &cond, 60).unwrap();

        let manifest = CellManifest::load(&written.manifest).unwrap();
        assert_eq!(manifest.len(), 10);
        let ex = extract_patches(&manifest, dir.path(), 60).unwrap();
        assert!(ex.excluded.is_empty());
        assert_eq!(ex.cell_ids, ds.cell_ids());

        // Extraction returns the rendered tiles up to 8-bit quantization.
        for (i, got) in ex.patches.iter().enumerate() {
            let want = render_cell(&ds.cells[i], &cond, 60);
            let worst = got
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-12, "cell {i} off by {worst}");
        }

        // Labels and slides came through the manifest.
        for (rec, p) in manifest.records().iter().zip(&ds.cells) {
            assert_eq!(rec.label.as_deref(), Some(p.class.to_string().as_str()));
            assert_eq!(rec.organ, "synthetic");
        }
    }

    #[test]
    fn gene_table_round_trips_and_tracks_class_rates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counts.csv");
        let ds = sample_dataset(160, 2, 13);
        let written = write_gene_table(&path, &ds, 6, 99).unwrap();
        let loaded = crate::dataio::load_gene_counts(&path).unwrap();
        assert_eq!(loaded.genes, written.genes);
        assert_eq!(loaded.counts.data(), written.counts.data());
        assert!(loaded.counts.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0));

        // Per-class means of one gene vary by construction.
        let labels = ds.labels();
        let g = 0;
        let mut means = [0.0; CLASSES];
        let mut counts = [0usize; CLASSES];
        for (i, &cls) in labels.iter().enumerate() {
            means[cls] += loaded.counts.data()[i * 6 + g];
            counts[cls] += 1;
        }
        for c in 0..CLASSES {
            means[c] /= counts[c] as f64;
        }
        let spread = means.iter().fold(f64::MIN, |a, &b| a.max(b))
            - means.iter().fold(f64::MAX, |a, &b| a.min(b));
        assert!(spread > 1.0, "class means too close: {means:?}");
    }
}
