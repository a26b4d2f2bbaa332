//! Synthetic two-modality scenes with known ground truth.
//!
//! Classes occupy rectangular blocks aligned to the 30 m patch lattice. Each
//! pixel is its class's band mean plus an optional per-block offset and
//! per-pixel Gaussian noise. In complementary mode a class is a pair of an
//! RGB code (class / 3) and an NDD code (class % 3): RGB bands only see the
//! first, NDD bands only the second.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bands::{BandError, ModalityStacks, NDD_BANDS, RGB_BANDS};
use crate::classes::{ClassLabel, NUM_CLASSES};
use crate::dataset::{write_manifest, DatasetError, ManifestRow, PATCH_SIZE_M};
use crate::mapgen::LabelMap;
use crate::model::Modality;
use crate::raster::{write_raster, GeoPoint, GridGeometry, RasterError, RasterGrid};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("region grid of {grid_rows}x{grid_cols} blocks does not tile a {rows}x{cols} px scene into whole patches")]
    NotTileable {
        grid_rows: usize,
        grid_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("class {class} has {available} patches, {requested} requested")]
    InsufficientPatches {
        class: ClassLabel,
        available: usize,
        requested: usize,
    },
    #[error(transparent)]
    Band(#[from] BandError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Map(#[from] crate::mapgen::MapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Band means and pixel noise in R, G, B, NIR, DEM, NDVI order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub mean: [f64; 6],
    pub sigma: [f64; 6],
}

impl Signature {
    fn part(&self, modality: Modality) -> ([f64; 3], [f64; 3]) {
        let off = match modality {
            Modality::Rgb => 0,
            Modality::Ndd => 3,
        };
        let pick = |a: &[f64; 6]| [a[off], a[off + 1], a[off + 2]];
        (pick(&self.mean), pick(&self.sigma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Straight block edges on the patch lattice.
    #[default]
    Checkerboard,
    /// Block edges displaced by up to `jitter_m`, varying along the edge.
    Smooth { jitter_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub resolution_m: f64,
    pub origin: GeoPoint,
    /// Class id per block.
    pub region_grid: Vec<Vec<u8>>,
    #[serde(default)]
    pub layout: Layout,
    pub signatures: Vec<Signature>,
    /// Standard deviation of a per-block, per-band offset to the class mean.
    #[serde(default)]
    pub region_sigma: f64,
    pub complementary: bool,
}

const RGB_LEVELS: [[f64; 3]; 2] = [[0.30, 0.35, 0.30], [0.60, 0.55, 0.50]];
const NDD_LEVELS: [[f64; 3]; 3] = [[0.25, 0.30, -0.20], [0.50, 0.50, 0.20], [0.75, 0.70, 0.60]];

/// Six distinct signatures loosely modeled on the land-cover classes.
const DISTINCT_MEANS: [[f64; 6]; NUM_CLASSES] = [
    [0.10, 0.15, 0.35, 0.10, 0.20, -0.40],
    [0.70, 0.70, 0.60, 0.55, 0.60, 0.10],
    [0.45, 0.60, 0.30, 0.70, 0.25, 0.45],
    [0.15, 0.35, 0.15, 0.80, 0.75, 0.70],
    [0.35, 0.55, 0.35, 0.65, 0.55, 0.40],
    [0.40, 0.45, 0.35, 0.45, 0.35, 0.05],
];

/// Signatures of the 2x3 code construction.
pub fn complementary_signatures(sigma: f64) -> Vec<Signature> {
    (0..NUM_CLASSES)
        .map(|c| {
            let (r, n) = (RGB_LEVELS[c / 3], NDD_LEVELS[c % 3]);
            Signature {
                mean: [r[0], r[1], r[2], n[0], n[1], n[2]],
                sigma: [sigma; 6],
            }
        })
        .collect()
}

pub fn distinct_signatures(sigma: f64) -> Vec<Signature> {
    DISTINCT_MEANS
        .iter()
        .map(|&mean| Signature {
            mean,
            sigma: [sigma; 6],
        })
        .collect()
}

impl SceneSpec {
    /// `grid_rows` x `grid_cols` blocks of `block_patches` x `block_patches`
    /// patches at 3 m. Block (i, j) holds class (2i + j) mod 6, so no two
    /// 4-neighbor blocks share a class.
    pub fn checkerboard(grid_rows: usize, grid_cols: usize, block_patches: usize, complementary: bool) -> Self {
        let resolution_m = 3.0;
        let block_px = block_patches * (PATCH_SIZE_M / resolution_m).round() as usize;
        Self {
            rows: grid_rows * block_px,
            cols: grid_cols * block_px,
            resolution_m,
            origin: GeoPoint::new(7_000_000.0, 500_000.0),
            region_grid: (0..grid_rows)
                .map(|i| (0..grid_cols).map(|j| ((2 * i + j) % NUM_CLASSES) as u8).collect())
                .collect(),
            layout: Layout::Checkerboard,
            signatures: if complementary {
                complementary_signatures(0.05)
            } else {
                distinct_signatures(0.05)
            },
            region_sigma: 0.0,
            complementary,
        }
    }

    pub fn patch_px(&self) -> usize {
        (PATCH_SIZE_M / self.resolution_m).round() as usize
    }

    fn grid_dims(&self) -> (usize, usize) {
        (self.region_grid.len(), self.region_grid.first().map_or(0, Vec::len))
    }

    /// Block side in pixels (rows, cols).
    pub fn block_px(&self) -> (usize, usize) {
        let (gr, gc) = self.grid_dims();
        (self.rows / gr.max(1), self.cols / gc.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(self.resolution_m > 0.0) {
            return bad("resolution must be positive".into());
        }
        let side = PATCH_SIZE_M / self.resolution_m;
        if (side - side.round()).abs() > 1e-9 {
            return bad(format!("{PATCH_SIZE_M} m patches are not whole pixels at {} m", self.resolution_m));
        }
        let (gr, gc) = self.grid_dims();
        if gr == 0 || gc == 0 || self.region_grid.iter().any(|row| row.len() != gc) {
            return bad("region grid must be a non-empty rectangle".into());
        }
        let p = self.patch_px();
        if self.rows % gr != 0 || self.cols % gc != 0 || (self.rows / gr) % p != 0 || (self.cols / gc) % p != 0 {
            return Err(SynthError::NotTileable {
                grid_rows: gr,
                grid_cols: gc,
                rows: self.rows,
                cols: self.cols,
            });
        }
        let mut used = [false; NUM_CLASSES];
        for &id in self.region_grid.iter().flatten() {
            match used.get_mut(id as usize) {
                Some(u) => *u = true,
                None => return bad(format!("class id {id} in region grid")),
            }
        }
        if used.iter().any(|u| !u) {
            return bad("all six classes must appear in the region grid".into());
        }
        if self.signatures.len() != NUM_CLASSES {
            return bad(format!("{} signatures given", self.signatures.len()));
        }
        if self
            .signatures
            .iter()
            .flat_map(|s| s.sigma.iter())
            .any(|&s| !(s >= 0.0 && s.is_finite()))
            || !(self.region_sigma >= 0.0 && self.region_sigma.is_finite())
        {
            return bad("noise levels must be finite and non-negative".into());
        }
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                if self.signatures[a] == self.signatures[b] {
                    return bad(format!("classes {a} and {b} share a signature"));
                }
            }
        }
        if self.complementary {
            for a in 0..NUM_CLASSES {
                for b in 0..NUM_CLASSES {
                    let (sa, sb) = (&self.signatures[a], &self.signatures[b]);
                    let same_rgb = sa.part(Modality::Rgb) == sb.part(Modality::Rgb);
                    let same_ndd = sa.part(Modality::Ndd) == sb.part(Modality::Ndd);
                    if same_rgb != (a / 3 == b / 3) || same_ndd != (a % 3 == b % 3) {
                        return bad(format!("classes {a} and {b} break the 2x3 code"));
                    }
                }
            }
        }
        if let Layout::Smooth { jitter_m } = self.layout {
            if !(jitter_m >= 0.0 && jitter_m.is_finite()) {
                return bad("jitter must be non-negative".into());
            }
            // a tile at a block corner must keep over half its pixels
            let (bh, bw) = self.block_px();
            let sides = if bh.min(bw) > p { 1.0 } else { 2.0 };
            let limit = (p as f64 * (1.0 - std::f64::consts::FRAC_1_SQRT_2) / sides).floor();
            if (jitter_m / self.resolution_m).floor() > limit {
                return bad(format!("jitter of {jitter_m} m exceeds {} m", limit * self.resolution_m));
            }
        }
        Ok(())
    }

    /// Class of every pixel and the block it belongs to.
    fn pixel_blocks(&self, seed: u64) -> Vec<(usize, usize)> {
        let (gr, gc) = self.grid_dims();
        let (bh, bw) = self.block_px();
        let jitter = match self.layout {
            Layout::Checkerboard => 0,
            Layout::Smooth { jitter_m } => (jitter_m / self.resolution_m).floor() as i64,
        };
        // offsets[b][k]: displacement of interior boundary b along segment k
        let draw = |tag: u64, boundaries: usize, segments: usize| -> Vec<Vec<i64>> {
            let mut r = rng::stream(seed, &[0x5e0, tag]);
            (0..boundaries)
                .map(|_| {
                    (0..segments)
                        .map(|_| if jitter == 0 { 0 } else { rand::Rng::random_range(&mut r, -jitter..=jitter) })
                        .collect()
                })
                .collect()
        };
        let row_shift = draw(0, gr.saturating_sub(1), gc);
        let col_shift = draw(1, gc.saturating_sub(1), gr);
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (nominal_i, nominal_j) = (r / bh, c / bw);
                let i = (0..gr - 1)
                    .filter(|&b| r as i64 >= ((b + 1) * bh) as i64 + row_shift[b][nominal_j])
                    .count();
                let j = (0..gc - 1)
                    .filter(|&b| c as i64 >= ((b + 1) * bw) as i64 + col_shift[b][nominal_i])
                    .count();
                out.push((i, j));
            }
        }
        out
    }
}

/// A generated scene with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene<T> {
    pub stacks: ModalityStacks<T>,
    /// Class id of every pixel, row-major.
    pub pixel_classes: Vec<u8>,
    /// Dominant class per 30 m tile.
    pub truth: LabelMap,
    /// One row per tile, labeled with the tile's dominant class.
    pub manifest: Vec<ManifestRow>,
}

impl<T: Scalar> SynthScene<T> {
    /// Writes `rgb.raster`, `ndd.raster`, `truth.raster` and `manifest.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_raster(dir.join("rgb.raster"), &self.stacks.rgb)?;
        write_raster(dir.join("ndd.raster"), &self.stacks.ndd)?;
        self.truth.write_raster(dir.join("truth.raster"))?;
        write_manifest(dir.join("manifest.csv"), &self.manifest)?;
        Ok(())
    }
}

fn clamp_band(band: usize, v: f64) -> f64 {
    if band == 5 {
        v.clamp(-1.0, 1.0)
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub fn generate_scene<T: Scalar>(spec: &SceneSpec, seed: u64) -> Result<SynthScene<T>> {
    spec.validate()?;
    let (rows, cols) = (spec.rows, spec.cols);
    let n = rows * cols;
    let blocks = spec.pixel_blocks(seed);
    let pixel_classes: Vec<u8> = blocks.iter().map(|&(i, j)| spec.region_grid[i][j]).collect();

    let (gr, gc) = spec.grid_dims();
    let mut offsets = vec![[0.0; 6]; gr * gc];
    if spec.region_sigma > 0.0 {
        let dist = Normal::new(0.0, spec.region_sigma).expect("validated sigma");
        for (k, o) in offsets.iter_mut().enumerate() {
            let mut r = rng::stream(seed, &[0xb10c, k as u64]);
            o.iter_mut().for_each(|v| *v = dist.sample(&mut r));
        }
    }

    let mut values = vec![0.0f64; 6 * n];
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for band in 0..6 {
        let mut r = rng::stream(seed, &[0x9e, band as u64]);
        for p in 0..n {
            let z: f64 = std_normal.sample(&mut r);
            let (i, j) = blocks[p];
            let sig = &spec.signatures[pixel_classes[p] as usize];
            let v = sig.mean[band] + offsets[i * gc + j][band] + sig.sigma[band] * z;
            values[band * n + p] = clamp_band(band, v);
        }
    }
    let geometry = GridGeometry {
        rows,
        cols,
        resolution_m: spec.resolution_m,
        origin: spec.origin,
    };
    let grid = |range: std::ops::Range<usize>, names: [&str; 3]| {
        RasterGrid::new(
            values[range].iter().map(|&v| T::of(v)).collect(),
            geometry,
            names.map(String::from).to_vec(),
            None,
        )
    };
    let stacks = ModalityStacks::new(grid(0..3 * n, RGB_BANDS)?, grid(3 * n..6 * n, NDD_BANDS)?)?;

    let p = spec.patch_px();
    let (tr, tc) = (rows / p, cols / p);
    let mut labels = Vec::with_capacity(tr * tc);
    let mut manifest = Vec::with_capacity(tr * tc);
    for i in 0..tr {
        for j in 0..tc {
            let mut counts = [0usize; NUM_CLASSES];
            for r in i * p..(i + 1) * p {
                for c in j * p..(j + 1) * p {
                    counts[pixel_classes[r * cols + c] as usize] += 1;
                }
            }
            let dominant = (0..NUM_CLASSES).fold(0, |best, k| if counts[k] > counts[best] { k } else { best });
            labels.push(dominant as u8);
            let center = geometry.pixel_center(i * p, j * p);
            let half = (p as f64 - 1.0) / 2.0 * spec.resolution_m;
            manifest.push(ManifestRow {
                sample_id: format!("t{i:03}_{j:03}"),
                center_northing_m: center.northing_m - half,
                center_easting_m: center.easting_m + half,
                class_name: ClassLabel::ALL[dominant].name().to_string(),
            });
        }
    }
    let truth = LabelMap::from_labels(tr, tc, labels, p).with_georef(spec.origin, spec.resolution_m);
    Ok(SynthScene {
        stacks,
        pixel_classes,
        truth,
        manifest,
    })
}

/// Subsample with exactly `target[c]` rows of each class, keeping the
/// original row order.
pub fn imbalance_manifest(
    manifest: &[ManifestRow],
    target: [usize; NUM_CLASSES],
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, row) in manifest.iter().enumerate() {
        let class: ClassLabel = row
            .class_name
            .parse()
            .map_err(|_| SynthError::InvalidSpec(format!("unknown class {:?}", row.class_name)))?;
        by_class.entry(class.id()).or_default().push(i);
    }
    let mut keep = vec![false; manifest.len()];
    for class in ClassLabel::ALL {
        let mut idx = by_class.remove(&class.id()).unwrap_or_default();
        let want = target[class.id()];
        if idx.len() < want {
            return Err(SynthError::InsufficientPatches {
                class,
                available: idx.len(),
                requested: want,
            });
        }
        if want < idx.len() {
            idx.shuffle(&mut rng::stream(seed, &[0x1b, class.id() as u64]));
        }
        for &i in &idx[..want] {
            keep[i] = true;
        }
    }
    Ok(manifest
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect())
}

/// Best accuracy any classifier can reach from one modality when the
/// generative model is known: classes with identical signatures on that
/// modality cannot be told apart, so each group contributes the count of
/// its most frequent member.
pub fn bayes_ceiling(spec: &SceneSpec, labels: &[ClassLabel], modality: Modality) -> f64 {
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        counts[l.id()] += 1;
    }
    let mut grouped = [false; NUM_CLASSES];
    let mut correct = 0;
    for a in 0..NUM_CLASSES {
        if grouped[a] {
            continue;
        }
        let key = spec.signatures[a].part(modality);
        let mut best = 0;
        for b in a..NUM_CLASSES {
            if !grouped[b] && spec.signatures[b].part(modality) == key {
                grouped[b] = true;
                best = best.max(counts[b]);
            }
        }
        correct += best;
    }
    correct as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_of(manifest: &[ManifestRow]) -> Vec<ClassLabel> {
        manifest.iter().map(|r| r.class_name.parse().unwrap()).collect()
    }

    #[test]
    fn noiseless_pixels_equal_means() {
        let mut spec = SceneSpec::checkerboard(2, 6, 1, false);
        spec.signatures.iter_mut().for_each(|s| s.sigma = [0.0; 6]);
        let scene = generate_scene::<f64>(&spec, 3).unwrap();
        let n = spec.rows * spec.cols;
        for p in 0..n {
            let mean = spec.signatures[scene.pixel_classes[p] as usize].mean;
            for b in 0..3 {
                assert_eq!(scene.stacks.rgb.band_slice(b)[p], mean[b]);
                assert_eq!(scene.stacks.ndd.band_slice(b)[p], mean[b + 3]);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::checkerboard(2, 6, 2, true);
        let a = generate_scene::<f32>(&spec, 8).unwrap();
        let b = generate_scene::<f32>(&spec, 8).unwrap();
        let c = generate_scene::<f32>(&spec, 9).unwrap();
        assert_eq!(a.stacks, b.stacks);
        assert_eq!(a.manifest, b.manifest);
        assert_ne!(a.stacks, c.stacks);
    }

    #[test]
    fn complementary_ceilings() {
        let spec = SceneSpec::checkerboard(2, 6, 2, true);
        let scene = generate_scene::<f32>(&spec, 1).unwrap();
        let labels = labels_of(&scene.manifest);
        assert_eq!(bayes_ceiling(&spec, &labels, Modality::Rgb), 1.0 / 3.0);
        assert_eq!(bayes_ceiling(&spec, &labels, Modality::Ndd), 0.5);
        let joint: std::collections::BTreeSet<_> = (0..NUM_CLASSES)
            .map(|c| {
                let s = &spec.signatures[c];
                (
                    s.part(Modality::Rgb).0.map(f64::to_bits),
                    s.part(Modality::Ndd).0.map(f64::to_bits),
                )
            })
            .collect();
        assert_eq!(joint.len(), NUM_CLASSES);
    }

    #[test]
    fn labels_are_dominant_classes() {
        let mut spec = SceneSpec::checkerboard(3, 6, 3, false);
        spec.layout = Layout::Smooth { jitter_m: 10.0 };
        assert!(spec.validate().is_err());
        spec.layout = Layout::Smooth { jitter_m: 6.0 };
        let scene = generate_scene::<f32>(&spec, 4).unwrap();
        let p = spec.patch_px();
        let mut impure = 0;
        for (k, row) in scene.manifest.iter().enumerate() {
            let (i, j) = (k / (spec.cols / p), k % (spec.cols / p));
            let label: ClassLabel = row.class_name.parse().unwrap();
            let mut share = 0;
            for r in i * p..(i + 1) * p {
                for c in j * p..(j + 1) * p {
                    share += usize::from(scene.pixel_classes[r * spec.cols + c] as usize == label.id());
                }
            }
            assert!(share * 2 > p * p, "tile {} only {share} px", row.sample_id);
            impure += usize::from(share < p * p);
        }
        assert!(impure > 0, "jitter should blur some block edges");
    }

    #[test]
    fn manifest_windows_cut_their_tiles() {
        let spec = SceneSpec::checkerboard(1, 6, 1, true);
        let scene = generate_scene::<f32>(&spec, 0).unwrap();
        for (k, row) in scene.manifest.iter().enumerate() {
            let w = crate::raster::GeoWindow::new(
                GeoPoint::new(row.center_northing_m, row.center_easting_m),
                PATCH_SIZE_M,
            )
            .unwrap();
            assert_eq!(scene.stacks.rgb.window_pixels(&w).unwrap(), (0, k * 10, 10));
        }
    }

    #[test]
    fn untileable_grid_rejected() {
        let mut spec = SceneSpec::checkerboard(2, 6, 1, true);
        spec.rows += 5;
        assert!(matches!(generate_scene::<f32>(&spec, 0), Err(SynthError::NotTileable { .. })));
        let mut spec = SceneSpec::checkerboard(2, 6, 1, true);
        spec.signatures[4] = spec.signatures[1];
        assert!(generate_scene::<f32>(&spec, 0).is_err());
    }

    #[test]
    fn imbalance_counts() {
        let spec = SceneSpec::checkerboard(8, 6, 4, false);
        let scene = generate_scene::<f32>(&spec, 0).unwrap();
        let target = [29, 94, 44, 52, 60, 15];
        let sub = imbalance_manifest(&scene.manifest, target, 5).unwrap();
        let counts = crate::classes::class_counts(labels_of(&sub));
        assert_eq!(counts, target);
        assert_eq!(sub, imbalance_manifest(&scene.manifest, target, 5).unwrap());
        let all = crate::classes::class_counts(labels_of(&scene.manifest));
        assert_eq!(imbalance_manifest(&scene.manifest, all, 9).unwrap(), scene.manifest);
        assert!(matches!(
            imbalance_manifest(&scene.manifest, [200, 0, 0, 0, 0, 0], 1),
            Err(SynthError::InsufficientPatches { .. })
        ));
    }
}
