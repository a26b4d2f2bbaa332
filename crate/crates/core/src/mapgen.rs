//! Scene-wide label maps: sliding-window classification, Potts/ICM
//! refinement and palette rendering.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::{rescale_patch, BandError, ModalityStacks, ScalingScope};
use crate::classes::{ClassLabel, NUM_CLASSES};
use crate::imaging::{ImageError, RgbImage};
use crate::model::{softmax, InputAdapter, Model, ModelError};
use crate::raster::{write_raster, GeoPoint, GridGeometry, RasterError, RasterGrid};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("scene of {rows}x{cols} px is smaller than one {tile} px tile")]
    SceneTooSmall { rows: usize, cols: usize, tile: usize },
    #[error("tile size {tile} and stride {stride} must be positive with stride <= tile")]
    InvalidWindow { tile: usize, stride: usize },
    #[error("label map has no probabilities")]
    MissingProbs,
    #[error("label id {0} is outside the palette")]
    LabelOutOfRange(u8),
    #[error("color {0:?} is not in the palette")]
    UnknownColor([u8; 3]),
    #[error("image size does not match the cell size")]
    ImageShape,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Band(#[from] BandError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T> = std::result::Result<T, MapError>;

/// Class colors in class order: water, bog, channel fen, dense forest,
/// sparse forest, wetland.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0x00, 0x00, 0xFF],
    [0xFF, 0xFF, 0xFF],
    [0xFF, 0xFF, 0x00],
    [0x00, 0x64, 0x00],
    [0x90, 0xEE, 0x90],
    [0xFF, 0x00, 0x00],
];

/// Class probabilities for one tile.
pub trait PatchClassifier<T>: Sync {
    fn probabilities(&self, patch: &ModalityStacks<T>) -> Result<[f64; NUM_CLASSES]>;
}

impl<T: Scalar> PatchClassifier<T> for Model<T> {
    fn probabilities(&self, patch: &ModalityStacks<T>) -> Result<[f64; NUM_CLASSES]> {
        let x = InputAdapter::new(self.nominal_input_px()).adapt(patch);
        let p = softmax(&self.forward(&x)?);
        let mut out = [0.0; NUM_CLASSES];
        out.iter_mut().zip(&p).for_each(|(o, v)| *o = v.as_f64());
        Ok(out)
    }
}

/// Labels over the lattice of window positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub rows: usize,
    pub cols: usize,
    /// Class id per cell, row-major.
    pub labels: Vec<u8>,
    /// Six probabilities per cell, row-major.
    pub probs: Option<Vec<f64>>,
    pub tile_size_px: usize,
    pub stride_px: usize,
    pub origin: GeoPoint,
    pub pixel_resolution_m: f64,
}

impl LabelMap {
    /// Map whose labels are the argmax of `probs`.
    pub fn from_probs(rows: usize, cols: usize, probs: Vec<f64>, tile_size_px: usize, stride_px: usize) -> Self {
        assert_eq!(probs.len(), rows * cols * NUM_CLASSES);
        let labels = probs
            .chunks_exact(NUM_CLASSES)
            .map(|p| crate::model::argmax(p) as u8)
            .collect();
        Self {
            rows,
            cols,
            labels,
            probs: Some(probs),
            tile_size_px,
            stride_px,
            origin: GeoPoint::new(0.0, 0.0),
            pixel_resolution_m: 1.0,
        }
    }

    pub fn from_labels(rows: usize, cols: usize, labels: Vec<u8>, tile_size_px: usize) -> Self {
        assert_eq!(labels.len(), rows * cols);
        Self {
            rows,
            cols,
            labels,
            probs: None,
            tile_size_px,
            stride_px: tile_size_px,
            origin: GeoPoint::new(0.0, 0.0),
            pixel_resolution_m: 1.0,
        }
    }

    pub fn with_georef(mut self, origin: GeoPoint, pixel_resolution_m: f64) -> Self {
        self.origin = origin;
        self.pixel_resolution_m = pixel_resolution_m;
        self
    }

    pub fn label(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.cols + c]
    }

    pub fn cell_probs(&self, r: usize, c: usize) -> Option<&[f64]> {
        let i = (r * self.cols + c) * NUM_CLASSES;
        self.probs.as_ref().map(|p| &p[i..i + NUM_CLASSES])
    }

    /// Fraction of cells whose label equals `truth`'s.
    pub fn agreement(&self, truth: &LabelMap) -> f64 {
        assert_eq!((self.rows, self.cols), (truth.rows, truth.cols), "label map shapes");
        let same = self.labels.iter().zip(&truth.labels).filter(|(a, b)| a == b).count();
        same as f64 / self.labels.len() as f64
    }

    /// One-band grid of class ids, one pixel per cell.
    pub fn to_raster(&self) -> Result<RasterGrid<f32>> {
        let geometry = GridGeometry {
            rows: self.rows,
            cols: self.cols,
            resolution_m: self.stride_px as f64 * self.pixel_resolution_m,
            origin: self.origin,
        };
        Ok(RasterGrid::new(
            self.labels.iter().map(|&l| l as f32).collect(),
            geometry,
            vec!["label".to_string()],
            None,
        )?)
    }

    pub fn write_raster(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_raster(path, &self.to_raster()?)?)
    }

    /// Inverse of [`LabelMap::to_raster`] for a map with the given window geometry.
    pub fn from_raster(grid: &RasterGrid<f32>, tile_size_px: usize, stride_px: usize) -> Result<Self> {
        let labels = grid
            .band_slice(0)
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..NUM_CLASSES as f32).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(MapError::LabelOutOfRange(v.clamp(0.0, 255.0) as u8))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let mut map = Self::from_labels(grid.rows(), grid.cols(), labels, tile_size_px)
            .with_georef(grid.origin(), grid.resolution_m() / stride_px as f64);
        map.stride_px = stride_px;
        Ok(map)
    }
}

/// Window origins along one axis: every `stride`, plus a final window
/// snapped to the far edge when the stride does not land on it.
pub fn window_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=(len - tile) / stride).map(|i| i * stride).collect();
    if *starts.last().expect("at least one window") != len - tile {
        starts.push(len - tile);
    }
    starts
}

/// Per-pixel class probabilities averaged over all covering windows, and
/// the per-window probabilities they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideResult {
    pub rows: usize,
    pub cols: usize,
    pub row_starts: Vec<usize>,
    pub col_starts: Vec<usize>,
    /// Six probabilities per window, row-major over window positions.
    pub window_probs: Vec<f64>,
    /// Six probabilities per pixel, row-major.
    pub pixel_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideConfig {
    pub tile_size_px: usize,
    pub stride_px: usize,
    pub scope: ScalingScope,
}

impl SlideConfig {
    pub fn new(tile_size_px: usize, stride_px: usize) -> Self {
        Self {
            tile_size_px,
            stride_px,
            scope: ScalingScope::Scene,
        }
    }
}

pub fn slide_probabilities<T: Scalar, C: PatchClassifier<T>>(
    classifier: &C,
    scene: &ModalityStacks<T>,
    cfg: SlideConfig,
) -> Result<SlideResult> {
    let (rows, cols, tile, stride) = (scene.rows(), scene.cols(), cfg.tile_size_px, cfg.stride_px);
    if tile == 0 || stride == 0 || stride > tile {
        return Err(MapError::InvalidWindow { tile, stride });
    }
    if rows < tile || cols < tile {
        return Err(MapError::SceneTooSmall { rows, cols, tile });
    }
    let row_starts = window_starts(rows, tile, stride);
    let col_starts = window_starts(cols, tile, stride);
    let positions: Vec<(usize, usize)> = row_starts
        .iter()
        .flat_map(|&r| col_starts.iter().map(move |&c| (r, c)))
        .collect();
    let per_window: Vec<[f64; NUM_CLASSES]> = positions
        .par_iter()
        .map(|&(r, c)| {
            let patch = scene.map_both(|g| g.crop_pixels(r, c, tile, tile))?;
            let patch = match cfg.scope {
                ScalingScope::Scene => patch,
                ScalingScope::Patch => rescale_patch(&patch)?,
            };
            classifier.probabilities(&patch)
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; rows * cols * NUM_CLASSES];
    let mut hits = vec![0u32; rows * cols];
    for (&(r0, c0), p) in positions.iter().zip(&per_window) {
        for r in r0..r0 + tile {
            for c in c0..c0 + tile {
                let i = r * cols + c;
                hits[i] += 1;
                sum[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
                    .iter_mut()
                    .zip(p)
                    .for_each(|(s, v)| *s += v);
            }
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let inv = 1.0 / h as f64;
        sum[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].iter_mut().for_each(|s| *s *= inv);
    }
    Ok(SlideResult {
        rows,
        cols,
        row_starts,
        col_starts,
        window_probs: per_window.into_iter().flatten().collect(),
        pixel_probs: sum,
    })
}

/// Label map with one cell per window position; a cell's probabilities are
/// the mean of the averaged pixel probabilities inside its window.
pub fn slide_map<T: Scalar, C: PatchClassifier<T>>(
    classifier: &C,
    scene: &ModalityStacks<T>,
    cfg: SlideConfig,
) -> Result<LabelMap> {
    let s = slide_probabilities(classifier, scene, cfg)?;
    let tile = cfg.tile_size_px;
    let mut probs = Vec::with_capacity(s.row_starts.len() * s.col_starts.len() * NUM_CLASSES);
    for &r0 in &s.row_starts {
        for &c0 in &s.col_starts {
            let mut acc = [0.0; NUM_CLASSES];
            for r in r0..r0 + tile {
                for c in c0..c0 + tile {
                    let i = (r * s.cols + c) * NUM_CLASSES;
                    acc.iter_mut().zip(&s.pixel_probs[i..i + NUM_CLASSES]).for_each(|(a, v)| *a += v);
                }
            }
            let n = (tile * tile) as f64;
            probs.extend(acc.iter().map(|a| a / n));
        }
    }
    Ok(
        LabelMap::from_probs(s.row_starts.len(), s.col_starts.len(), probs, tile, cfg.stride_px)
            .with_georef(scene.rgb.origin(), scene.rgb.resolution_m()),
    )
}

fn unary(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).ln()
}

/// Potts energy: sum of -ln p over cells plus `w` per disagreeing 4-neighbor pair.
pub fn crf_energy(labels: &[u8], probs: &[f64], rows: usize, cols: usize, w: f64) -> f64 {
    let mut e = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            e += unary(probs[i * NUM_CLASSES + labels[i] as usize]);
            if c + 1 < cols && labels[i] != labels[i + 1] {
                e += w;
            }
            if r + 1 < rows && labels[i] != labels[i + cols] {
                e += w;
            }
        }
    }
    e
}

/// Energy after each completed sweep, starting with the initial labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfTrace {
    pub energies: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Iterated conditional modes from the current labels. A cell only moves to
/// a label with strictly lower local energy, so ties keep the current label.
pub fn crf_refine(map: &LabelMap, w: f64, max_iters: usize) -> Result<(LabelMap, CrfTrace)> {
    let probs = map.probs.as_ref().ok_or(MapError::MissingProbs)?;
    let (rows, cols) = (map.rows, map.cols);
    let mut labels = map.labels.clone();
    let mut energies = vec![crf_energy(&labels, probs, rows, cols, w)];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_iters {
        let mut changed = false;
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let mut neighbors = [u8::MAX; 4];
                if r > 0 {
                    neighbors[0] = labels[i - cols];
                }
                if r + 1 < rows {
                    neighbors[1] = labels[i + cols];
                }
                if c > 0 {
                    neighbors[2] = labels[i - 1];
                }
                if c + 1 < cols {
                    neighbors[3] = labels[i + 1];
                }
                let local = |y: u8| {
                    let disagree = neighbors.iter().filter(|&&n| n != u8::MAX && n != y).count();
                    unary(probs[i * NUM_CLASSES + y as usize]) + w * disagree as f64
                };
                let current = labels[i];
                let mut best = (local(current), current);
                for y in 0..NUM_CLASSES as u8 {
                    let e = local(y);
                    if e < best.0 {
                        best = (e, y);
                    }
                }
                if best.1 != current {
                    labels[i] = best.1;
                    changed = true;
                }
            }
        }
        sweeps += 1;
        let e = crf_energy(&labels, probs, rows, cols, w);
        let prev = *energies.last().expect("initial energy");
        assert!(
            e <= prev + 1e-9 * prev.abs().max(1.0),
            "ICM energy increased from {prev} to {e}"
        );
        energies.push(e);
        if !changed {
            converged = true;
            break;
        }
    }
    let refined = LabelMap {
        labels,
        ..map.clone()
    };
    Ok((
        refined,
        CrfTrace {
            energies,
            sweeps,
            converged,
        },
    ))
}

/// Image with `cell_px` x `cell_px` pixels per map cell.
pub fn render_palette(map: &LabelMap, cell_px: u32) -> Result<RgbImage> {
    let mut img = RgbImage::new(map.cols as u32 * cell_px, map.rows as u32 * cell_px);
    for r in 0..map.rows {
        for c in 0..map.cols {
            let l = map.label(r, c);
            let color = *PALETTE.get(l as usize).ok_or(MapError::LabelOutOfRange(l))?;
            for dy in 0..cell_px {
                for dx in 0..cell_px {
                    img.set(c as u32 * cell_px + dx, r as u32 * cell_px + dy, color);
                }
            }
        }
    }
    Ok(img)
}

/// Recovers class ids from a rendered map by reading one pixel per cell.
pub fn palette_inverse(img: &RgbImage, cell_px: u32) -> Result<(usize, usize, Vec<u8>)> {
    if cell_px == 0 || img.width % cell_px != 0 || img.height % cell_px != 0 {
        return Err(MapError::ImageShape);
    }
    let (rows, cols) = (img.height / cell_px, img.width / cell_px);
    let mut labels = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let px = img.pixel(c * cell_px, r * cell_px);
            let id = PALETTE.iter().position(|&p| p == px).ok_or(MapError::UnknownColor(px))?;
            labels.push(id as u8);
        }
    }
    Ok((rows as usize, cols as usize, labels))
}

/// Class at each cell as a label.
pub fn cell_classes(map: &LabelMap) -> Vec<ClassLabel> {
    map.labels
        .iter()
        .map(|&l| ClassLabel::from_id(l as usize).expect("valid class id"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::{NDD_BANDS, RGB_BANDS};
    use proptest::prelude::*;

    /// Classifier keyed on the mean R value of a tile.
    struct Threshold;

    impl PatchClassifier<f64> for Threshold {
        fn probabilities(&self, patch: &ModalityStacks<f64>) -> Result<[f64; NUM_CLASSES]> {
            let r = patch.rgb.band_slice(0);
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let mut p = [0.02; NUM_CLASSES];
            p[0] = mean;
            p[5] = 1.0 - mean;
            let z: f64 = p.iter().sum();
            Ok(p.map(|v| v / z))
        }
    }

    fn scene(rows: usize, cols: usize, red: impl Fn(usize, usize) -> f64) -> ModalityStacks<f64> {
        let geo = GridGeometry {
            rows,
            cols,
            resolution_m: 3.0,
            origin: GeoPoint::new(1000.0, 0.0),
        };
        let mut rgb = vec![0.0; 3 * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                rgb[r * cols + c] = red(r, c);
            }
        }
        ModalityStacks::new(
            RasterGrid::new(rgb, geo, RGB_BANDS.map(String::from).to_vec(), None).unwrap(),
            RasterGrid::new(vec![0.5; 3 * rows * cols], geo, NDD_BANDS.map(String::from).to_vec(), None).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn non_overlapping_grid() {
        let s = scene(100, 100, |_, _| 0.9);
        let m = slide_map(&Threshold, &s, SlideConfig::new(10, 10)).unwrap();
        assert_eq!((m.rows, m.cols), (10, 10));
        assert!(m.labels.iter().all(|&l| l == 0));
        for p in m.probs.as_ref().unwrap().chunks(6) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn too_small_scene() {
        let s = scene(8, 30, |_, _| 0.5);
        assert!(matches!(
            slide_map(&Threshold, &s, SlideConfig::new(10, 10)),
            Err(MapError::SceneTooSmall { .. })
        ));
    }

    /// Accumulate-and-normalize oracle for overlapping windows.
    #[test]
    fn overlap_matches_brute_force() {
        let s = scene(40, 30, |r, c| if r + c < 35 { 0.8 } else { 0.1 });
        let res = slide_probabilities(&Threshold, &s, SlideConfig::new(10, 5)).unwrap();
        let mut acc = vec![[0.0; NUM_CLASSES]; 40 * 30];
        let mut n = vec![0.0; 40 * 30];
        let mut r0 = 0;
        while r0 + 10 <= 40 {
            let mut c0 = 0;
            while c0 + 10 <= 30 {
                let patch = s.map_both(|g| g.crop_pixels(r0, c0, 10, 10)).unwrap();
                let p = Threshold.probabilities(&patch).unwrap();
                for r in r0..r0 + 10 {
                    for c in c0..c0 + 10 {
                        for k in 0..NUM_CLASSES {
                            acc[r * 30 + c][k] += p[k];
                        }
                        n[r * 30 + c] += 1.0;
                    }
                }
                c0 += 5;
            }
            r0 += 5;
        }
        for i in 0..40 * 30 {
            for k in 0..NUM_CLASSES {
                assert!((res.pixel_probs[i * 6 + k] - acc[i][k] / n[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_beyond_tile_rejected() {
        let s = scene(30, 30, |_, _| 0.5);
        assert!(matches!(
            slide_map(&Threshold, &s, SlideConfig::new(10, 11)),
            Err(MapError::InvalidWindow { .. })
        ));
    }

    #[test]
    fn snapped_edge_window() {
        assert_eq!(window_starts(25, 10, 10), vec![0, 10, 15]);
        assert_eq!(window_starts(30, 10, 10), vec![0, 10, 20]);
        assert_eq!(window_starts(10, 10, 3), vec![0]);
    }

    proptest! {
        #[test]
        fn tile_count_formula(extra_r in 0usize..6, extra_c in 0usize..6, tile in 1usize..12, stride in 1usize..12) {
            // geometries whose remainder is zero, where no snapped window is added
            let rows = tile + stride * extra_r;
            let cols = tile + stride * extra_c;
            let r = window_starts(rows, tile, stride).len();
            let c = window_starts(cols, tile, stride).len();
            prop_assert_eq!(r * c, ((rows - tile) / stride + 1) * ((cols - tile) / stride + 1));
        }

        #[test]
        fn windows_cover_every_pixel(len in 1usize..80, tile in 1usize..20, stride in 1usize..20) {
            prop_assume!(len >= tile && stride <= tile);
            let starts = window_starts(len, tile, stride);
            for px in 0..len {
                prop_assert!(starts.iter().any(|&s| s <= px && px < s + tile));
            }
            prop_assert_eq!(*starts.last().unwrap(), len - tile);
        }
    }

    fn random_probs(seed: u64, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, &[]);
        let mut out = Vec::with_capacity(n * 6);
        for _ in 0..n {
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            out.extend(raw.iter().map(|v| v / z));
        }
        out
    }

    #[test]
    fn zero_weight_is_identity() {
        let m = LabelMap::from_probs(6, 7, random_probs(1, 42), 10, 10);
        let (r, trace) = crf_refine(&m, 0.0, 10).unwrap();
        assert_eq!(r.labels, m.labels);
        assert!(trace.converged);
    }

    #[test]
    fn uniform_probs_never_change() {
        let m = LabelMap::from_probs(5, 5, vec![1.0 / 6.0; 150], 10, 10);
        for w in [0.0, 0.3, 2.0, 50.0] {
            let (r, trace) = crf_refine(&m, w, 10).unwrap();
            assert_eq!(r.labels, m.labels);
            assert_eq!(trace.sweeps, 1);
        }
    }

    #[test]
    fn energy_never_increases() {
        for seed in 0..20 {
            let m = LabelMap::from_probs(8, 8, random_probs(seed, 64), 10, 10);
            let (_, trace) = crf_refine(&m, 0.7, 10).unwrap();
            assert!(trace.energies.windows(2).all(|e| e[1] <= e[0]));
        }
    }

    #[test]
    fn missing_probs() {
        let m = LabelMap::from_labels(2, 2, vec![0; 4], 10);
        assert!(matches!(crf_refine(&m, 1.0, 3), Err(MapError::MissingProbs)));
    }

    #[test]
    fn palette_strip_and_inverse() {
        let m = LabelMap::from_labels(1, 6, (0..6).collect(), 10);
        let img = render_palette(&m, 3).unwrap();
        for (k, expected) in PALETTE.iter().enumerate() {
            for dy in 0..3 {
                for dx in 0..3 {
                    assert_eq!(img.pixel(k as u32 * 3 + dx, dy), *expected);
                }
            }
        }
        assert_eq!(PALETTE[0], [0, 0, 255]);
        assert_eq!(PALETTE[3], [0, 100, 0]);
        assert_eq!(PALETTE[4], [144, 238, 144]);
        let decoded = RgbImage::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(palette_inverse(&decoded, 3).unwrap(), (1, 6, m.labels.clone()));
        let bad = LabelMap::from_labels(1, 1, vec![6], 10);
        assert!(matches!(render_palette(&bad, 1), Err(MapError::LabelOutOfRange(6))));
    }

    #[test]
    fn raster_round_trip() {
        let m = LabelMap::from_labels(2, 3, vec![0, 1, 2, 3, 4, 5], 10)
            .with_georef(GeoPoint::new(100.0, 50.0), 3.0);
        let back = LabelMap::from_raster(&m.to_raster().unwrap(), 10, 10).unwrap();
        assert_eq!(back, m);
        let mut grid = m.to_raster().unwrap().into_values();
        grid[2] = 7.0;
        let bad = RasterGrid::new(grid, m.to_raster().unwrap().geometry(), vec!["label".into()], None).unwrap();
        assert!(LabelMap::from_raster(&bad, 10, 10).is_err());
    }

    #[test]
    fn all_water_is_blue() {
        let m = LabelMap::from_labels(3, 4, vec![0; 12], 10);
        let img = render_palette(&m, 2).unwrap();
        assert!(img.pixels.chunks(3).all(|p| p == [0, 0, 255]));
    }

    proptest! {
        #[test]
        fn render_then_invert_is_identity(labels in proptest::collection::vec(0u8..6, 1..40), cell in 1u32..4) {
            let n = labels.len();
            let m = LabelMap::from_labels(1, n, labels.clone(), 10);
            let (_, _, back) = palette_inverse(&render_palette(&m, cell).unwrap(), cell).unwrap();
            prop_assert_eq!(back, labels);
        }
    }
}
