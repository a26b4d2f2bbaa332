//! Labeled 30 m patches: manifest loading, i.i.d. splits, k-fold folds,
//! Augmentation Balancing and inverse-frequency class weights.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bands::{rescale_patch, BandError, ModalityStacks, ScalingScope};
use crate::classes::{class_counts, ClassLabel, NUM_CLASSES};
use crate::raster::{extract_patch, GeoPoint, GeoWindow, RasterError};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Ground size of one labeled patch.
pub const PATCH_SIZE_M: f64 = 30.0;
/// Side of one of the nine augmentation sub-patches.
pub const SUB_PATCH_M: f64 = 10.0;
/// Sub-patch index whose center coincides with the patch center.
pub const CENTER_SUB_PATCH: u8 = 4;
/// Fresh (center, flip) draws tried before falling back to the center crop.
pub const MAX_AUGMENT_ATTEMPTS: usize = 32;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {sample_id:?}: unknown class name {class_name:?}")]
    UnknownClass { sample_id: String, class_name: String },
    #[error("sample {sample_id:?}: window outside the scene")]
    OutOfBounds { sample_id: String },
    #[error("sample {sample_id:?}: {source}")]
    Raster {
        sample_id: String,
        source: RasterError,
    },
    #[error(transparent)]
    Band(#[from] BandError),
    #[error("split sizes sum to {expected} but {found} samples were given")]
    SizeMismatch { expected: usize, found: usize },
    #[error("k = {k} is invalid for {samples} samples")]
    InvalidFolds { k: usize, samples: usize },
    #[error("class {0} has no samples to augment")]
    Unbalanceable(ClassLabel),
    #[error("augmentation of {0:?} rejected: shifted window leaves the scene")]
    AugmentationRejected(String),
    #[error("class frequency {0} must be at least 1")]
    InvalidFrequency(u64),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub center_northing_m: f64,
    pub center_easting_m: f64,
    pub class_name: String,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_reader(File::open(path)?);
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        writer.write_record(["sample_id", "center_northing_m", "center_easting_m", "class_name"])?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Augmented {
        source_id: String,
        center_index: u8,
        flip_lr: bool,
        flip_ud: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample<T> {
    pub sample_id: String,
    pub window: GeoWindow,
    pub label: ClassLabel,
    pub stacks: ModalityStacks<T>,
    pub provenance: Provenance,
}

fn crop<T: Scalar>(
    scene: &ModalityStacks<T>,
    window: &GeoWindow,
    scope: ScalingScope,
) -> std::result::Result<ModalityStacks<T>, DatasetError> {
    let stacks = scene.map_both(|g| extract_patch(g, window))?;
    Ok(match scope {
        ScalingScope::Scene => stacks,
        ScalingScope::Patch => rescale_patch(&stacks)?,
    })
}

fn crop_for(
    sample_id: &str,
    err: DatasetError,
) -> DatasetError {
    match err {
        DatasetError::Band(BandError::Raster(RasterError::OutOfBounds { .. })) => DatasetError::OutOfBounds {
            sample_id: sample_id.to_string(),
        },
        DatasetError::Band(BandError::Raster(source)) => DatasetError::Raster {
            sample_id: sample_id.to_string(),
            source,
        },
        other => other,
    }
}

/// Materializes manifest rows as patches cut from the scene.
pub fn samples_from_rows<T: Scalar>(
    rows: &[ManifestRow],
    scene: &ModalityStacks<T>,
    scope: ScalingScope,
) -> Result<Vec<PatchSample<T>>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if !seen.insert(row.sample_id.as_str()) {
            return Err(DatasetError::DuplicateId(row.sample_id.clone()));
        }
        let label: ClassLabel = row.class_name.parse().map_err(|_| DatasetError::UnknownClass {
            sample_id: row.sample_id.clone(),
            class_name: row.class_name.clone(),
        })?;
        let window = GeoWindow::new(
            GeoPoint::new(row.center_northing_m, row.center_easting_m),
            PATCH_SIZE_M,
        )
        .map_err(|source| DatasetError::Raster {
            sample_id: row.sample_id.clone(),
            source,
        })?;
        let stacks = crop(scene, &window, scope).map_err(|e| crop_for(&row.sample_id, e))?;
        out.push(PatchSample {
            sample_id: row.sample_id.clone(),
            window,
            label,
            stacks,
            provenance: Provenance::Original,
        });
    }
    Ok(out)
}

pub fn load_manifest<T: Scalar>(
    path: impl AsRef<Path>,
    scene: &ModalityStacks<T>,
    scope: ScalingScope,
) -> Result<Vec<PatchSample<T>>> {
    samples_from_rows(&read_manifest(path)?, scene, scope)
}

/// Disjoint sample-id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Train/validation/test sizes in a 3:1:1 ratio; 500 samples give 300/100/100.
pub fn proportional_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 5;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Uniform random partition, deterministic in `seed`.
pub fn split_iid<T>(samples: &[PatchSample<T>], sizes: (usize, usize, usize), seed: u64) -> Result<DatasetSplit> {
    let expected = sizes.0 + sizes.1 + sizes.2;
    if expected != samples.len() {
        return Err(DatasetError::SizeMismatch {
            expected,
            found: samples.len(),
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[0x5b1d]));
    let ids = |range: std::ops::Range<usize>| -> Vec<String> {
        order[range].iter().map(|&i| samples[i].sample_id.clone()).collect()
    };
    Ok(DatasetSplit {
        train: ids(0..sizes.0),
        validation: ids(sizes.0..sizes.0 + sizes.1),
        test: ids(sizes.0 + sizes.1..expected),
    })
}

/// Selects samples by id, in the order given.
pub fn select<T: Clone>(samples: &[PatchSample<T>], ids: &[String]) -> Vec<PatchSample<T>> {
    let index: std::collections::HashMap<&str, &PatchSample<T>> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    ids.iter().filter_map(|id| index.get(id.as_str()).map(|s| (*s).clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` folds over `n` items; every index lands in exactly one test fold.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || n < k {
        return Err(DatasetError::InvalidFolds { k, samples: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0xf01d]));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = n / k + usize::from(f < n % k);
        let mut test = order[start..start + len].to_vec();
        test.sort_unstable();
        start += len;
        folds.push(test);
    }
    Ok(folds
        .iter()
        .enumerate()
        .map(|(f, test)| {
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, t)| t.iter().copied())
                .collect();
            train.sort_unstable();
            Fold {
                train,
                test: test.clone(),
            }
        })
        .collect())
}

/// (north, east) displacement of the patch center for a sub-patch index.
/// Index 0 is the north-west sub-patch, 4 the center, 8 the south-east one.
pub fn sub_patch_offset(center_index: u8) -> (f64, f64) {
    let row = (center_index / 3) as f64 - 1.0;
    let col = (center_index % 3) as f64 - 1.0;
    (-row * SUB_PATCH_M, col * SUB_PATCH_M)
}

/// Re-crops a patch around one of its nine sub-patch centers, then flips.
pub fn augment_sample<T: Scalar>(
    sample: &PatchSample<T>,
    scene: &ModalityStacks<T>,
    center_index: u8,
    flip_lr: bool,
    flip_ud: bool,
    scope: ScalingScope,
) -> Result<PatchSample<T>> {
    assert!(center_index < 9, "center index {center_index} out of range");
    let (dn, de) = sub_patch_offset(center_index);
    let window = sample.window.shifted(dn, de);
    let mut stacks = crop(scene, &window, scope).map_err(|e| match crop_for(&sample.sample_id, e) {
        DatasetError::OutOfBounds { sample_id } => DatasetError::AugmentationRejected(sample_id),
        other => other,
    })?;
    if flip_lr {
        stacks = ModalityStacks {
            rgb: stacks.rgb.flip_lr(),
            ndd: stacks.ndd.flip_lr(),
        };
    }
    if flip_ud {
        stacks = ModalityStacks {
            rgb: stacks.rgb.flip_ud(),
            ndd: stacks.ndd.flip_ud(),
        };
    }
    Ok(PatchSample {
        sample_id: format!("{}@c{}{}{}", sample.sample_id, center_index, if flip_lr { "h" } else { "" }, if flip_ud { "v" } else { "" }),
        window,
        label: sample.label,
        stacks,
        provenance: Provenance::Augmented {
            source_id: sample.sample_id.clone(),
            center_index,
            flip_lr,
            flip_ud,
        },
    })
}

/// One random augmentation choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentationDraw {
    pub center_index: u8,
    pub flip_lr: bool,
    pub flip_ud: bool,
}

pub fn draw_augmentation(rng: &mut Rng) -> AugmentationDraw {
    AugmentationDraw {
        center_index: rng.random_range(0..9u8),
        flip_lr: rng.random_bool(0.5),
        flip_ud: rng.random_bool(0.5),
    }
}

/// Generator for the `draw`-th synthetic sample of a class.
pub fn augmentation_rng(seed: u64, class: ClassLabel, draw: usize) -> Rng {
    rng::stream(seed, &[0xa0, class.id() as u64, draw as u64])
}

/// Augmentation Balancing: tops every class up to the largest class count
/// with augmented copies of randomly chosen originals. Originals are kept
/// unchanged and first in the output.
pub fn balance_classes<T: Scalar>(
    train: &[PatchSample<T>],
    scene: &ModalityStacks<T>,
    seed: u64,
    scope: ScalingScope,
) -> Result<Vec<PatchSample<T>>> {
    let counts = class_counts(train.iter().map(|s| s.label));
    if let Some(empty) = ClassLabel::ALL.iter().find(|c| counts[c.id()] == 0) {
        return Err(DatasetError::Unbalanceable(*empty));
    }
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut out = train.to_vec();
    for class in ClassLabel::ALL {
        let sources: Vec<&PatchSample<T>> = train.iter().filter(|s| s.label == class).collect();
        for draw in 0..target - counts[class.id()] {
            let mut rng = augmentation_rng(seed, class, draw);
            let source = sources[rng.random_range(0..sources.len())];
            let mut made = None;
            for _ in 0..MAX_AUGMENT_ATTEMPTS {
                let d = draw_augmentation(&mut rng);
                match augment_sample(source, scene, d.center_index, d.flip_lr, d.flip_ud, scope) {
                    Ok(s) => {
                        made = Some(s);
                        break;
                    }
                    Err(DatasetError::AugmentationRejected(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            let mut sample = match made {
                Some(s) => s,
                None => {
                    let d = draw_augmentation(&mut rng);
                    augment_sample(source, scene, CENTER_SUB_PATCH, d.flip_lr, d.flip_ud, scope)?
                }
            };
            sample.sample_id = format!("{}#{}-{}", sample.sample_id, class.name(), draw);
            out.push(sample);
        }
    }
    Ok(out)
}

/// Inverse-frequency loss weights, normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
    pub frequencies: Vec<u64>,
}

impl ClassWeights {
    pub fn uniform(n: usize) -> Self {
        Self {
            alpha: vec![1.0 / n as f64; n],
            frequencies: vec![1; n],
        }
    }
}

pub fn class_weights(frequencies: &[u64]) -> Result<ClassWeights> {
    if let Some(&bad) = frequencies.iter().find(|&&f| f == 0) {
        return Err(DatasetError::InvalidFrequency(bad));
    }
    let inv: Vec<f64> = frequencies.iter().map(|&f| 1.0 / f as f64).collect();
    let total: f64 = inv.iter().sum();
    Ok(ClassWeights {
        alpha: inv.iter().map(|w| w / total).collect(),
        frequencies: frequencies.to_vec(),
    })
}

/// Weights from the class frequencies of a sample set.
pub fn class_weights_for<T>(samples: &[PatchSample<T>]) -> Result<ClassWeights> {
    let counts = class_counts(samples.iter().map(|s| s.label));
    class_weights(&counts.map(|c| c as u64))
}

/// Per-class counts, canonical order.
pub fn label_counts<T>(samples: &[PatchSample<T>]) -> [usize; NUM_CLASSES] {
    class_counts(samples.iter().map(|s| s.label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::{NDD_BANDS, RGB_BANDS};
    use crate::raster::{GridGeometry, RasterGrid};
    use proptest::prelude::*;

    const RES: f64 = 3.0;
    const ORIGIN: GeoPoint = GeoPoint {
        northing_m: 9000.0,
        easting_m: 1000.0,
    };

    /// Scene whose pixel values encode their own coordinates.
    fn scene(rows: usize, cols: usize) -> ModalityStacks<f64> {
        let g = GridGeometry {
            rows,
            cols,
            resolution_m: RES,
            origin: ORIGIN,
        };
        let mut rgb = Vec::new();
        let mut ndd = Vec::new();
        for b in 0..3 {
            for r in 0..rows {
                for c in 0..cols {
                    rgb.push((b * 100000 + r * 1000 + c) as f64);
                    ndd.push(((r * cols + c) as f64 / (rows * cols) as f64) * if b == 2 { 0.5 } else { 1.0 });
                }
            }
        }
        ModalityStacks::new(
            RasterGrid::new(rgb, g, RGB_BANDS.map(String::from).to_vec(), None).unwrap(),
            RasterGrid::new(ndd, g, NDD_BANDS.map(String::from).to_vec(), None).unwrap(),
        )
        .unwrap()
    }

    /// Manifest row for the patch whose top-left pixel is (r, c).
    fn row(id: &str, r: usize, c: usize, class: ClassLabel) -> ManifestRow {
        ManifestRow {
            sample_id: id.to_string(),
            center_northing_m: ORIGIN.northing_m - r as f64 * RES - 15.0,
            center_easting_m: ORIGIN.easting_m + c as f64 * RES + 15.0,
            class_name: class.name().to_string(),
        }
    }

    fn grid_rows(counts: &[usize; 6], cols_per_row: usize) -> Vec<ManifestRow> {
        let mut rows = Vec::new();
        let mut k = 0;
        for class in ClassLabel::ALL {
            for _ in 0..counts[class.id()] {
                let (gr, gc) = (k / cols_per_row, k % cols_per_row);
                rows.push(row(&format!("s{k}"), 10 + gr * 10, 10 + gc * 10, class));
                k += 1;
            }
        }
        rows
    }

    #[test]
    fn manifest_counts_and_csv_roundtrip() {
        let counts = [29, 94, 44, 52, 60, 15];
        let rows = grid_rows(&counts, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&path, &rows).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);
        let sc = scene(10 + 15 * 10 + 10, 10 + 20 * 10 + 10);
        let samples = load_manifest(&path, &sc, ScalingScope::Scene).unwrap();
        assert_eq!(label_counts(&samples), counts);
        assert!(samples.iter().all(|s| s.stacks.rgb.rows() == 10 && s.stacks.ndd.cols() == 10));
        assert!(samples.iter().all(|s| s.provenance == Provenance::Original));
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&path, &[]).unwrap();
        let samples = load_manifest(&path, &scene(20, 20), ScalingScope::Scene).unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn manifest_errors() {
        let sc = scene(40, 40);
        let dup = vec![row("a", 0, 0, ClassLabel::Bog), row("a", 10, 10, ClassLabel::Bog)];
        assert!(matches!(samples_from_rows(&dup, &sc, ScalingScope::Scene), Err(DatasetError::DuplicateId(id)) if id == "a"));
        let mut unknown = vec![row("a", 0, 0, ClassLabel::Bog)];
        unknown[0].class_name = "tundra".into();
        assert!(matches!(samples_from_rows(&unknown, &sc, ScalingScope::Scene), Err(DatasetError::UnknownClass { .. })));
        let outside = vec![row("far", 35, 0, ClassLabel::Bog)];
        assert!(matches!(samples_from_rows(&outside, &sc, ScalingScope::Scene), Err(DatasetError::OutOfBounds { .. })));
    }

    fn toy_samples(n: usize) -> Vec<PatchSample<f64>> {
        let sc = scene(20, 20);
        let base = samples_from_rows(&[row("x", 5, 5, ClassLabel::Water)], &sc, ScalingScope::Scene).unwrap();
        (0..n)
            .map(|i| PatchSample {
                sample_id: format!("p{i}"),
                label: ClassLabel::ALL[i % 6],
                ..base[0].clone()
            })
            .collect()
    }

    #[test]
    fn split_is_deterministic_partition() {
        let samples = toy_samples(500);
        let a = split_iid(&samples, (300, 100, 100), 3).unwrap();
        let b = split_iid(&samples, (300, 100, 100), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (300, 100, 100));
        let mut all: Vec<&String> = a.train.iter().chain(&a.validation).chain(&a.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 500);
        assert_ne!(a, split_iid(&samples, (300, 100, 100), 4).unwrap());
        assert!(matches!(split_iid(&samples, (300, 100, 99), 3), Err(DatasetError::SizeMismatch { .. })));
        assert_eq!(proportional_sizes(500), (300, 100, 100));
    }

    /// Hypergeometric oracle: a class of K members in N, drawing n for training.
    #[test]
    fn split_class_fractions_match_hypergeometric() {
        let counts = [29usize, 94, 44, 52, 60, 221];
        let mut samples = toy_samples(500);
        let mut k = 0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                samples[k].label = ClassLabel::ALL[c];
                k += 1;
            }
        }
        let (n_total, n_draw, seeds) = (500.0, 300.0, 100.0);
        for (c, &kk) in counts.iter().enumerate() {
            let kk = kk as f64;
            let mean = n_draw * kk / n_total;
            let var = n_draw * (kk / n_total) * (1.0 - kk / n_total) * (n_total - n_draw) / (n_total - 1.0);
            let mut total = 0.0;
            for seed in 0..100 {
                let split = split_iid(&samples, (300, 100, 100), seed).unwrap();
                let train = select(&samples, &split.train);
                total += train.iter().filter(|s| s.label.id() == c).count() as f64;
            }
            let avg = total / seeds;
            let sigma = (var / seeds).sqrt();
            assert!((avg - mean).abs() <= 3.0 * sigma, "class {c}: {avg} vs {mean} ± {sigma}");
        }
    }

    #[test]
    fn kfold_partitions() {
        let folds = kfold(9, 3, 1).unwrap();
        assert_eq!(folds.len(), 3);
        let mut tested = vec![0; 9];
        let mut trained = vec![0; 9];
        for f in &folds {
            assert_eq!(f.test.len(), 3);
            f.test.iter().for_each(|&i| tested[i] += 1);
            f.train.iter().for_each(|&i| trained[i] += 1);
            assert!(f.test.iter().all(|i| !f.train.contains(i)));
        }
        assert!(tested.iter().all(|&t| t == 1));
        assert!(trained.iter().all(|&t| t == 2));
        assert_eq!(folds, kfold(9, 3, 1).unwrap());
        assert!(matches!(kfold(9, 1, 1), Err(DatasetError::InvalidFolds { .. })));
        assert!(matches!(kfold(2, 3, 1), Err(DatasetError::InvalidFolds { .. })));
    }

    fn one_sample(sc: &ModalityStacks<f64>, r: usize, c: usize) -> PatchSample<f64> {
        samples_from_rows(&[row("src", r, c, ClassLabel::Wetland)], sc, ScalingScope::Scene)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn center_sub_patch_is_identity() {
        let sc = scene(40, 40);
        let s = one_sample(&sc, 15, 15);
        let a = augment_sample(&s, &sc, 4, false, false, ScalingScope::Scene).unwrap();
        assert_eq!(a.stacks, s.stacks);
        assert_eq!(a.label, s.label);
    }

    #[test]
    fn flip_twice_restores() {
        let sc = scene(40, 40);
        let s = one_sample(&sc, 15, 15);
        let once = augment_sample(&s, &sc, 4, true, false, ScalingScope::Scene).unwrap();
        assert_ne!(once.stacks, s.stacks);
        let twice = ModalityStacks {
            rgb: once.stacks.rgb.flip_lr(),
            ndd: once.stacks.ndd.flip_lr(),
        };
        assert_eq!(twice, s.stacks);
    }

    #[test]
    fn top_left_sub_patch_geometry() {
        let sc = scene(40, 40);
        let s = one_sample(&sc, 15, 15);
        let a = augment_sample(&s, &sc, 0, false, false, ScalingScope::Scene).unwrap();
        // north-west by 10 m on each axis
        let expected_center = GeoPoint::new(s.window.center.northing_m + 10.0, s.window.center.easting_m - 10.0);
        assert_eq!(a.window.center, expected_center);
        let manual = GeoWindow::new(expected_center, 30.0).unwrap();
        assert_eq!(a.stacks.rgb, extract_patch(&sc.rgb, &manual).unwrap());
        assert_eq!(a.stacks.ndd, extract_patch(&sc.ndd, &manual).unwrap());
        // 10 m at 3 m pixels rounds to a 3 pixel shift
        assert_eq!(a.stacks.rgb.get(0, 0, 0), sc.rgb.get(0, 12, 12));
        match a.provenance {
            Provenance::Augmented { ref source_id, center_index, .. } => {
                assert_eq!(source_id, "src");
                assert_eq!(center_index, 0);
            }
            _ => panic!("expected augmented provenance"),
        }
    }

    #[test]
    fn edge_augmentation_rejected() {
        let sc = scene(40, 40);
        let s = one_sample(&sc, 0, 0);
        assert!(matches!(
            augment_sample(&s, &sc, 0, false, false, ScalingScope::Scene),
            Err(DatasetError::AugmentationRejected(_))
        ));
        assert!(augment_sample(&s, &sc, 8, false, false, ScalingScope::Scene).is_ok());
    }

    #[test]
    fn balance_table_one_counts() {
        let counts = [29, 94, 44, 52, 60, 15];
        let rows = grid_rows(&counts, 20);
        let sc = scene(10 + 15 * 10 + 10, 10 + 20 * 10 + 10);
        let samples = samples_from_rows(&rows, &sc, ScalingScope::Scene).unwrap();
        let balanced = balance_classes(&samples, &sc, 42, ScalingScope::Scene).unwrap();
        assert_eq!(label_counts(&balanced), [94; 6]);
        assert_eq!(&balanced[..samples.len()], samples.as_slice());
        let originals: std::collections::HashMap<&str, ClassLabel> =
            samples.iter().map(|s| (s.sample_id.as_str(), s.label)).collect();
        for s in &balanced[samples.len()..] {
            match &s.provenance {
                Provenance::Augmented { source_id, .. } => assert_eq!(originals[source_id.as_str()], s.label),
                Provenance::Original => panic!("added sample marked original"),
            }
        }
        let ids: HashSet<&str> = balanced.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids.len(), balanced.len());
        assert_eq!(balanced, balance_classes(&samples, &sc, 42, ScalingScope::Scene).unwrap());
    }

    #[test]
    fn balanced_input_is_fixed_point() {
        let counts = [3; 6];
        let rows = grid_rows(&counts, 6);
        let sc = scene(60, 90);
        let samples = samples_from_rows(&rows, &sc, ScalingScope::Scene).unwrap();
        assert_eq!(balance_classes(&samples, &sc, 1, ScalingScope::Scene).unwrap(), samples);
    }

    #[test]
    fn single_sample_class_gets_all_draws() {
        let counts = [5, 5, 5, 5, 5, 1];
        let rows = grid_rows(&counts, 6);
        let sc = scene(80, 90);
        let samples = samples_from_rows(&rows, &sc, ScalingScope::Scene).unwrap();
        let source = samples.iter().find(|s| s.label == ClassLabel::Wetland).unwrap().sample_id.clone();
        let balanced = balance_classes(&samples, &sc, 9, ScalingScope::Scene).unwrap();
        let added: Vec<_> = balanced[samples.len()..].iter().collect();
        assert_eq!(added.len(), 4);
        for s in added {
            assert_eq!(s.label, ClassLabel::Wetland);
            assert!(matches!(&s.provenance, Provenance::Augmented { source_id, .. } if *source_id == source));
        }
    }

    #[test]
    fn balance_needs_every_class() {
        let rows = grid_rows(&[2, 2, 2, 2, 2, 0], 6);
        let sc = scene(60, 90);
        let samples = samples_from_rows(&rows, &sc, ScalingScope::Scene).unwrap();
        assert!(matches!(balance_classes(&samples, &sc, 1, ScalingScope::Scene), Err(DatasetError::Unbalanceable(ClassLabel::Wetland))));
    }

    #[test]
    fn draw_statistics() {
        let n = 10_000;
        let mut lr = 0;
        let mut ud = 0;
        let mut centers = [0usize; 9];
        for draw in 0..n {
            let d = draw_augmentation(&mut augmentation_rng(5, ClassLabel::Wetland, draw));
            lr += d.flip_lr as usize;
            ud += d.flip_ud as usize;
            centers[d.center_index as usize] += 1;
        }
        let (lr, ud) = (lr as f64 / n as f64, ud as f64 / n as f64);
        assert!((0.485..=0.515).contains(&lr), "{lr}");
        assert!((0.485..=0.515).contains(&ud), "{ud}");
        let expect = n as f64 / 9.0;
        let chi2: f64 = centers.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        // chi-square critical value, 8 degrees of freedom, p = 0.01
        assert!(chi2 < 20.090, "chi2 = {chi2}");
    }

    #[test]
    fn class_weight_cases() {
        assert_eq!(class_weights(&[7, 7]).unwrap().alpha, vec![0.5, 0.5]);
        let w = class_weights(&[1, 3]).unwrap();
        assert!((w.alpha[0] - 0.75).abs() < 1e-15 && (w.alpha[1] - 0.25).abs() < 1e-15);
        let table = [29u64, 94, 44, 52, 60, 15];
        let w = class_weights(&table).unwrap();
        let denom = 1.0 / 29.0 + 1.0 / 94.0 + 1.0 / 44.0 + 1.0 / 52.0 + 1.0 / 60.0 + 1.0 / 15.0;
        for (a, f) in w.alpha.iter().zip(table) {
            assert!((a - (1.0 / f as f64) / denom).abs() <= 1e-12);
        }
        assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(matches!(class_weights(&[3, 0]), Err(DatasetError::InvalidFrequency(0))));
    }

    proptest! {
        #[test]
        fn prop_weights_normalized_and_ordered(freqs in proptest::collection::vec(1u64..10_000, 1..12)) {
            let w = class_weights(&freqs).unwrap();
            prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for i in 0..freqs.len() {
                for j in 0..freqs.len() {
                    if freqs[i] < freqs[j] {
                        prop_assert!(w.alpha[i] > w.alpha[j]);
                    }
                }
            }
        }

        #[test]
        fn prop_kfold_pure(n in 3usize..60, k in 2usize..6, seed in 0u64..1000) {
            prop_assume!(n >= k);
            let a = kfold(n, k, seed).unwrap();
            prop_assert_eq!(&a, &kfold(n, k, seed).unwrap());
            let mut seen = vec![0; n];
            for f in &a {
                for &i in &f.test { seen[i] += 1; }
                prop_assert_eq!(f.train.len() + f.test.len(), n);
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }
}
