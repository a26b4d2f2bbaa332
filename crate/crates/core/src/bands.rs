//! Derived bands and the two modality stacks fed to the backbones.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, Band, RasterError, RasterGrid};
use crate::scalar::Scalar;

pub const RGB_BANDS: [&str; 3] = ["R", "G", "B"];
pub const NDD_BANDS: [&str; 3] = ["NIR", "DEM", "NDVI"];

#[derive(Debug, Error)]
pub enum BandError {
    #[error("band shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("band has no valid pixels")]
    AllNodata,
    #[error("expected {expected} bands, found {found}")]
    BandCount { expected: usize, found: usize },
    #[error("{0}")]
    GeometryMismatch(String),
    #[error("elevation grid does not overlap the imagery")]
    NoOverlap,
    #[error(transparent)]
    Raster(RasterError),
}

impl From<RasterError> for BandError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::NoOverlap => BandError::NoOverlap,
            other => BandError::Raster(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, BandError>;

/// Where min/max statistics for NIR and DEM scaling come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingScope {
    #[default]
    Scene,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub nir: ScaleStats,
    pub dem: ScaleStats,
}

/// RGB stack and the NIR/DEM/NDVI stack over one pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStacks<T> {
    pub rgb: RasterGrid<T>,
    pub ndd: RasterGrid<T>,
}

impl<T: Scalar> ModalityStacks<T> {
    pub fn new(rgb: RasterGrid<T>, ndd: RasterGrid<T>) -> Result<Self> {
        if rgb.bands() != 3 {
            return Err(BandError::BandCount {
                expected: 3,
                found: rgb.bands(),
            });
        }
        if ndd.bands() != 3 {
            return Err(BandError::BandCount {
                expected: 3,
                found: ndd.bands(),
            });
        }
        if rgb.geometry() != ndd.geometry() {
            return Err(BandError::GeometryMismatch(format!(
                "rgb {:?} vs ndd {:?}",
                rgb.geometry(),
                ndd.geometry()
            )));
        }
        let check = |band: usize, lo: f64, hi: f64| -> Result<()> {
            let plane = ndd.band_slice(band);
            for (i, v) in plane.iter().enumerate() {
                let valid = ndd.nodata_mask().is_none_or(|m| !m[i]);
                let v = v.as_f64();
                if valid && !(lo..=hi).contains(&v) {
                    return Err(BandError::GeometryMismatch(format!(
                        "{} value {v} outside [{lo}, {hi}]",
                        NDD_BANDS[band]
                    )));
                }
            }
            Ok(())
        };
        check(0, 0.0, 1.0)?;
        check(1, 0.0, 1.0)?;
        check(2, -1.0, 1.0)?;
        Ok(Self { rgb, ndd })
    }

    pub fn rows(&self) -> usize {
        self.rgb.rows()
    }

    pub fn cols(&self) -> usize {
        self.rgb.cols()
    }

    pub fn map_both(
        &self,
        f: impl Fn(&RasterGrid<T>) -> std::result::Result<RasterGrid<T>, RasterError>,
    ) -> Result<Self> {
        Ok(Self {
            rgb: f(&self.rgb)?,
            ndd: f(&self.ndd)?,
        })
    }
}

/// Normalized difference vegetation index. Pixels where both inputs are zero
/// are set to zero and flagged nodata; input nodata propagates.
pub fn compute_ndvi<T: Scalar>(nir: &Band<T>, red: &Band<T>) -> Result<Band<T>> {
    if nir.rows != red.rows || nir.cols != red.cols {
        return Err(BandError::ShapeMismatch(nir.rows, nir.cols, red.rows, red.cols));
    }
    let n = nir.values.len();
    let mut values = Vec::with_capacity(n);
    let mut mask = vec![false; n];
    for i in 0..n {
        let (a, b) = (nir.values[i], red.values[i]);
        let sum = a + b;
        if sum == T::zero() || nir.is_nodata(i) || red.is_nodata(i) {
            values.push(T::zero());
            mask[i] = true;
        } else {
            values.push((a - b) / sum);
        }
    }
    let any = mask.iter().any(|&m| m);
    Ok(Band {
        rows: nir.rows,
        cols: nir.cols,
        values,
        nodata: any.then_some(mask),
    })
}

/// Min/max over valid pixels.
pub fn band_stats<T: Scalar>(band: &Band<T>) -> Result<ScaleStats> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut seen = false;
    for (i, v) in band.values.iter().enumerate() {
        if band.is_nodata(i) {
            continue;
        }
        seen = true;
        let v = v.as_f64();
        min = min.min(v);
        max = max.max(v);
    }
    if !seen {
        return Err(BandError::AllNodata);
    }
    Ok(ScaleStats { min, max })
}

/// Maps `[min, max]` onto `[0, 1]`; a constant band maps to zeros and
/// nodata pixels are written as zero.
pub fn apply_scale<T: Scalar>(band: &Band<T>, stats: ScaleStats) -> Band<T> {
    let span = stats.max - stats.min;
    let values = band
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if band.is_nodata(i) || span <= 0.0 {
                T::zero()
            } else {
                let lo = T::of(stats.min);
                ((v - lo) / T::of(span)).max(T::zero()).min(T::one())
            }
        })
        .collect();
    Band {
        rows: band.rows,
        cols: band.cols,
        values,
        nodata: band.nodata.clone(),
    }
}

pub fn minmax_scale<T: Scalar>(band: &Band<T>) -> Result<Band<T>> {
    Ok(apply_scale(band, band_stats(band)?))
}

/// Builds both modality stacks. NIR must share the RGB grid; the DEM may use
/// any resolution or origin and is bilinearly sampled onto the RGB grid.
/// NIR and DEM are min/max scaled over the whole scene.
pub fn assemble_modalities<T: Scalar>(
    rgb_grid: &RasterGrid<T>,
    nir_grid: &RasterGrid<T>,
    dem_grid: &RasterGrid<T>,
) -> Result<(ModalityStacks<T>, ScalingStats)> {
    if rgb_grid.bands() != 3 {
        return Err(BandError::BandCount {
            expected: 3,
            found: rgb_grid.bands(),
        });
    }
    if nir_grid.bands() != 1 || dem_grid.bands() != 1 {
        return Err(BandError::BandCount {
            expected: 1,
            found: if nir_grid.bands() != 1 {
                nir_grid.bands()
            } else {
                dem_grid.bands()
            },
        });
    }
    if rgb_grid.geometry() != nir_grid.geometry() {
        return Err(BandError::GeometryMismatch(
            "NIR grid must match the RGB grid".into(),
        ));
    }
    let target = rgb_grid.geometry();
    let dem_on_grid = if dem_grid.geometry() == target {
        dem_grid.clone()
    } else {
        raster::resample_onto(dem_grid, &target)?
    };

    let red_index = rgb_grid.band_index("R").unwrap_or(0);
    let red = rgb_grid.band(red_index);
    let nir = nir_grid.band(0);
    let dem = dem_on_grid.band(0);

    let ndvi = compute_ndvi(&nir, &red)?;
    let nir_stats = band_stats(&nir)?;
    let dem_stats = band_stats(&dem)?;
    let nir_scaled = apply_scale(&nir, nir_stats);
    let dem_scaled = apply_scale(&dem, dem_stats);

    let rgb = RasterGrid::from_bands(
        (0..3).map(|b| rgb_grid.band(b)).collect(),
        &RGB_BANDS,
        target.resolution_m,
        target.origin,
    )?;
    let ndd = RasterGrid::from_bands(
        vec![nir_scaled, dem_scaled, ndvi],
        &NDD_BANDS,
        target.resolution_m,
        target.origin,
    )?;
    Ok((
        ModalityStacks::new(rgb, ndd)?,
        ScalingStats {
            nir: nir_stats,
            dem: dem_stats,
        },
    ))
}

/// Re-scales the NIR and DEM channels of a patch with the patch's own
/// statistics (the per-patch scaling scope).
pub fn rescale_patch<T: Scalar>(stacks: &ModalityStacks<T>) -> Result<ModalityStacks<T>> {
    let ndd = &stacks.ndd;
    let nir = ndd.band(0);
    let dem = ndd.band(1);
    let rescale = |b: &Band<T>| -> Result<Band<T>> {
        match band_stats(b) {
            Ok(s) => Ok(apply_scale(b, s)),
            Err(BandError::AllNodata) => Ok(b.clone()),
            Err(e) => Err(e),
        }
    };
    let ndd = RasterGrid::from_bands(
        vec![rescale(&nir)?, rescale(&dem)?, ndd.band(2)],
        &NDD_BANDS,
        ndd.resolution_m(),
        ndd.origin(),
    )?;
    ModalityStacks::new(stacks.rgb.clone(), ndd)
}
