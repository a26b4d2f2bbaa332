//! Georeferenced raster grids: construction, the portable on-disk format,
//! bilinear resampling and window extraction.
//!
//! Coordinates live in a planar metric frame. `origin` is the (northing,
//! easting) of the top-left pixel corner; rows advance southward and columns
//! eastward, so pixel `(r, c)` has its center at
//! `(origin.northing_m - (r + 0.5) * res, origin.easting_m + (c + 0.5) * res)`.
//!
//! The portable format is a text header of `key: value` lines terminated by a
//! blank line, followed by the band-major, row-major little-endian `f32`
//! payload. When a nodata mask is present the header carries
//! `nodata_mask: u8` and one byte per pixel follows the float payload.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Upper bound on bands accepted from disk.
pub const MAX_BANDS: usize = 64;

const WINDOW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {found} bytes but the header implies {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unsupported band count {0} (allowed 1..={MAX_BANDS})")]
    UnsupportedBandCount(usize),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("invalid resolution {0}")]
    InvalidResolution(f64),
    #[error("window {size_m} m is not a whole number of {resolution_m} m pixels")]
    NonIntegralWindow { size_m: f64, resolution_m: f64 },
    #[error("window centered at ({northing_m}, {easting_m}) with size {size_m} m leaves the grid extent")]
    OutOfBounds {
        northing_m: f64,
        easting_m: f64,
        size_m: f64,
    },
    #[error("grids do not share geometry: {0}")]
    GeometryMismatch(String),
    #[error("grid extents do not overlap")]
    NoOverlap,
}

pub type Result<T> = std::result::Result<T, RasterError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub northing_m: f64,
    pub easting_m: f64,
}

impl GeoPoint {
    pub fn new(northing_m: f64, easting_m: f64) -> Self {
        Self {
            northing_m,
            easting_m,
        }
    }
}

/// Square ground window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoWindow {
    pub center: GeoPoint,
    pub size_m: f64,
}

impl GeoWindow {
    pub fn new(center: GeoPoint, size_m: f64) -> Result<Self> {
        if !(size_m.is_finite() && size_m > 0.0) {
            return Err(RasterError::Invalid(format!("window size {size_m}")));
        }
        Ok(Self { center, size_m })
    }

    /// Same size, center moved by `(d_north, d_east)` meters.
    pub fn shifted(&self, d_north: f64, d_east: f64) -> Self {
        Self {
            center: GeoPoint::new(
                self.center.northing_m + d_north,
                self.center.easting_m + d_east,
            ),
            size_m: self.size_m,
        }
    }
}

/// Pixel lattice placement without values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub resolution_m: f64,
    pub origin: GeoPoint,
}

impl GridGeometry {
    pub fn pixel_center(&self, row: usize, col: usize) -> GeoPoint {
        GeoPoint::new(
            self.origin.northing_m - (row as f64 + 0.5) * self.resolution_m,
            self.origin.easting_m + (col as f64 + 0.5) * self.resolution_m,
        )
    }

    /// (north, south, west, east) edges in meters.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.northing_m,
            self.origin.northing_m - self.rows as f64 * self.resolution_m,
            self.origin.easting_m,
            self.origin.easting_m + self.cols as f64 * self.resolution_m,
        )
    }

    fn overlaps(&self, other: &GridGeometry) -> bool {
        let (an, as_, aw, ae) = self.bounds();
        let (bn, bs, bw, be) = other.bounds();
        an.min(bn) > as_.max(bs) && ae.min(be) > aw.max(bw)
    }
}

/// One band as a flat row-major plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Band<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
    pub nodata: Option<Vec<bool>>,
}

impl<T: Scalar> Band<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Self {
        assert_eq!(values.len(), rows * cols, "band length");
        Self {
            rows,
            cols,
            values,
            nodata: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    #[inline]
    pub fn is_nodata(&self, i: usize) -> bool {
        self.nodata.as_ref().is_some_and(|m| m[i])
    }
}

/// Multi-band georeferenced grid. Values are immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid<T> {
    values: Vec<T>,
    bands: usize,
    geometry: GridGeometry,
    band_names: Vec<String>,
    nodata: Option<Vec<bool>>,
}

impl<T: Scalar> RasterGrid<T> {
    /// Builds a grid from band-major values, checking every invariant.
    pub fn new(
        values: Vec<T>,
        geometry: GridGeometry,
        band_names: Vec<String>,
        nodata: Option<Vec<bool>>,
    ) -> Result<Self> {
        let GridGeometry {
            rows,
            cols,
            resolution_m,
            ..
        } = geometry;
        if !(resolution_m.is_finite() && resolution_m > 0.0) {
            return Err(RasterError::InvalidResolution(resolution_m));
        }
        if rows == 0 || cols == 0 {
            return Err(RasterError::Invalid(format!("empty grid {rows}x{cols}")));
        }
        let bands = band_names.len();
        if bands == 0 {
            return Err(RasterError::Invalid("no bands".into()));
        }
        let unique: HashSet<&str> = band_names.iter().map(String::as_str).collect();
        if unique.len() != bands {
            return Err(RasterError::Invalid("duplicate band names".into()));
        }
        if values.len() != bands * rows * cols {
            return Err(RasterError::Invalid(format!(
                "{} values for {bands} bands of {rows}x{cols}",
                values.len()
            )));
        }
        if let Some(mask) = &nodata {
            if mask.len() != rows * cols {
                return Err(RasterError::Invalid("nodata mask size".into()));
            }
        }
        Ok(Self {
            values,
            bands,
            geometry,
            band_names,
            nodata,
        })
    }

    /// Stacks single bands that share one geometry. Nodata masks are OR-ed.
    pub fn from_bands(
        bands: Vec<Band<T>>,
        names: &[&str],
        resolution_m: f64,
        origin: GeoPoint,
    ) -> Result<Self> {
        let first = bands
            .first()
            .ok_or_else(|| RasterError::Invalid("no bands".into()))?;
        let (rows, cols) = (first.rows, first.cols);
        if names.len() != bands.len() {
            return Err(RasterError::Invalid("band name count".into()));
        }
        let mut values = Vec::with_capacity(bands.len() * rows * cols);
        let mut mask: Option<Vec<bool>> = None;
        for b in &bands {
            if b.rows != rows || b.cols != cols {
                return Err(RasterError::Invalid("bands differ in shape".into()));
            }
            values.extend_from_slice(&b.values);
            if let Some(m) = &b.nodata {
                let acc = mask.get_or_insert_with(|| vec![false; rows * cols]);
                acc.iter_mut().zip(m).for_each(|(a, &x)| *a |= x);
            }
        }
        Self::new(
            values,
            GridGeometry {
                rows,
                cols,
                resolution_m,
                origin,
            },
            names.iter().map(|s| s.to_string()).collect(),
            mask,
        )
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn rows(&self) -> usize {
        self.geometry.rows
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols
    }

    pub fn resolution_m(&self) -> f64 {
        self.geometry.resolution_m
    }

    pub fn origin(&self) -> GeoPoint {
        self.geometry.origin
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn nodata_mask(&self) -> Option<&[bool]> {
        self.nodata.as_deref()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.band_names.iter().position(|n| n == name)
    }

    pub fn band_slice(&self, band: usize) -> &[T] {
        let n = self.rows() * self.cols();
        &self.values[band * n..(band + 1) * n]
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> T {
        let (rows, cols) = (self.rows(), self.cols());
        self.values[(band * rows + row) * cols + col]
    }

    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.nodata
            .as_ref()
            .is_some_and(|m| m[row * self.cols() + col])
    }

    /// Copy of one band carrying the grid's nodata mask.
    pub fn band(&self, band: usize) -> Band<T> {
        Band {
            rows: self.rows(),
            cols: self.cols(),
            values: self.band_slice(band).to_vec(),
            nodata: self.nodata.clone(),
        }
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> GeoPoint {
        self.geometry.pixel_center(row, col)
    }

    /// Same values with replaced band names.
    pub fn with_band_names(self, names: &[&str]) -> Result<Self> {
        Self::new(
            self.values,
            self.geometry,
            names.iter().map(|s| s.to_string()).collect(),
            self.nodata,
        )
    }

    /// Pixel-indexed sub-grid; geometry follows the crop.
    pub fn crop_pixels(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || row0 + rows > self.rows() || col0 + cols > self.cols() {
            return Err(RasterError::Invalid(format!(
                "crop {rows}x{cols} at ({row0},{col0}) exceeds {}x{}",
                self.rows(),
                self.cols()
            )));
        }
        let mut values = Vec::with_capacity(self.bands * rows * cols);
        for b in 0..self.bands {
            let plane = self.band_slice(b);
            for r in row0..row0 + rows {
                let start = r * self.cols() + col0;
                values.extend_from_slice(&plane[start..start + cols]);
            }
        }
        let nodata = self.nodata.as_ref().map(|m| {
            (row0..row0 + rows)
                .flat_map(|r| m[r * self.cols() + col0..r * self.cols() + col0 + cols].iter().copied())
                .collect()
        });
        let res = self.resolution_m();
        let origin = GeoPoint::new(
            self.origin().northing_m - row0 as f64 * res,
            self.origin().easting_m + col0 as f64 * res,
        );
        Ok(Self {
            values,
            bands: self.bands,
            geometry: GridGeometry {
                rows,
                cols,
                resolution_m: res,
                origin,
            },
            band_names: self.band_names.clone(),
            nodata,
        })
    }

    /// Mirrors columns (left-right). Geometry is unchanged.
    pub fn flip_lr(&self) -> Self {
        self.remap(|r, c, _rows, cols| (r, cols - 1 - c))
    }

    /// Mirrors rows (up-down). Geometry is unchanged.
    pub fn flip_ud(&self) -> Self {
        self.remap(|r, c, rows, _cols| (rows - 1 - r, c))
    }

    fn remap(&self, src: impl Fn(usize, usize, usize, usize) -> (usize, usize)) -> Self {
        let (rows, cols) = (self.rows(), self.cols());
        let mut values = Vec::with_capacity(self.values.len());
        for b in 0..self.bands {
            for r in 0..rows {
                for c in 0..cols {
                    let (sr, sc) = src(r, c, rows, cols);
                    values.push(self.get(b, sr, sc));
                }
            }
        }
        let nodata = self.nodata.as_ref().map(|m| {
            let mut out = Vec::with_capacity(m.len());
            for r in 0..rows {
                for c in 0..cols {
                    let (sr, sc) = src(r, c, rows, cols);
                    out.push(m[sr * cols + sc]);
                }
            }
            out
        });
        Self {
            values,
            bands: self.bands,
            geometry: self.geometry,
            band_names: self.band_names.clone(),
            nodata,
        }
    }

    /// Converts the value type.
    pub fn cast<U: Scalar>(&self) -> RasterGrid<U> {
        RasterGrid {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            bands: self.bands,
            geometry: self.geometry,
            band_names: self.band_names.clone(),
            nodata: self.nodata.clone(),
        }
    }

    /// Pixel offset and side length of a window, validating bounds and
    /// the whole-pixel size rule.
    pub fn window_pixels(&self, window: &GeoWindow) -> Result<(usize, usize, usize)> {
        let res = self.resolution_m();
        let side_f = window.size_m / res;
        let side = side_f.round();
        if side < 1.0 || (side_f - side).abs() > WINDOW_TOLERANCE * side_f.max(1.0) {
            return Err(RasterError::NonIntegralWindow {
                size_m: window.size_m,
                resolution_m: res,
            });
        }
        let side = side as usize;
        let top = window.center.northing_m + window.size_m / 2.0;
        let left = window.center.easting_m - window.size_m / 2.0;
        let row0 = (self.origin().northing_m - top) / res;
        let col0 = (left - self.origin().easting_m) / res;
        let oob = || RasterError::OutOfBounds {
            northing_m: window.center.northing_m,
            easting_m: window.center.easting_m,
            size_m: window.size_m,
        };
        let tol = WINDOW_TOLERANCE * side as f64;
        if row0 < -tol
            || col0 < -tol
            || row0 + side as f64 > self.rows() as f64 + tol
            || col0 + side as f64 > self.cols() as f64 + tol
        {
            return Err(oob());
        }
        let row0 = (row0.round().max(0.0) as usize).min(self.rows() - side);
        let col0 = (col0.round().max(0.0) as usize).min(self.cols() - side);
        Ok((row0, col0, side))
    }
}

/// Crops the pixels covered by a ground window.
pub fn extract_patch<T: Scalar>(grid: &RasterGrid<T>, window: &GeoWindow) -> Result<RasterGrid<T>> {
    let (row0, col0, side) = grid.window_pixels(window)?;
    grid.crop_pixels(row0, col0, side, side)
}

/// Bilinear weights for fractional source coordinate `u` on an axis of `n`
/// pixels: (lower index, upper index, fraction toward upper).
#[inline]
fn axis_support(u: f64, n: usize) -> (usize, usize, f64) {
    let u = u.clamp(0.0, (n - 1) as f64);
    let lo = u.floor();
    let frac = u - lo;
    let lo = lo as usize;
    let hi = if frac > 0.0 { (lo + 1).min(n - 1) } else { lo };
    (lo, hi, frac)
}

#[inline]
fn snap(u: f64) -> f64 {
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        r
    } else {
        u
    }
}

#[inline]
fn blend<T: Scalar>(plane: &[T], cols: usize, r: (usize, usize, f64), c: (usize, usize, f64)) -> T {
    let (r0, r1, fr) = r;
    let (c0, c1, fc) = c;
    let v00 = plane[r0 * cols + c0];
    if fr == 0.0 && fc == 0.0 {
        return v00;
    }
    let (fr, fc) = (T::of(fr), T::of(fc));
    let one = T::one();
    let top = if fc == T::zero() {
        v00
    } else {
        v00 * (one - fc) + plane[r0 * cols + c1] * fc
    };
    if fr == T::zero() {
        return top;
    }
    let bottom = if fc == T::zero() {
        plane[r1 * cols + c0]
    } else {
        plane[r1 * cols + c0] * (one - fc) + plane[r1 * cols + c1] * fc
    };
    top * (one - fr) + bottom * fr
}

/// Samples `src` at the pixel centers of `target`. Target pixels whose
/// center falls outside the source extent become nodata with value zero;
/// pixels whose interpolation support touches source nodata are flagged too.
pub fn resample_onto<T: Scalar>(src: &RasterGrid<T>, target: &GridGeometry) -> Result<RasterGrid<T>> {
    if !(target.resolution_m.is_finite() && target.resolution_m > 0.0) {
        return Err(RasterError::InvalidResolution(target.resolution_m));
    }
    let sg = src.geometry();
    if !sg.overlaps(target) {
        return Err(RasterError::NoOverlap);
    }
    let ratio = target.resolution_m / sg.resolution_m;
    let d_row = (sg.origin.northing_m - target.origin.northing_m) / sg.resolution_m;
    let d_col = (target.origin.easting_m - sg.origin.easting_m) / sg.resolution_m;
    let (srows, scols) = (sg.rows, sg.cols);

    let axis = |i: usize, offset: f64, n: usize| -> Option<(usize, usize, f64)> {
        let u = snap(offset + (i as f64 + 0.5) * ratio - 0.5);
        if u < -0.5 || u > n as f64 - 0.5 {
            None
        } else {
            Some(axis_support(u, n))
        }
    };
    let row_support: Vec<_> = (0..target.rows).map(|i| axis(i, d_row, srows)).collect();
    let col_support: Vec<_> = (0..target.cols).map(|j| axis(j, d_col, scols)).collect();

    let n_out = target.rows * target.cols;
    let mut values = Vec::with_capacity(src.bands() * n_out);
    for b in 0..src.bands() {
        let plane = src.band_slice(b);
        for rs in &row_support {
            for cs in &col_support {
                values.push(match (rs, cs) {
                    (Some(r), Some(c)) => blend(plane, scols, *r, *c),
                    _ => T::zero(),
                });
            }
        }
    }

    let src_mask = src.nodata_mask();
    let mut mask = vec![false; n_out];
    let mut any = false;
    for (i, rs) in row_support.iter().enumerate() {
        for (j, cs) in col_support.iter().enumerate() {
            let tainted = match (rs, cs) {
                (Some(r), Some(c)) => src_mask.is_some_and(|m| {
                    [r.0, r.1]
                        .iter()
                        .any(|&rr| [c.0, c.1].iter().any(|&cc| m[rr * scols + cc]))
                }),
                _ => true,
            };
            mask[i * target.cols + j] = tainted;
            any |= tainted;
        }
    }
    RasterGrid::new(
        values,
        *target,
        src.band_names().to_vec(),
        if any || src_mask.is_some() { Some(mask) } else { None },
    )
}

/// Resamples to a new pixel size over the same extent.
pub fn resample_bilinear<T: Scalar>(grid: &RasterGrid<T>, target_resolution_m: f64) -> Result<RasterGrid<T>> {
    if !(target_resolution_m.is_finite() && target_resolution_m > 0.0) {
        return Err(RasterError::InvalidResolution(target_resolution_m));
    }
    let scale = grid.resolution_m() / target_resolution_m;
    let target = GridGeometry {
        rows: ((grid.rows() as f64 * scale).round() as usize).max(1),
        cols: ((grid.cols() as f64 * scale).round() as usize).max(1),
        resolution_m: target_resolution_m,
        origin: grid.origin(),
    };
    resample_onto(grid, &target)
}

/// Bilinear resize of a single row-major plane, aligning pixel centers.
pub fn resize_plane<T: Scalar>(plane: &[T], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<T> {
    let rs: Vec<_> = (0..out_rows)
        .map(|i| axis_support(snap((i as f64 + 0.5) * rows as f64 / out_rows as f64 - 0.5), rows))
        .collect();
    let cs: Vec<_> = (0..out_cols)
        .map(|j| axis_support(snap((j as f64 + 0.5) * cols as f64 / out_cols as f64 - 0.5), cols))
        .collect();
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for r in &rs {
        for c in &cs {
            out.push(blend(plane, cols, *r, *c));
        }
    }
    out
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Serializes a grid into the portable format.
pub fn encode_raster<T: Scalar>(grid: &RasterGrid<T>) -> Vec<u8> {
    let g = grid.geometry();
    let mut header = String::new();
    header.push_str(&format!("bands: {}\n", grid.bands()));
    header.push_str(&format!("rows: {}\n", g.rows));
    header.push_str(&format!("cols: {}\n", g.cols));
    header.push_str(&format!("resolution_m: {}\n", fmt_f64(g.resolution_m)));
    header.push_str(&format!("origin_northing_m: {}\n", fmt_f64(g.origin.northing_m)));
    header.push_str(&format!("origin_easting_m: {}\n", fmt_f64(g.origin.easting_m)));
    header.push_str(&format!("band_names: {}\n", grid.band_names().join(",")));
    header.push_str("dtype: float32\n");
    header.push_str("byte_order: little\n");
    if grid.nodata_mask().is_some() {
        header.push_str("nodata_mask: u8\n");
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(grid.values().len() * 4);
    for v in grid.values() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    if let Some(mask) = grid.nodata_mask() {
        out.extend(mask.iter().map(|&m| m as u8));
    }
    out
}

pub fn write_raster<T: Scalar>(path: impl AsRef<Path>, grid: &RasterGrid<T>) -> Result<()> {
    fs::write(path, encode_raster(grid))?;
    Ok(())
}

/// Parses the portable format.
pub fn decode_raster<T: Scalar>(bytes: &[u8]) -> Result<RasterGrid<T>> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| RasterError::MalformedHeader("no blank line terminating the header".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| RasterError::MalformedHeader("header is not utf-8".into()))?;
    let payload = &bytes[split + 2..];

    let mut bands = None;
    let mut rows = None;
    let mut cols = None;
    let mut res = None;
    let mut north = None;
    let mut east = None;
    let mut names = None;
    let mut dtype = None;
    let mut order = None;
    let mut has_mask = false;
    for line in header.lines() {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| RasterError::MalformedHeader(format!("line without ':' {line:?}")))?;
        let value = value.trim();
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| RasterError::MalformedHeader(format!("{key}: {v:?}")))
        };
        let real = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| RasterError::MalformedHeader(format!("{key}: {v:?}")))
        };
        match key.trim() {
            "bands" => bands = Some(int(value)?),
            "rows" => rows = Some(int(value)?),
            "cols" => cols = Some(int(value)?),
            "resolution_m" => res = Some(real(value)?),
            "origin_northing_m" => north = Some(real(value)?),
            "origin_easting_m" => east = Some(real(value)?),
            "band_names" => {
                names = Some(value.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>())
            }
            "dtype" => dtype = Some(value.to_string()),
            "byte_order" => order = Some(value.to_string()),
            "nodata_mask" => {
                if value != "u8" {
                    return Err(RasterError::UnsupportedEncoding(format!("nodata_mask {value}")));
                }
                has_mask = true;
            }
            other => return Err(RasterError::MalformedHeader(format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| RasterError::MalformedHeader(format!("missing {k}"));
    let bands = bands.ok_or_else(|| missing("bands"))?;
    let rows = rows.ok_or_else(|| missing("rows"))?;
    let cols = cols.ok_or_else(|| missing("cols"))?;
    let res = res.ok_or_else(|| missing("resolution_m"))?;
    let north = north.ok_or_else(|| missing("origin_northing_m"))?;
    let east = east.ok_or_else(|| missing("origin_easting_m"))?;
    let names = names.ok_or_else(|| missing("band_names"))?;
    match dtype.as_deref() {
        Some("float32") => {}
        Some(other) => return Err(RasterError::UnsupportedEncoding(format!("dtype {other}"))),
        None => return Err(missing("dtype")),
    }
    match order.as_deref() {
        Some("little") => {}
        Some(other) => return Err(RasterError::UnsupportedEncoding(format!("byte_order {other}"))),
        None => return Err(missing("byte_order")),
    }
    if bands == 0 || bands > MAX_BANDS {
        return Err(RasterError::UnsupportedBandCount(bands));
    }
    if names.len() != bands {
        return Err(RasterError::MalformedHeader(format!(
            "{} band names for {bands} bands",
            names.len()
        )));
    }
    let pixels = rows
        .checked_mul(cols)
        .ok_or_else(|| RasterError::MalformedHeader("grid too large".into()))?;
    let expected = bands * pixels * 4 + if has_mask { pixels } else { 0 };
    if payload.len() != expected {
        return Err(RasterError::DimensionMismatch {
            expected,
            found: payload.len(),
        });
    }
    let float_bytes = bands * pixels * 4;
    let values = payload[..float_bytes]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let nodata = has_mask.then(|| payload[float_bytes..].iter().map(|&b| b != 0).collect());
    RasterGrid::new(
        values,
        GridGeometry {
            rows,
            cols,
            resolution_m: res,
            origin: GeoPoint::new(north, east),
        },
        names,
        nodata,
    )
}

pub fn load_raster<T: Scalar>(path: impl AsRef<Path>) -> Result<RasterGrid<T>> {
    decode_raster(&fs::read(path)?)
}
