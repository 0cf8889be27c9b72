//! Single-band rasters with north-up affine georeferencing.
//!
//! Pixel `(col, row)` covers the ground cell whose center sits at
//! `(col + 0.5, row + 0.5)` in transform space. Every continuous pixel
//! coordinate in this crate uses the same convention: an integer value names
//! a pixel center.

mod io;
mod rasterize;

pub use io::{load_raster, read_point_cloud, save_raster, write_pgm, write_world_file};
pub use rasterize::{rasterize_points, Attribute, FillStrategy, LidarPoint, Rasterizer};

use thiserror::Error;

/// Errors raised by raster construction, I/O and rasterization.
#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header in {path}: {msg}")]
    MalformedHeader { path: String, msg: String },
    #[error("dimension mismatch: expected {expected} samples, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("raster extent is empty ({width}x{height})")]
    EmptyExtent { width: usize, height: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid geotransform: {0}")]
    InvalidTransform(String),
    #[error("patch of size {size} centered at ({col}, {row}) exceeds {width}x{height} raster")]
    PatchOutOfBounds {
        col: i64,
        row: i64,
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("point cloud is empty")]
    EmptyPointCloud,
    #[error("cell size must be positive, got {0}")]
    InvalidCellSize(f64),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Row-major grid of real samples with an optional nodata sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    nodata: Option<f64>,
}

impl RasterGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::with_nodata(width, height, pixels, None)
    }

    pub fn with_nodata(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        nodata: Option<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyExtent { width, height });
        }
        if pixels.len() != width * height {
            return Err(RasterError::DimensionMismatch {
                expected: width * height,
                found: pixels.len(),
            });
        }
        let grid = Self {
            width,
            height,
            pixels,
            nodata,
        };
        if let Some(i) = grid
            .pixels
            .iter()
            .position(|&v| !v.is_finite() && !grid.is_nodata(v))
        {
            return Err(RasterError::NonFinite(i));
        }
        Ok(grid)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds a grid by evaluating `f(col, row)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                pixels.push(f(col, row));
            }
        }
        Self::new(width, height, pixels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn nodata(&self) -> Option<f64> {
        self.nodata
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    /// True when `v` equals the nodata sentinel (NaN sentinels match any NaN).
    #[inline]
    pub fn is_nodata(&self, v: f64) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => v.is_nan(),
            Some(nd) => v == nd,
            None => false,
        }
    }

    /// Sample at an integer pixel, `None` for nodata.
    #[inline]
    pub fn value(&self, col: usize, row: usize) -> Option<f64> {
        let v = self.get(col, row);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn valid_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| !self.is_nodata(v)).count()
    }

    /// Min, max and mean over non-nodata samples.
    pub fn valid_stats(&self) -> Option<(f64, f64, f64)> {
        let mut n = 0usize;
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &v in &self.pixels {
            if self.is_nodata(v) {
                continue;
            }
            n += 1;
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        (n > 0).then(|| (lo, hi, sum / n as f64))
    }

    /// Bilinear interpolation at a continuous pixel coordinate.
    ///
    /// Returns `None` outside the span of pixel centers or when a neighbor that
    /// carries nonzero weight is nodata.
    pub fn sample_pixel(&self, col: f64, row: f64) -> Option<f64> {
        const EDGE_EPS: f64 = 1e-9;
        let max_c = (self.width - 1) as f64;
        let max_r = (self.height - 1) as f64;
        if !(col >= -EDGE_EPS && col <= max_c + EDGE_EPS && row >= -EDGE_EPS && row <= max_r + EDGE_EPS)
        {
            return None;
        }
        let col = col.clamp(0.0, max_c);
        let row = row.clamp(0.0, max_r);
        let c0 = (col.floor() as usize).min(self.width.saturating_sub(2));
        let r0 = (row.floor() as usize).min(self.height.saturating_sub(2));
        let fx = col - c0 as f64;
        let fy = row - r0 as f64;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);

        let taps = [
            (c0, r0, (1.0 - fx) * (1.0 - fy)),
            (c1, r0, fx * (1.0 - fy)),
            (c0, r1, (1.0 - fx) * fy),
            (c1, r1, fx * fy),
        ];
        let mut acc = 0.0;
        for (c, r, w) in taps {
            if w == 0.0 {
                continue;
            }
            acc += w * self.value(c, r)?;
        }
        Some(acc)
    }

    /// `size`×`size` window whose center pixel is `(center_col, center_row)`.
    ///
    /// The window starts at `center - size / 2` (integer division), so even
    /// sizes put the center pixel just right of and below the geometric center.
    pub fn extract_patch(&self, center_col: i64, center_row: i64, size: usize) -> Result<RasterGrid> {
        let (c0, r0) = self.patch_origin(center_col, center_row, size)?;
        let mut pixels = Vec::with_capacity(size * size);
        for row in r0..r0 + size {
            let start = row * self.width + c0;
            pixels.extend_from_slice(&self.pixels[start..start + size]);
        }
        Ok(RasterGrid {
            width: size,
            height: size,
            pixels,
            nodata: self.nodata,
        })
    }

    /// Top-left pixel of the window `extract_patch` would cut.
    pub fn patch_origin(&self, center_col: i64, center_row: i64, size: usize) -> Result<(usize, usize)> {
        let half = (size / 2) as i64;
        let c0 = center_col - half;
        let r0 = center_row - half;
        if size == 0
            || c0 < 0
            || r0 < 0
            || c0 + size as i64 > self.width as i64
            || r0 + size as i64 > self.height as i64
        {
            return Err(RasterError::PatchOutOfBounds {
                col: center_col,
                row: center_row,
                size,
                width: self.width,
                height: self.height,
            });
        }
        Ok((c0 as usize, r0 as usize))
    }

    /// Replaces nodata samples with `fill`, dropping the sentinel.
    pub fn fill_nodata(&self, fill: f64) -> RasterGrid {
        let pixels = self
            .pixels
            .iter()
            .map(|&v| if self.is_nodata(v) { fill } else { v })
            .collect();
        RasterGrid {
            width: self.width,
            height: self.height,
            pixels,
            nodata: None,
        }
    }
}

/// North-up affine transform from pixel space to ground coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
    pub rotation_x: f64,
    pub rotation_y: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size_x: f64, pixel_size_y: f64) -> Result<Self> {
        let t = Self {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
            rotation_x: 0.0,
            rotation_y: 0.0,
        };
        t.validate()?;
        Ok(t)
    }

    /// Square north-up cells of side `cell` anchored at the upper-left corner.
    pub fn north_up(origin_x: f64, origin_y: f64, cell: f64) -> Result<Self> {
        Self::new(origin_x, origin_y, cell, -cell)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.origin_x,
            self.origin_y,
            self.pixel_size_x,
            self.pixel_size_y,
            self.rotation_x,
            self.rotation_y,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::InvalidTransform("non-finite term".into()));
        }
        if !(self.pixel_size_x > 0.0 && self.pixel_size_y < 0.0) {
            return Err(RasterError::InvalidTransform(format!(
                "pixel sizes must satisfy x > 0 and y < 0, got ({}, {})",
                self.pixel_size_x, self.pixel_size_y
            )));
        }
        if self.rotation_x != 0.0 || self.rotation_y != 0.0 {
            return Err(RasterError::InvalidTransform(
                "rotated geotransforms are not supported".into(),
            ));
        }
        Ok(())
    }

    /// Ground coordinates of continuous pixel `(col, row)`; integers are cell centers.
    #[inline]
    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + (col + 0.5) * self.pixel_size_x,
            self.origin_y + (row + 0.5) * self.pixel_size_y,
        )
    }

    #[inline]
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_size_x - 0.5,
            (y - self.origin_y) / self.pixel_size_y - 0.5,
        )
    }

    /// Ground sample distance, assuming square cells.
    #[inline]
    pub fn cell_size(&self) -> f64 {
        self.pixel_size_x
    }
}

/// A grid plus its georeferencing.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoRaster {
    pub grid: RasterGrid,
    pub transform: GeoTransform,
    pub crs_tag: String,
}

impl GeoRaster {
    pub fn new(grid: RasterGrid, transform: GeoTransform, crs_tag: impl Into<String>) -> Result<Self> {
        transform.validate()?;
        Ok(Self {
            grid,
            transform,
            crs_tag: crs_tag.into(),
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.grid.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.grid.height()
    }

    #[inline]
    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        self.transform.pixel_to_world(col, row)
    }

    #[inline]
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        self.transform.world_to_pixel(x, y)
    }

    /// Bilinear sample at ground coordinates; `None` for nodata or outside the grid.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let (c, r) = self.world_to_pixel(x, y);
        self.grid.sample_pixel(c, r)
    }

    /// True when `(x, y)` lies within the span of pixel centers.
    pub fn contains_world(&self, x: f64, y: f64) -> bool {
        let (c, r) = self.world_to_pixel(x, y);
        c >= 0.0 && r >= 0.0 && c <= (self.width() - 1) as f64 && r <= (self.height() - 1) as f64
    }

    /// Ground bounding box `(min_x, min_y, max_x, max_y)` of the cell edges.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let t = &self.transform;
        let x1 = t.origin_x + self.width() as f64 * t.pixel_size_x;
        let y1 = t.origin_y + self.height() as f64 * t.pixel_size_y;
        (t.origin_x.min(x1), t.origin_y.min(y1), t.origin_x.max(x1), t.origin_y.max(y1))
    }

    /// Patch around a pixel, georeferenced to the same grid.
    pub fn extract_patch(&self, center_col: i64, center_row: i64, size: usize) -> Result<GeoRaster> {
        let (c0, r0) = self.grid.patch_origin(center_col, center_row, size)?;
        let grid = self.grid.extract_patch(center_col, center_row, size)?;
        let t = &self.transform;
        let transform = GeoTransform {
            origin_x: t.origin_x + c0 as f64 * t.pixel_size_x,
            origin_y: t.origin_y + r0 as f64 * t.pixel_size_y,
            ..*t
        };
        Ok(GeoRaster {
            grid,
            transform,
            crs_tag: self.crs_tag.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geo(grid: RasterGrid, ox: f64, oy: f64, cell: f64) -> GeoRaster {
        GeoRaster::new(grid, GeoTransform::north_up(ox, oy, cell).unwrap(), "local").unwrap()
    }

    #[test]
    fn pixel_to_world_uses_cell_centers() {
        let t = GeoTransform::new(100.0, 200.0, 1.0, -1.0).unwrap();
        assert_eq!(t.pixel_to_world(0.0, 0.0), (100.5, 199.5));
        let t = GeoTransform::new(0.0, 0.0, 2.0, -2.0).unwrap();
        assert_eq!(t.pixel_to_world(9.5, 4.5), (20.0, -10.0));
    }

    #[test]
    fn world_to_pixel_inverts_pixel_to_world() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = GeoTransform::new(
                rng.random_range(-1e4..1e4),
                rng.random_range(-1e4..1e4),
                rng.random_range(0.05..10.0),
                -rng.random_range(0.05..10.0),
            )
            .unwrap();
            let (c, r) = (rng.random_range(-50.0..5000.0), rng.random_range(-50.0..5000.0));
            let (x, y) = t.pixel_to_world(c, r);
            let (c2, r2) = t.world_to_pixel(x, y);
            assert!((c - c2).abs() < 1e-9 && (r - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn transform_rejects_bad_pixel_sizes() {
        assert!(GeoTransform::new(0.0, 0.0, 1.0, 1.0).is_err());
        assert!(GeoTransform::new(0.0, 0.0, -1.0, -1.0).is_err());
        let mut t = GeoTransform::new(0.0, 0.0, 1.0, -1.0).unwrap();
        t.rotation_x = 0.1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn grid_rejects_mismatch_and_empty() {
        assert!(matches!(
            RasterGrid::new(3, 1, vec![1.0; 4]),
            Err(RasterError::DimensionMismatch { expected: 3, found: 4 })
        ));
        assert!(matches!(RasterGrid::new(0, 0, vec![]), Err(RasterError::EmptyExtent { .. })));
        assert!(matches!(RasterGrid::new(1, 1, vec![f64::NAN]), Err(RasterError::NonFinite(0))));
        assert!(RasterGrid::with_nodata(1, 1, vec![f64::NAN], Some(f64::NAN)).is_ok());
    }

    #[test]
    fn bilinear_identity_linearity_and_bounds() {
        let grid = RasterGrid::new(2, 1, vec![0.0, 10.0]).unwrap();
        let r = geo(grid, 0.0, 1.0, 1.0);
        assert_eq!(r.sample_bilinear(0.5, 0.5), Some(0.0));
        assert_eq!(r.sample_bilinear(1.5, 0.5), Some(10.0));
        assert_eq!(r.sample_bilinear(1.0, 0.5), Some(5.0));
        assert_eq!(r.sample_bilinear(-3.0, 0.5), None);
        assert_eq!(r.sample_bilinear(0.5, 7.0), None);
    }

    #[test]
    fn bilinear_is_monotone_between_neighbors() {
        let grid = RasterGrid::new(2, 2, vec![1.0, 4.0, 2.0, 9.0]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let c = i as f64 / 100.0;
            let v = grid.sample_pixel(c, 0.3).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn nodata_poisons_weighted_neighbors_only() {
        let grid = RasterGrid::with_nodata(2, 1, vec![3.0, -9999.0], Some(-9999.0)).unwrap();
        assert_eq!(grid.sample_pixel(0.0, 0.0), Some(3.0));
        assert_eq!(grid.sample_pixel(0.5, 0.0), None);
        assert_eq!(grid.sample_pixel(1.0, 0.0), None);
    }

    #[test]
    fn patch_identity_and_bounds() {
        let grid = RasterGrid::from_fn(10, 10, |c, r| (r * 10 + c) as f64).unwrap();
        let p = grid.extract_patch(5, 5, 1).unwrap();
        assert_eq!(p.pixels(), &[55.0]);
        assert!(matches!(grid.extract_patch(0, 0, 3), Err(RasterError::PatchOutOfBounds { .. })));
        assert!(grid.extract_patch(9, 9, 3).is_err());
        assert!(grid.extract_patch(8, 8, 3).is_ok());
    }

    #[test]
    fn template_sized_patch_matches_naive_slicing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1000;
        let grid = RasterGrid::new(n, n, (0..n * n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let p = grid.extract_patch(500, 500, 200).unwrap();
        for r in 0..200 {
            for c in 0..200 {
                assert_eq!(p.get(c, r), grid.pixels()[(400 + r) * n + 400 + c]);
            }
        }
    }

    #[test]
    fn geo_patch_keeps_world_alignment() {
        let grid = RasterGrid::from_fn(20, 20, |c, r| (c + 100 * r) as f64).unwrap();
        let r = geo(grid, 1000.0, 2000.0, 0.5);
        let p = r.extract_patch(10, 7, 6).unwrap();
        let (x, y) = p.pixel_to_world(0.0, 0.0);
        assert_eq!(r.sample_bilinear(x, y), Some(p.grid.get(0, 0)));
        assert_eq!(p.grid.get(0, 0), (7 + 100 * 4) as f64);
    }
}
