//! Binning LiDAR returns into intensity and elevation grids.

use super::{GeoRaster, GeoTransform, RasterError, RasterGrid, Result};

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Intensity,
    Elevation,
}

impl Attribute {
    fn of(self, p: &LidarPoint) -> f64 {
        match self {
            Attribute::Intensity => p.intensity,
            Attribute::Elevation => p.z,
        }
    }
}

/// How empty cells are filled from populated cells within the search radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillStrategy {
    #[default]
    Nearest,
    InverseDistance,
}

#[derive(Debug, Clone)]
pub struct Rasterizer {
    pub cell_size: f64,
    pub fill: FillStrategy,
    /// Hole-filling search radius in cells.
    pub search_radius: usize,
    pub nodata: f64,
}

impl Rasterizer {
    pub fn new(cell_size: f64) -> Self {
        Self {
            cell_size,
            fill: FillStrategy::Nearest,
            search_radius: 3,
            nodata: -9999.0,
        }
    }

    pub fn with_fill(mut self, fill: FillStrategy) -> Self {
        self.fill = fill;
        self
    }

    /// Grid layout covering the points: point extremes land on cell centers.
    pub fn layout(&self, points: &[LidarPoint]) -> Result<(GeoTransform, usize, usize)> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(RasterError::InvalidCellSize(self.cell_size));
        }
        if points.is_empty() {
            return Err(RasterError::EmptyPointCloud);
        }
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
            min_y = min_y.min(p.y);
            max_y = max_y.max(p.y);
        }
        let cs = self.cell_size;
        let width = ((max_x - min_x) / cs + 0.5).floor() as usize + 1;
        let height = ((max_y - min_y) / cs + 0.5).floor() as usize + 1;
        let t = GeoTransform::north_up(min_x - 0.5 * cs, max_y + 0.5 * cs, cs)?;
        Ok((t, width, height))
    }

    pub fn rasterize(&self, points: &[LidarPoint], attribute: Attribute) -> Result<GeoRaster> {
        let (t, width, height) = self.layout(points)?;
        let mut sum = vec![0.0f64; width * height];
        let mut count = vec![0u32; width * height];
        for p in points {
            let (c, r) = cell_of(&t, width, height, p.x, p.y);
            let i = r * width + c;
            sum[i] += attribute.of(p);
            count[i] += 1;
        }
        let filled: Vec<Option<f64>> = sum
            .iter()
            .zip(&count)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect();

        let mut pixels: Vec<f64> = filled.iter().map(|v| v.unwrap_or(self.nodata)).collect();
        let rad = self.search_radius as i64;
        let rad2 = (rad * rad) as f64;
        for row in 0..height {
            for col in 0..width {
                if filled[row * width + col].is_some() {
                    continue;
                }
                let mut best: Option<(f64, f64)> = None;
                let (mut wsum, mut vsum) = (0.0, 0.0);
                for dr in -rad..=rad {
                    for dc in -rad..=rad {
                        let (c, r) = (col as i64 + dc, row as i64 + dr);
                        if c < 0 || r < 0 || c >= width as i64 || r >= height as i64 {
                            continue;
                        }
                        let d2 = (dc * dc + dr * dr) as f64;
                        if d2 > rad2 {
                            continue;
                        }
                        let Some(v) = filled[r as usize * width + c as usize] else {
                            continue;
                        };
                        // Scan order is row-major, so strict `<` keeps the first tie.
                        if best.is_none_or(|(bd, _)| d2 < bd) {
                            best = Some((d2, v));
                        }
                        wsum += 1.0 / d2;
                        vsum += v / d2;
                    }
                }
                let value = match self.fill {
                    FillStrategy::Nearest => best.map(|(_, v)| v),
                    FillStrategy::InverseDistance => (wsum > 0.0).then(|| vsum / wsum),
                };
                if let Some(v) = value {
                    pixels[row * width + col] = v;
                }
            }
        }
        let grid = RasterGrid::with_nodata(width, height, pixels, Some(self.nodata))?;
        GeoRaster::new(grid, t, "")
    }
}

fn cell_of(t: &GeoTransform, width: usize, height: usize, x: f64, y: f64) -> (usize, usize) {
    let c = ((x - t.origin_x) / t.pixel_size_x).floor().max(0.0) as usize;
    let r = ((y - t.origin_y) / t.pixel_size_y).floor().max(0.0) as usize;
    (c.min(width - 1), r.min(height - 1))
}

/// Per-cell mean of `attribute` with nearest-neighbor hole filling (radius 3 cells).
pub fn rasterize_points(
    points: &[LidarPoint],
    cell_size: f64,
    attribute: Attribute,
    fill: FillStrategy,
) -> Result<GeoRaster> {
    Rasterizer::new(cell_size).with_fill(fill).rasterize(points, attribute)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64, z: f64, i: f64) -> LidarPoint {
        LidarPoint { x, y, z, intensity: i }
    }

    #[test]
    fn singleton_and_mean() {
        let r = rasterize_points(&[pt(3.0, 4.0, 5.0, 6.0)], 1.0, Attribute::Intensity, FillStrategy::Nearest).unwrap();
        assert_eq!((r.width(), r.height()), (1, 1));
        assert_eq!(r.grid.get(0, 0), 6.0);

        let pts = [pt(0.0, 0.0, 1.0, 10.0), pt(0.1, 0.1, 3.0, 20.0)];
        let r = rasterize_points(&pts, 1.0, Attribute::Intensity, FillStrategy::Nearest).unwrap();
        assert_eq!(r.grid.pixels(), &[15.0]);
        let r = rasterize_points(&pts, 1.0, Attribute::Elevation, FillStrategy::Nearest).unwrap();
        assert_eq!(r.grid.pixels(), &[2.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            rasterize_points(&[], 1.0, Attribute::Intensity, FillStrategy::Nearest),
            Err(RasterError::EmptyPointCloud)
        ));
        assert!(matches!(
            rasterize_points(&[pt(0., 0., 0., 0.)], 0.0, Attribute::Intensity, FillStrategy::Nearest),
            Err(RasterError::InvalidCellSize(_))
        ));
        assert!(rasterize_points(&[pt(0., 0., 0., 0.)], -1.0, Attribute::Intensity, FillStrategy::Nearest).is_err());
    }

    #[test]
    fn lattice_at_spacing_is_hole_free() {
        let s = 0.7;
        let mut pts = Vec::new();
        for j in 0..10 {
            for i in 0..10 {
                pts.push(pt(1000.0 + i as f64 * s, 50.0 + j as f64 * s, j as f64, (i * 10 + j) as f64));
            }
        }
        let r = rasterize_points(&pts, s, Attribute::Intensity, FillStrategy::Nearest).unwrap();
        assert_eq!((r.width(), r.height()), (10, 10));
        assert_eq!(r.grid.valid_count(), 100);
        for p in &pts {
            let (c, row) = r.world_to_pixel(p.x, p.y);
            assert!((c - c.round()).abs() < 1e-9 && (row - row.round()).abs() < 1e-9);
            assert_eq!(r.grid.get(c.round() as usize, row.round() as usize), p.intensity);
        }
    }

    #[test]
    fn hole_filling_strategies() {
        // Corner points only on a 5x1 strip; the middle cells are holes.
        let pts = [pt(0.0, 0.0, 0.0, 10.0), pt(4.0, 0.0, 0.0, 30.0)];
        let near = rasterize_points(&pts, 1.0, Attribute::Intensity, FillStrategy::Nearest).unwrap();
        assert_eq!(near.grid.pixels(), &[10.0, 10.0, 10.0, 30.0, 30.0]);
        let idw = rasterize_points(&pts, 1.0, Attribute::Intensity, FillStrategy::InverseDistance).unwrap();
        assert_eq!(idw.grid.get(2, 0), 20.0);
        assert!((idw.grid.get(1, 0) - (10.0 + 30.0 / 9.0) / (1.0 + 1.0 / 9.0)).abs() < 1e-12);

        // Beyond the radius cells stay nodata.
        let pts = [pt(0.0, 0.0, 0.0, 1.0), pt(10.0, 0.0, 0.0, 1.0)];
        let r = rasterize_points(&pts, 1.0, Attribute::Intensity, FillStrategy::Nearest).unwrap();
        assert_eq!(r.grid.value(5, 0), None);
        assert_eq!(r.grid.value(3, 0), Some(1.0));
    }

    proptest! {
        #[test]
        fn cells_match_brute_force_binning(
            raw in prop::collection::vec((0.0f64..40.0, 0.0f64..40.0, 0.0f64..100.0), 1..200),
            cell in 0.5f64..6.0,
        ) {
            let pts: Vec<LidarPoint> = raw.iter().map(|&(x, y, i)| pt(x, y, 0.0, i)).collect();
            let rz = Rasterizer { search_radius: 0, ..Rasterizer::new(cell) };
            let r = rz.rasterize(&pts, Attribute::Intensity).unwrap();
            let (x0, y0, x1, y1) = r.bounds();
            for p in &pts {
                prop_assert!(p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1);
            }
            // Brute force: for every cell, collect members by explicit edge tests.
            let t = r.transform;
            for row in 0..r.height() {
                for col in 0..r.width() {
                    let left = t.origin_x + col as f64 * cell;
                    let top = t.origin_y - row as f64 * cell;
                    let last_c = col + 1 == r.width();
                    let last_r = row + 1 == r.height();
                    let members: Vec<f64> = pts.iter().filter(|p| {
                        p.x >= left && (p.x < left + cell || last_c)
                            && p.y <= top && (p.y > top - cell || last_r)
                    }).map(|p| p.intensity).collect();
                    let got = r.grid.value(col, row);
                    if members.is_empty() {
                        prop_assert_eq!(got, None);
                    } else {
                        let mean = members.iter().sum::<f64>() / members.len() as f64;
                        prop_assert!((got.unwrap() - mean).abs() <= 1e-9 * mean.abs().max(1.0));
                    }
                }
            }
        }
    }
}
