//! Grid-partitioned FAST-9 interest points.
//!
//! The image is split into `grid_n × grid_n` disjoint cells and each cell
//! keeps its `k_per_cell` strongest corners, which spreads control point
//! candidates evenly over the frame instead of letting textured regions
//! absorb the whole budget.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RasterGrid;

/// Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
pub const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

pub const ARC_LENGTH: usize = 9;
/// Pixels closest to the image edge that cannot host the FAST circle.
pub const BORDER: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("pixel ({col}, {row}) is within {BORDER} pixels of the border")]
    NearBorder { col: usize, row: usize },
    #[error("image {width}x{height} is too small for a {grid_n}x{grid_n} grid")]
    ImageTooSmall {
        width: usize,
        height: usize,
        grid_n: usize,
    },
    #[error("invalid detector parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterestPoint {
    pub col: usize,
    pub row: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    pub grid_n: usize,
    pub k_per_cell: usize,
    pub fast_threshold: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            grid_n: 20,
            k_per_cell: 1,
            fast_threshold: 20.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.grid_n < 1 {
            return Err(DetectorError::InvalidParams("grid_n must be >= 1".into()));
        }
        if self.k_per_cell < 1 {
            return Err(DetectorError::InvalidParams("k_per_cell must be >= 1".into()));
        }
        if !(self.fast_threshold > 0.0) {
            return Err(DetectorError::InvalidParams("fast_threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// FAST-9 score: 0 unless at least 9 contiguous circle pixels are all brighter
/// than `center + threshold` or all darker than `center - threshold`; otherwise
/// the sum of `|p - center|` over the longest such arc.
pub fn fast_score(grid: &RasterGrid, col: usize, row: usize, threshold: f64) -> Result<f64, DetectorError> {
    if col < BORDER || row < BORDER || col + BORDER >= grid.width() || row + BORDER >= grid.height() {
        return Err(DetectorError::NearBorder { col, row });
    }
    Ok(score_unchecked(grid, col, row, threshold))
}

fn score_unchecked(grid: &RasterGrid, col: usize, row: usize, threshold: f64) -> f64 {
    let center = grid.get(col, row);
    let mut ring = [0.0f64; 16];
    for (v, &(dx, dy)) in ring.iter_mut().zip(CIRCLE.iter()) {
        *v = grid.get((col as i32 + dx) as usize, (row as i32 + dy) as usize);
    }
    segment_score(center, &ring, threshold)
}

/// Longest circular run of brighter (or darker) pixels and its summed contrast.
pub fn segment_score(center: f64, ring: &[f64; 16], threshold: f64) -> f64 {
    let hi = center + threshold;
    let lo = center - threshold;
    let mut best = 0.0f64;
    for sign in [1i8, -1] {
        let pass = |v: f64| if sign > 0 { v > hi } else { v < lo };
        // Walk twice around so runs that wrap past index 15 are seen whole.
        let (mut run, mut sum) = (0usize, 0.0f64);
        for i in 0..32 {
            let v = ring[i % 16];
            if pass(v) {
                run += 1;
                sum += (v - center).abs();
                if run > 16 {
                    // Entire circle qualifies; drop the element that wrapped in twice.
                    sum -= (ring[(i - 16) % 16] - center).abs();
                    run = 16;
                }
                if run >= ARC_LENGTH {
                    best = best.max(sum);
                }
            } else {
                run = 0;
                sum = 0.0;
            }
        }
    }
    best
}

/// Pixel range `[start, end)` of cell `i` when an axis of `len` pixels is
/// split into `n` cells; the last cell absorbs the remainder.
pub fn cell_bounds(len: usize, n: usize, i: usize) -> (usize, usize) {
    let step = len / n;
    let start = i * step;
    let end = if i + 1 == n { len } else { start + step };
    (start, end)
}

/// Top-`k` strictly positive FAST scores from each grid cell.
pub fn detect_partitioned(grid: &RasterGrid, params: &DetectorParams) -> Result<Vec<InterestPoint>, DetectorError> {
    params.validate()?;
    let n = params.grid_n;
    let min_side = n * 7;
    if grid.width() < min_side || grid.height() < min_side {
        return Err(DetectorError::ImageTooSmall {
            width: grid.width(),
            height: grid.height(),
            grid_n: n,
        });
    }

    let cells: Vec<Vec<InterestPoint>> = (0..n * n)
        .into_par_iter()
        .map(|cell| {
            let (c0, c1) = cell_bounds(grid.width(), n, cell % n);
            let (r0, r1) = cell_bounds(grid.height(), n, cell / n);
            let mut found = Vec::new();
            for row in r0.max(BORDER)..r1.min(grid.height() - BORDER) {
                for col in c0.max(BORDER)..c1.min(grid.width() - BORDER) {
                    let score = score_unchecked(grid, col, row, params.fast_threshold);
                    if score > 0.0 {
                        found.push(InterestPoint { col, row, score });
                    }
                }
            }
            found.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.row.cmp(&b.row))
                    .then(a.col.cmp(&b.col))
            });
            found.truncate(params.k_per_cell);
            found
        })
        .collect();
    Ok(cells.into_iter().flatten().collect())
}

/// Writes `col,row,score` lines with a header row.
pub fn write_points_csv<W: Write>(mut out: W, points: &[InterestPoint]) -> std::io::Result<()> {
    writeln!(out, "col,row,score")?;
    for p in points {
        writeln!(out, "{},{},{}", p.col, p.row, p.score)?;
    }
    Ok(())
}
