//! Checkerboard mosaics of two co-registered layers.

use anyhow::{bail, Result};

use aerolidar::raster::{GeoRaster, RasterGrid};

/// Linear map of the valid samples onto [0, 255]; invalid samples become 0.
/// A constant layer maps to 0.
fn stretch(values: &[Option<f64>]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|v| match v {
            Some(v) if span > 0.0 => 255.0 * (v - lo) / span,
            _ => 0.0,
        })
        .collect()
}

/// Alternating `tile`×`tile` mosaic on the grid of `a`; `b` is sampled at
/// the world position of each cell of `a`. Each layer is min-max stretched
/// on its own. Also returns the source mask, `true` where a cell shows `a`.
pub fn checkerboard(a: &GeoRaster, b: &GeoRaster, tile: usize) -> Result<(RasterGrid, Vec<bool>)> {
    if tile == 0 {
        bail!("tile size must be positive");
    }
    let (w, h) = (a.width(), a.height());
    let mut va = Vec::with_capacity(w * h);
    let mut vb = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            va.push(a.grid.value(col, row));
            let (x, y) = a.pixel_to_world(col as f64, row as f64);
            vb.push(b.sample_bilinear(x, y));
        }
    }
    if !va.iter().zip(&vb).any(|(x, y)| x.is_some() && y.is_some()) {
        bail!("the two layers do not overlap");
    }
    let (sa, sb) = (stretch(&va), stretch(&vb));
    let mut mask = Vec::with_capacity(w * h);
    let mut out = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let from_a = (col / tile + row / tile) % 2 == 0;
            let i = row * w + col;
            mask.push(from_a);
            out.push(if from_a { sa[i] } else { sb[i] });
        }
    }
    Ok((RasterGrid::new(w, h, out)?, mask))
}
