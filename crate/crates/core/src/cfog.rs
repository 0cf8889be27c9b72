//! Channel features of oriented gradients.
//!
//! A dense per-pixel descriptor: `m` channels of absolute oriented gradient
//! `|cos θ·gx + sin θ·gy|` for `θ = i·180°/m`, smoothed by a Gaussian in the
//! image plane and by a circular `(1, 2, 1)/4` kernel across orientations.
//! The absolute value makes the descriptor blind to contrast reversal.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RasterGrid;

#[derive(Debug, Error)]
pub enum CfogError {
    #[error("image {width}x{height} is smaller than 3x3")]
    TooSmall { width: usize, height: usize },
    #[error("gradient shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("invalid CFOG parameters: {0}")]
    InvalidParams(String),
    #[error("volume dump {path}: {msg}")]
    Dump { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, CfogError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfogParams {
    /// Number of orientation channels over [0°, 180°).
    pub m: usize,
    /// Standard deviation of the in-plane Gaussian, in pixels.
    pub sigma: f64,
    pub normalize_per_pixel: bool,
}

impl Default for CfogParams {
    fn default() -> Self {
        Self {
            m: 9,
            sigma: 0.8,
            normalize_per_pixel: true,
        }
    }
}

impl CfogParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(CfogError::InvalidParams("m must be >= 2".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CfogError::InvalidParams("sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Dense `height × width × channels` feature volume, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorVolume {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl DescriptorVolume {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    /// Wraps channel-major values (`channel`, then `row`, then `col`).
    pub fn from_values(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Option<Self> {
        (values.len() == width * height * channels).then_some(Self {
            width,
            height,
            channels,
            values,
        })
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
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (ch * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.values[i] = v;
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[ch * n..(ch + 1) * n]
    }

    fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.values[ch * n..(ch + 1) * n]
    }

    /// Channel vector at one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.channels).map(|ch| self.get(row, col, ch)).collect()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Circularly shifts every channel so that `out(x) = self(x - (dx, dy))`.
    pub fn circular_shift(&self, dx: i64, dy: i64) -> Self {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = Self::zeros(self.width, self.height, self.channels);
        for ch in 0..self.channels {
            for row in 0..h {
                let sr = (row - dy).rem_euclid(h) as usize;
                for col in 0..w {
                    let sc = (col - dx).rem_euclid(w) as usize;
                    let v = self.get(sr, sc, ch);
                    out.set(row as usize, col as usize, ch, v);
                }
            }
        }
        out
    }

    /// Writes the debug dump: `CFOG`, then width, height, m as little-endian
    /// u32, then channel-major little-endian f32 samples.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(b"CFOG");
        for d in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let dump_err = |e: std::io::Error| CfogError::Dump {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(dump_err)
    }

    pub fn read_dump(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |msg: String| CfogError::Dump {
            path: path.display().to_string(),
            msg,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        if bytes.len() < 16 || &bytes[..4] != b"CFOG" {
            return Err(err("missing CFOG header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, m) = (dim(0), dim(1), dim(2));
        let payload = &bytes[16..];
        if payload.len() != 4 * w * h * m {
            return Err(err(format!("payload holds {} bytes, header implies {}", payload.len(), 4 * w * h * m)));
        }
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self::from_values(w, h, m, values).expect("length checked"))
    }
}

/// 3×3 Sobel derivatives with edge replication; `gy` is positive downward.
pub fn gradients(grid: &RasterGrid) -> Result<(RasterGrid, RasterGrid)> {
    let (w, h) = (grid.width(), grid.height());
    if w < 3 || h < 3 {
        return Err(CfogError::TooSmall { width: w, height: h });
    }
    let px = |c: isize, r: isize| -> f64 {
        let c = c.clamp(0, w as isize - 1) as usize;
        let r = r.clamp(0, h as isize - 1) as usize;
        grid.get(c, r)
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (tl, t, tr) = (px(c - 1, r - 1), px(c, r - 1), px(c + 1, r - 1));
            let (l, rr) = (px(c - 1, r), px(c + 1, r));
            let (bl, b, br) = (px(c - 1, r + 1), px(c, r + 1), px(c + 1, r + 1));
            let i = r as usize * w + c as usize;
            gx[i] = (tr + 2.0 * rr + br) - (tl + 2.0 * l + bl);
            gy[i] = (bl + 2.0 * b + br) - (tl + 2.0 * t + tr);
        }
    }
    Ok((
        RasterGrid::new(w, h, gx).expect("shape"),
        RasterGrid::new(w, h, gy).expect("shape"),
    ))
}

/// Orientation of channel `i` out of `m`, in radians.
#[inline]
pub fn channel_angle(i: usize, m: usize) -> f64 {
    i as f64 * std::f64::consts::PI / m as f64
}

pub fn oriented_channels(gx: &RasterGrid, gy: &RasterGrid, m: usize) -> Result<DescriptorVolume> {
    if (gx.width(), gx.height()) != (gy.width(), gy.height()) {
        return Err(CfogError::ShapeMismatch(
            (gx.width(), gx.height()),
            (gy.width(), gy.height()),
        ));
    }
    if m < 2 {
        return Err(CfogError::InvalidParams("m must be >= 2".into()));
    }
    let mut vol = DescriptorVolume::zeros(gx.width(), gx.height(), m);
    for ch in 0..m {
        let (s, c) = channel_angle(ch, m).sin_cos();
        for ((o, &x), &y) in vol.channel_mut(ch).iter_mut().zip(gx.pixels()).zip(gy.pixels()) {
            *o = (c * x + s * y).abs();
        }
    }
    Ok(vol)
}

/// Normalized 1D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution of one row-major plane with edge replication.
fn convolve_plane(plane: &mut [f64], w: usize, h: usize, kernel: &[f64], scratch: &mut Vec<f64>) {
    let r = kernel.len() / 2;
    scratch.resize(plane.len(), 0.0);
    let mut padded = vec![0.0; w + 2 * r];
    for row in 0..h {
        let line = &plane[row * w..(row + 1) * w];
        padded[..r].fill(line[0]);
        padded[r..r + w].copy_from_slice(line);
        padded[r + w..].fill(line[w - 1]);
        let out = &mut scratch[row * w..(row + 1) * w];
        out.fill(0.0);
        for (k, &tap) in kernel.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&padded[k..k + w]) {
                *o += tap * v;
            }
        }
    }
    for row in 0..h {
        let out = &mut plane[row * w..(row + 1) * w];
        out.fill(0.0);
        for (k, &tap) in kernel.iter().enumerate() {
            let src = (row + k).saturating_sub(r).min(h - 1);
            for (o, &v) in out.iter_mut().zip(&scratch[src * w..(src + 1) * w]) {
                *o += tap * v;
            }
        }
    }
}

/// Gaussian blur of a grid (edge replication).
pub fn gaussian_blur(grid: &RasterGrid, sigma: f64) -> RasterGrid {
    let mut px = grid.pixels().to_vec();
    let mut scratch = Vec::new();
    convolve_plane(&mut px, grid.width(), grid.height(), &gaussian_kernel(sigma), &mut scratch);
    RasterGrid::with_nodata(grid.width(), grid.height(), px, grid.nodata()).expect("shape")
}

/// In-plane Gaussian, then circular `(1, 2, 1)/4` across channels.
pub fn smooth_volume(vol: &DescriptorVolume, sigma: f64) -> DescriptorVolume {
    let (w, h, m) = vol.dims();
    let kernel = gaussian_kernel(sigma);
    let mut planar = vol.clone();
    let mut scratch = Vec::new();
    for ch in 0..m {
        convolve_plane(planar.channel_mut(ch), w, h, &kernel, &mut scratch);
    }
    let mut out = DescriptorVolume::zeros(w, h, m);
    for ch in 0..m {
        let prev = planar.channel((ch + m - 1) % m);
        let cur = planar.channel(ch);
        let next = planar.channel((ch + 1) % m);
        for (i, o) in out.channel_mut(ch).iter_mut().enumerate() {
            *o = 0.25 * prev[i] + 0.5 * cur[i] + 0.25 * next[i];
        }
    }
    out
}

/// Pixel vectors shorter than this fraction of the volume's longest one are
/// treated as flat. Their direction is rounding residue, and unit scaling
/// would amplify it.
pub const FLAT_FRACTION: f64 = 1e-6;

/// Scales each pixel's channel vector to unit L2 norm; flat pixels (see
/// [`FLAT_FRACTION`]) and zero vectors become zero.
pub fn normalize_pixels(vol: &mut DescriptorVolume) {
    let (w, h, m) = vol.dims();
    let n = w * h;
    let norms: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|ch| vol.values[ch * n + i].powi(2)).sum::<f64>().sqrt())
        .collect();
    let floor = (FLAT_FRACTION * norms.iter().fold(0.0f64, |a, &b| a.max(b))).max(1e-12);
    for (i, &norm) in norms.iter().enumerate() {
        for ch in 0..m {
            let v = &mut vol.values[ch * n + i];
            *v = if norm > floor { *v / norm } else { 0.0 };
        }
    }
}

pub fn build_cfog(grid: &RasterGrid, params: &CfogParams) -> Result<DescriptorVolume> {
    params.validate()?;
    let (gx, gy) = gradients(grid)?;
    let raw = oriented_channels(&gx, &gy, params.m)?;
    let mut vol = smooth_volume(&raw, params.sigma);
    if params.normalize_per_pixel {
        normalize_pixels(&mut vol);
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, seed: u64) -> RasterGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterGrid::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    /// Direct 2D correlation with a 3×3 kernel, replicating edges.
    fn naive_conv3(g: &RasterGrid, k: [[f64; 3]; 3]) -> Vec<f64> {
        let (w, h) = (g.width() as isize, g.height() as isize);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (dr, krow) in k.iter().enumerate() {
                    for (dc, &kv) in krow.iter().enumerate() {
                        let cc = (c + dc as isize - 1).clamp(0, w - 1) as usize;
                        let rr = (r + dr as isize - 1).clamp(0, h - 1) as usize;
                        acc += kv * g.get(cc, rr);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn gradients_of_constant_and_ramp() {
        let (gx, gy) = gradients(&RasterGrid::filled(5, 5, 9.0).unwrap()).unwrap();
        assert!(gx.pixels().iter().chain(gy.pixels()).all(|&v| v == 0.0));
        let ramp = RasterGrid::from_fn(6, 5, |c, _| c as f64).unwrap();
        let (gx, gy) = gradients(&ramp).unwrap();
        for r in 1..4 {
            for c in 1..5 {
                assert_eq!(gx.get(c, r), 8.0);
                assert_eq!(gy.get(c, r), 0.0);
            }
        }
        assert!(matches!(gradients(&RasterGrid::filled(2, 5, 0.0).unwrap()), Err(CfogError::TooSmall { .. })));
    }

    #[test]
    fn gradients_match_direct_convolution() {
        let g = random_grid(17, 11, 1);
        let (gx, gy) = gradients(&g).unwrap();
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        for (got, want) in [(gx, naive_conv3(&g, kx)), (gy, naive_conv3(&g, ky))] {
            for (a, b) in got.pixels().iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn axis_aligned_gradient_channels() {
        let gx = RasterGrid::filled(3, 3, 1.0).unwrap();
        let gy = RasterGrid::filled(3, 3, 0.0).unwrap();
        let v = oriented_channels(&gx, &gy, 9).unwrap();
        assert_eq!(v.get(1, 1, 0), 1.0);
        // Channel closest to 90° (80° or 100°) is cos(80°).
        assert!((v.get(1, 1, 4) - 80f64.to_radians().cos()).abs() < 1e-15);
        let v2 = oriented_channels(&gx, &gy, 2).unwrap();
        assert!(v2.get(0, 0, 1) < 1e-15);
    }

    #[test]
    fn channels_ignore_gradient_sign_and_match_scalar_formula() {
        let gx = random_grid(8, 6, 2);
        let gy = random_grid(8, 6, 3);
        let neg = |g: &RasterGrid| RasterGrid::new(g.width(), g.height(), g.pixels().iter().map(|v| -v).collect()).unwrap();
        let a = oriented_channels(&gx, &gy, 9).unwrap();
        let b = oriented_channels(&neg(&gx), &neg(&gy), 9).unwrap();
        assert_eq!(a, b);
        for ch in 0..9 {
            let th = ch as f64 * 20f64.to_radians();
            for r in 0..6 {
                for c in 0..8 {
                    let want = (th.cos() * gx.get(c, r) + th.sin() * gy.get(c, r)).abs();
                    assert!((a.get(r, c, ch) - want).abs() < 1e-12);
                }
            }
        }
        let small = RasterGrid::filled(3, 3, 0.0).unwrap();
        assert!(matches!(oriented_channels(&gx, &small, 9), Err(CfogError::ShapeMismatch(..))));
    }

    #[test]
    fn impulse_response_is_separable() {
        let mut v = DescriptorVolume::zeros(15, 15, 9);
        v.set(7, 7, 0, 1.0);
        let s = smooth_volume(&v, 0.8);
        let k = gaussian_kernel(0.8);
        assert_eq!(k.len(), 7);
        let r = 3;
        for (ch, wz) in [(8usize, 0.25), (0, 0.5), (1, 0.25)] {
            for dy in 0..k.len() {
                for dx in 0..k.len() {
                    let want = wz * k[dx] * k[dy];
                    let got = s.get(7 + dy - r, 7 + dx - r, ch);
                    assert!((got - want).abs() < 1e-15);
                }
            }
        }
        assert_eq!(s.get(7, 7, 4), 0.0);
    }

    #[test]
    fn channel_constant_volume_keeps_z_profile() {
        let g = random_grid(12, 12, 5);
        let mut v = DescriptorVolume::zeros(12, 12, 9);
        for ch in 0..9 {
            v.channel_mut(ch).copy_from_slice(g.pixels());
        }
        let s = smooth_volume(&v, 1.1);
        let blurred = gaussian_blur(&g, 1.1);
        for ch in 0..9 {
            for (a, b) in s.channel(ch).iter().zip(blurred.pixels()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn interior_support_sum_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = DescriptorVolume::zeros(40, 30, 9);
        for ch in 0..9 {
            for r in 8..22 {
                for c in 8..32 {
                    v.set(r, c, ch, rng.random::<f64>());
                }
            }
        }
        let before: f64 = v.values().iter().sum();
        let after: f64 = smooth_volume(&v, 1.5).values().iter().sum();
        assert!(((after - before) / before).abs() < 1e-6);
    }

    #[test]
    fn constant_image_gives_zero_volume() {
        let v = build_cfog(&RasterGrid::filled(10, 10, 42.0).unwrap(), &CfogParams::default()).unwrap();
        assert!(v.is_all_zero());
    }

    #[test]
    fn step_edge_dominant_channel() {
        // Intensity changes along the edge normal n = (cos a, sin a) in (col, row) space.
        for deg in [0.0f64, 20.0, 40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0] {
            let a = deg.to_radians();
            let g = RasterGrid::from_fn(41, 41, |c, r| {
                let d = (c as f64 - 20.0) * a.cos() + (r as f64 - 20.0) * a.sin();
                255.0 / (1.0 + (-d * 2.0).exp())
            })
            .unwrap();
            let v = build_cfog(&g, &CfogParams::default()).unwrap();
            let px = v.pixel(20, 20);
            let best = (0..9).max_by(|&i, &j| px[i].total_cmp(&px[j])).unwrap();
            assert_eq!(best, (deg / 20.0).round() as usize % 9, "edge at {deg}°");
        }
    }

    #[test]
    fn rotating_an_edge_by_one_bin_shifts_the_channel() {
        let dominant = |deg: f64| {
            let a = deg.to_radians();
            let g = RasterGrid::from_fn(31, 31, |c, r| {
                if (c as f64 - 15.5) * a.cos() + (r as f64 - 15.5) * a.sin() > 0.0 { 200.0 } else { 10.0 }
            })
            .unwrap();
            let v = build_cfog(&gaussian_blur(&g, 1.0), &CfogParams::default()).unwrap();
            let px = v.pixel(15, 15);
            (0..9).max_by(|&i, &j| px[i].total_cmp(&px[j])).unwrap()
        };
        for k in 0..9 {
            let a = dominant(k as f64 * 20.0);
            let b = dominant(k as f64 * 20.0 + 20.0);
            assert_eq!(b, (a + 1) % 9);
        }
    }

    #[test]
    fn dump_roundtrip() {
        let v = build_cfog(&random_grid(9, 7, 4), &CfogParams { m: 4, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.cfog");
        v.write_dump(&p).unwrap();
        let back = DescriptorVolume::read_dump(&p).unwrap();
        assert_eq!(back.dims(), (9, 7, 4));
        for (a, b) in back.values().iter().zip(v.values()) {
            assert_eq!(*a, (*b as f32) as f64);
        }
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CFOG");
        assert_eq!(bytes.len(), 16 + 4 * 9 * 7 * 4);
    }

    #[test]
    fn params_are_validated() {
        let g = random_grid(5, 5, 0);
        assert!(build_cfog(&g, &CfogParams { m: 1, ..Default::default() }).is_err());
        assert!(build_cfog(&g, &CfogParams { sigma: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn flat_pixels_are_zeroed() {
        let mut v = DescriptorVolume::from_values(3, 1, 2, vec![3.0, 1e-7, 0.0, 4.0, 1e-7, 0.0]).unwrap();
        normalize_pixels(&mut v);
        assert_eq!(v.pixel(0, 0), vec![0.6, 0.8]);
        assert_eq!(v.pixel(0, 1), vec![0.0, 0.0]);
        assert_eq!(v.pixel(0, 2), vec![0.0, 0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn nonnegative_unit_or_zero_and_inversion_invariant(seed in any::<u64>(), c in -500.0f64..500.0) {
            let g = random_grid(16, 12, seed);
            let inv = RasterGrid::new(16, 12, g.pixels().iter().map(|v| c - v).collect()).unwrap();
            let params = CfogParams::default();
            let a = build_cfog(&g, &params).unwrap();
            let b = build_cfog(&inv, &params).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - y).abs() < 1e-9);
            }
            for r in 0..12 {
                for col in 0..16 {
                    let n: f64 = a.pixel(r, col).iter().map(|v| v * v).sum::<f64>().sqrt();
                    prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
