//! Frequency-domain correlation of descriptor volumes.

use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use super::{CorrelationSurface, MatchError, Result};
use crate::cfog::DescriptorVolume;

/// Magnitude floor of the cross-power spectrum.
pub const SPECTRUM_EPS: f64 = 1e-12;

/// Reusable transform plans for volumes of one shape. Plans are immutable
/// after construction, so one correlator may be shared across threads.
/// Transforms run in single precision; the surface is returned as f64.
pub struct PhaseCorrelator {
    width: usize,
    height: usize,
    channels: usize,
    fwd_x: Arc<dyn Fft<f32>>,
    fwd_y: Arc<dyn Fft<f32>>,
    fwd_z: Arc<dyn Fft<f32>>,
    inv_x: Arc<dyn Fft<f32>>,
    inv_y: Arc<dyn Fft<f32>>,
    window: Option<Vec<f64>>,
}

impl std::fmt::Debug for PhaseCorrelator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhaseCorrelator")
            .field("dims", &(self.width, self.height, self.channels))
            .field("window", &self.window.is_some())
            .finish()
    }
}

/// Tiled transpose of a `rows × cols` row-major block into `cols × rows`.
fn transpose(src: &[Complex32], dst: &mut [Complex32], cols: usize, rows: usize) {
    const TILE: usize = 16;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

impl PhaseCorrelator {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        let mut planner = FftPlanner::<f32>::new();
        Self {
            width,
            height,
            channels,
            fwd_x: planner.plan_fft_forward(width),
            fwd_y: planner.plan_fft_forward(height),
            fwd_z: planner.plan_fft_forward(channels),
            inv_x: planner.plan_fft_inverse(width),
            inv_y: planner.plan_fft_inverse(height),
            window: None,
        }
    }

    /// Enables a separable raised-cosine taper applied before the transforms.
    pub fn with_window(mut self, enabled: bool) -> Self {
        self.window = enabled.then(|| {
            let (wx, wy) = (hann(self.width), hann(self.height));
            let mut w = Vec::with_capacity(self.width * self.height);
            for y in &wy {
                w.extend(wx.iter().map(|x| x * y));
            }
            w
        });
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    fn plane_fft(&self, data: &mut [Complex32], fx: &Arc<dyn Fft<f32>>, fy: &Arc<dyn Fft<f32>>, scratch: &mut Vec<Complex32>) {
        let (w, h) = (self.width, self.height);
        fx.process(data);
        scratch.resize(w * h, Complex32::default());
        transpose(data, scratch, w, h);
        fy.process(scratch);
        transpose(scratch, data, h, w);
    }

    /// Full 3D forward transform of a channel-major volume.
    ///
    /// Channels are real, so pairs of them share one complex 2D transform
    /// and are separated afterwards through conjugate symmetry.
    pub fn forward(&self, vol: &DescriptorVolume) -> Result<Vec<Complex32>> {
        if vol.dims() != self.dims() {
            return Err(MatchError::DimensionMismatch(vol.dims(), self.dims()));
        }
        let (w, h, m) = self.dims();
        let plane = w * h;
        let weight = |i: usize| self.window.as_ref().map_or(1.0, |win| win[i]);
        let mut data = vec![Complex32::default(); plane * m];
        let mut packed = vec![Complex32::default(); plane];
        let mut scratch = Vec::new();
        let (fx, fy) = (self.fwd_x.clone(), self.fwd_y.clone());
        for ch in (0..m).step_by(2) {
            let a = vol.channel(ch);
            let b = (ch + 1 < m).then(|| vol.channel(ch + 1));
            for (i, z) in packed.iter_mut().enumerate() {
                let im = b.map_or(0.0, |b| b[i]);
                *z = Complex32::new((a[i] * weight(i)) as f32, (im * weight(i)) as f32);
            }
            self.plane_fft(&mut packed, &fx, &fy, &mut scratch);
            match b {
                None => data[ch * plane..(ch + 1) * plane].copy_from_slice(&packed),
                Some(_) => {
                    let (lo, hi) = data.split_at_mut((ch + 1) * plane);
                    let (sa, sb) = (&mut lo[ch * plane..], &mut hi[..plane]);
                    for v in 0..h {
                        let nv = (h - v) % h;
                        for u in 0..w {
                            let nu = (w - u) % w;
                            let z = packed[v * w + u];
                            let zc = packed[nv * w + nu].conj();
                            sa[v * w + u] = (z + zc) * 0.5f32;
                            sb[v * w + u] = (z - zc) * Complex32::new(0.0, -0.5f32);
                        }
                    }
                }
            }
        }
        let mut line = vec![Complex32::default(); m];
        for i in 0..plane {
            for (ch, v) in line.iter_mut().enumerate() {
                *v = data[ch * plane + i];
            }
            self.fwd_z.process(&mut line);
            for (ch, v) in line.iter().enumerate() {
                data[ch * plane + i] = *v;
            }
        }
        Ok(data)
    }

    /// Correlation surface whose peak sits at the offset `d` with
    /// `b(x) ≈ a(x - d)`.
    ///
    /// The normalized cross-power spectrum is inverted in 3D and the
    /// zero channel-lag plane is kept: every channel's phase agreement adds
    /// to the same spatial peak, and a perfect circular shift yields a unit
    /// impulse.
    pub fn correlate(&self, a: &DescriptorVolume, b: &DescriptorVolume) -> Result<CorrelationSurface> {
        if a.dims() != b.dims() {
            return Err(MatchError::DimensionMismatch(a.dims(), b.dims()));
        }
        if a.is_all_zero() || b.is_all_zero() {
            return Err(MatchError::Degenerate("all-zero descriptor volume".into()));
        }
        let fa = self.forward(a)?;
        let fb = self.forward(b)?;
        let plane = self.width * self.height;
        // The z = 0 plane of a 3D inverse is the 2D inverse of the spectrum
        // summed over channel frequencies.
        let mut acc = vec![Complex32::default(); plane];
        for ch in 0..self.channels {
            let (sa, sb) = (&fa[ch * plane..(ch + 1) * plane], &fb[ch * plane..(ch + 1) * plane]);
            for ((o, &ka), &kb) in acc.iter_mut().zip(sa).zip(sb) {
                let x = kb * ka.conj();
                *o += x / x.norm().max(SPECTRUM_EPS as f32);
            }
        }
        let mut scratch = Vec::new();
        let (ix, iy) = (self.inv_x.clone(), self.inv_y.clone());
        self.plane_fft(&mut acc, &ix, &iy, &mut scratch);
        let scale = 1.0 / (plane * self.channels) as f64;
        let (w, h) = (self.width, self.height);
        let (cc, cr) = (w / 2, h / 2);
        let mut values = vec![0.0; plane];
        for r in 0..h {
            for c in 0..w {
                let dst = ((r + cr) % h) * w + (c + cc) % w;
                values[dst] = acc[r * w + c].re as f64 * scale;
            }
        }
        Ok(CorrelationSurface::new(w, h, cc, cr, values))
    }
}

/// One-shot phase correlation; see [`PhaseCorrelator::correlate`].
pub fn phase_correlate(a: &DescriptorVolume, b: &DescriptorVolume) -> Result<CorrelationSurface> {
    let (w, h, m) = a.dims();
    PhaseCorrelator::new(w, h, m).correlate(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubpixelMethod {
    /// Peak-to-neighbour ratio, exact for the sinc-shaped peak of a pure shift.
    #[default]
    TwoPoint,
    /// Three-point parabola, suited to broad peaks of spatial metrics.
    Parabolic,
}

fn parabolic(left: f64, s0: f64, right: f64) -> f64 {
    let den = left - 2.0 * s0 + right;
    if den.abs() < 1e-300 {
        return 0.0;
    }
    (0.5 * (left - right) / den).clamp(-0.5, 0.5)
}

/// The ratio assumes the sinc-shaped impulse of a pure shift, whose far-side
/// lobe is negative. A broadened peak (both neighbours positive) or an
/// out-of-range ratio takes the parabolic estimate instead.
fn two_point(left: f64, s0: f64, right: f64) -> f64 {
    // Neighbours at the single-precision noise floor count as exact zeros.
    let floor = 1e-5 * s0.abs();
    let snap = |v: f64| if v.abs() <= floor { 0.0 } else { v };
    let (left, right) = (snap(left), snap(right));
    if left == right {
        return 0.0;
    }
    let (s1, sign) = if right > left { (right, 1.0) } else { (left, -1.0) };
    let ratio = s1 / (s1 + s0);
    if s1 > 0.0 && s0 > 0.0 && left.min(right) <= 0.0 && (0.0..1.0).contains(&ratio) {
        sign * ratio
    } else {
        parabolic(left, s0, right)
    }
}

/// Refines an integer peak; returns the fractional offset `(dx, dy)`.
pub fn subpixel_peak(surface: &CorrelationSurface, col: usize, row: usize) -> Result<(f64, f64)> {
    subpixel_peak_with(surface, col, row, SubpixelMethod::TwoPoint)
}

pub fn subpixel_peak_with(surface: &CorrelationSurface, col: usize, row: usize, method: SubpixelMethod) -> Result<(f64, f64)> {
    let (w, h) = (surface.width(), surface.height());
    if col == 0 || row == 0 || col + 1 >= w || row + 1 >= h {
        return Err(MatchError::BorderPeak { col, row });
    }
    let s0 = surface.get(col, row);
    let [l, r, u, d] = [
        surface.get(col - 1, row),
        surface.get(col + 1, row),
        surface.get(col, row - 1),
        surface.get(col, row + 1),
    ];
    let refine = match method {
        SubpixelMethod::TwoPoint => two_point,
        SubpixelMethod::Parabolic => parabolic,
    };
    let (ox, oy) = surface.offset_of(col, row);
    Ok((ox as f64 + refine(l, s0, r), oy as f64 + refine(u, s0, d)))
}
