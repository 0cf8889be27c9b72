//! Control-point detection: each interest point's neighbourhood is
//! ortho-rectified onto the LiDAR grid and located there by descriptor
//! phase correlation, or by one of the spatial NCC / MI baselines.

mod phase;
mod spatial;

pub use phase::{phase_correlate, subpixel_peak, subpixel_peak_with, PhaseCorrelator, SubpixelMethod, SPECTRUM_EPS};
pub use spatial::{entropy, mi_map, ncc_map, quantile_bins};

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfog::{build_cfog, CfogError, CfogParams};
use crate::detector::InterestPoint;
use crate::geometry::{image_to_ground_from, dsm_mean, rectify_window, CameraIntrinsics, CameraPose, GeometryError};
use crate::orientation::ControlPoint;
use crate::raster::{save_raster, GeoRaster, GeoTransform, RasterError, RasterGrid};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("volume dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("template {template:?} does not fit in search {search:?}")]
    SizeMismatch { template: (usize, usize), search: (usize, usize) },
    #[error("peak at ({col}, {row}) lies on the surface border")]
    BorderPeak { col: usize, row: usize },
    #[error("invalid match parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Cfog(#[from] CfogError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, MatchError>;

/// Similarity values over candidate offsets. Cell `(c, r)` holds offset
/// `(c - center_col, r - center_row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSurface {
    width: usize,
    height: usize,
    center_col: usize,
    center_row: usize,
    values: Vec<f64>,
}

impl CorrelationSurface {
    pub fn new(width: usize, height: usize, center_col: usize, center_row: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "surface shape");
        Self {
            width,
            height,
            center_col,
            center_row,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn center(&self) -> (usize, usize) {
        (self.center_col, self.center_row)
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn offset_of(&self, col: usize, row: usize) -> (i64, i64) {
        (col as i64 - self.center_col as i64, row as i64 - self.center_row as i64)
    }

    pub fn index_of_offset(&self, dx: i64, dy: i64) -> Option<(usize, usize)> {
        let c = self.center_col as i64 + dx;
        let r = self.center_row as i64 + dy;
        (c >= 0 && r >= 0 && (c as usize) < self.width && (r as usize) < self.height).then_some((c as usize, r as usize))
    }

    /// First maximum in row-major order: `(col, row, value)`.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &v) in self.values.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        (best.0 % self.width, best.0 / self.width, best.1)
    }

    /// Highest value outside the 5×5 block around `(col, row)`.
    pub fn second_peak(&self, col: usize, row: usize) -> Option<f64> {
        let mut best: Option<f64> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if c.abs_diff(col) <= 2 && r.abs_diff(row) <= 2 {
                    continue;
                }
                let v = self.get(c, r);
                if best.is_none_or(|b| v > b) {
                    best = Some(v);
                }
            }
        }
        best
    }

    /// Peak over second peak; 0 for a non-positive peak.
    pub fn confidence(&self, col: usize, row: usize) -> f64 {
        let peak = self.get(col, row);
        if !(peak > 0.0) {
            return 0.0;
        }
        match self.second_peak(col, row) {
            None => f64::MAX,
            Some(s) => peak / s.max(1e-12),
        }
    }

    /// Georeferenced as a grid whose world coordinates are the offsets
    /// (east = +dx, north = -dy).
    pub fn to_raster(&self) -> GeoRaster {
        let t = GeoTransform::north_up(-(self.center_col as f64) - 0.5, self.center_row as f64 + 0.5, 1.0).expect("unit transform");
        let grid = RasterGrid::new(self.width, self.height, self.values.clone()).expect("shape");
        GeoRaster::new(grid, t, "offset").expect("valid")
    }

    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(save_raster(&self.to_raster(), path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MatchMetric {
    #[default]
    #[serde(rename = "cfog-pc")]
    CfogPc,
    #[serde(rename = "ncc")]
    Ncc,
    #[serde(rename = "mi")]
    Mi,
}

impl MatchMetric {
    pub const ALL: [MatchMetric; 3] = [MatchMetric::CfogPc, MatchMetric::Ncc, MatchMetric::Mi];

    pub fn as_str(&self) -> &'static str {
        match self {
            MatchMetric::CfogPc => "cfog-pc",
            MatchMetric::Ncc => "ncc",
            MatchMetric::Mi => "mi",
        }
    }
}

impl fmt::Display for MatchMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cfog-pc" | "cfog" | "pc" => Ok(MatchMetric::CfogPc),
            "ncc" => Ok(MatchMetric::Ncc),
            "mi" => Ok(MatchMetric::Mi),
            other => Err(format!("unknown metric '{other}' (expected cfog-pc, ncc or mi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchParams {
    pub template_size: usize,
    /// Largest admissible offset on each axis; both patches are cut at
    /// `template_size + 2 * search_radius`.
    pub search_radius: usize,
    pub min_confidence: f64,
    pub subpixel: bool,
    pub metric: MatchMetric,
    /// Raised-cosine taper before the transforms.
    pub window: bool,
    pub mi_bins: usize,
    /// Minimum fraction of valid samples in each patch.
    pub min_valid_fraction: f64,
    #[serde(skip)]
    pub cfog: CfogParams,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            template_size: 200,
            search_radius: 50,
            min_confidence: 1.3,
            subpixel: true,
            metric: MatchMetric::CfogPc,
            window: false,
            mi_bins: 32,
            min_valid_fraction: 0.5,
            cfog: CfogParams::default(),
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MatchError::InvalidParams(m.to_string()));
        if self.template_size < 16 {
            return bad("template_size must be >= 16");
        }
        if 2 * self.search_radius >= self.template_size {
            return bad("search_radius must be < template_size / 2");
        }
        if !(self.min_confidence >= 0.0) {
            return bad("min_confidence must be >= 0");
        }
        if self.mi_bins < 2 {
            return bad("mi_bins must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return bad("min_valid_fraction must lie in [0, 1]");
        }
        self.cfog.validate()?;
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        self.template_size + 2 * self.search_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RejectReason {
    /// Ray/DSM intersection failed for the interest point.
    Geometry,
    /// The ground window leaves a LiDAR raster.
    OutsideRaster,
    /// Too many nodata samples in a patch.
    LowCoverage,
    /// No structure to correlate.
    Degenerate,
    BorderPeak,
    OffsetBeyondRadius,
    LowConfidence,
    /// No DSM height at the matched location.
    NoHeight,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::Geometry => "geometry",
            RejectReason::OutsideRaster => "outside-raster",
            RejectReason::LowCoverage => "low-coverage",
            RejectReason::Degenerate => "degenerate",
            RejectReason::BorderPeak => "border-peak",
            RejectReason::OffsetBeyondRadius => "offset-beyond-radius",
            RejectReason::LowConfidence => "low-confidence",
            RejectReason::NoHeight => "no-height",
        }
    }
}

/// Wall time spent per matching stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MatchTiming {
    pub rectification: Duration,
    pub descriptor: Duration,
    pub correlation: Duration,
}

impl std::ops::AddAssign for MatchTiming {
    fn add_assign(&mut self, o: Self) {
        self.rectification += o.rectification;
        self.descriptor += o.descriptor;
        self.correlation += o.correlation;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchCandidate {
    pub aerial_col: f64,
    pub aerial_row: f64,
    pub ground_x: f64,
    pub ground_y: f64,
    pub ground_z: f64,
    /// Offset of the LiDAR match from the predicted position, LiDAR pixels.
    pub offset_dx: f64,
    pub offset_dy: f64,
    pub peak: f64,
    pub confidence: f64,
    pub accepted: bool,
    pub reject: Option<RejectReason>,
    pub timing: MatchTiming,
}

impl MatchCandidate {
    fn pending(pt: &InterestPoint) -> Self {
        Self {
            aerial_col: pt.col as f64,
            aerial_row: pt.row as f64,
            ground_x: f64::NAN,
            ground_y: f64::NAN,
            ground_z: f64::NAN,
            offset_dx: f64::NAN,
            offset_dy: f64::NAN,
            peak: f64::NAN,
            confidence: 0.0,
            accepted: false,
            reject: None,
            timing: MatchTiming::default(),
        }
    }

    pub fn control_point(&self) -> ControlPoint {
        ControlPoint::new(self.aerial_col, self.aerial_row, self.ground_x, self.ground_y, self.ground_z)
    }
}

/// Grid with nodata replaced by the valid mean; `None` below `min_valid`.
fn filled(grid: &RasterGrid, min_valid: usize) -> Option<RasterGrid> {
    if grid.valid_count() < min_valid.max(1) {
        return None;
    }
    let (_, _, mean) = grid.valid_stats()?;
    Some(grid.fill_nodata(mean))
}

fn center_crop(grid: &RasterGrid, start: usize, size: usize) -> RasterGrid {
    RasterGrid::from_fn(size, size, |c, r| grid.get(start + c, start + r)).expect("crop inside patch")
}

/// Shared state for matching many interest points against one scene.
/// Immutable after construction and safe to use from many threads.
pub struct Matcher<'a> {
    aerial: &'a RasterGrid,
    pose: CameraPose,
    intr: CameraIntrinsics,
    lidar: &'a GeoRaster,
    dsm: &'a GeoRaster,
    params: MatchParams,
    z_start: f64,
    correlator: PhaseCorrelator,
}

impl<'a> Matcher<'a> {
    pub fn new(
        aerial: &'a RasterGrid,
        pose: &CameraPose,
        intr: &CameraIntrinsics,
        lidar: &'a GeoRaster,
        dsm: &'a GeoRaster,
        params: &MatchParams,
    ) -> Result<Self> {
        params.validate()?;
        pose.validate()?;
        intr.validate()?;
        let s = params.patch_size();
        Ok(Self {
            aerial,
            pose: *pose,
            intr: *intr,
            lidar,
            dsm,
            params: params.clone(),
            z_start: dsm_mean(dsm)?,
            correlator: PhaseCorrelator::new(s, s, params.cfog.m).with_window(params.window),
        })
    }

    pub fn params(&self) -> &MatchParams {
        &self.params
    }

    /// Rectified aerial and LiDAR patches sharing one ground grid, plus the
    /// predicted position of the interest point in LiDAR pixel coordinates.
    pub fn patches(&self, pt: &InterestPoint) -> std::result::Result<(GeoRaster, GeoRaster, (f64, f64)), RejectReason> {
        let (x0, y0, _) = image_to_ground_from(&self.pose, &self.intr, pt.col as f64, pt.row as f64, self.dsm, self.z_start)
            .map_err(|_| RejectReason::Geometry)?;
        let (lc, lr) = self.lidar.world_to_pixel(x0, y0);
        let s = self.params.patch_size();
        let lp = self
            .lidar
            .extract_patch(lc.round() as i64, lr.round() as i64, s)
            .map_err(|_| RejectReason::OutsideRaster)?;
        let ap = rectify_window(self.aerial, &self.pose, &self.intr, self.dsm, lp.transform, s, s)
            .map_err(|_| RejectReason::OutsideRaster)?;
        Ok((ap, lp, (lc, lr)))
    }

    pub fn match_point(&self, pt: &InterestPoint) -> MatchCandidate {
        let mut cand = MatchCandidate::pending(pt);
        if let Err(reason) = self.try_match(pt, &mut cand) {
            cand.accepted = false;
            cand.reject = Some(reason);
        }
        cand
    }

    fn try_match(&self, pt: &InterestPoint, cand: &mut MatchCandidate) -> std::result::Result<(), RejectReason> {
        let p = &self.params;
        let t0 = Instant::now();
        let (ap, lp, (lc, lr)) = self.patches(pt)?;
        cand.timing.rectification = t0.elapsed();
        let s = p.patch_size();
        let min_valid = (p.min_valid_fraction * (s * s) as f64).ceil() as usize;
        let aerial = filled(&ap.grid, min_valid).ok_or(RejectReason::LowCoverage)?;
        let lidar = filled(&lp.grid, min_valid).ok_or(RejectReason::LowCoverage)?;

        let (surface, method) = match p.metric {
            MatchMetric::CfogPc => {
                let t1 = Instant::now();
                let va = build_cfog(&aerial, &p.cfog).map_err(|_| RejectReason::Degenerate)?;
                let vb = build_cfog(&lidar, &p.cfog).map_err(|_| RejectReason::Degenerate)?;
                cand.timing.descriptor = t1.elapsed();
                let t2 = Instant::now();
                let surf = self.correlator.correlate(&va, &vb).map_err(|_| RejectReason::Degenerate)?;
                cand.timing.correlation = t2.elapsed();
                (surf, SubpixelMethod::TwoPoint)
            }
            MatchMetric::Ncc | MatchMetric::Mi => {
                let t2 = Instant::now();
                let template = center_crop(&aerial, p.search_radius, p.template_size);
                let surf = if p.metric == MatchMetric::Ncc {
                    ncc_map(&template, &lidar)
                } else {
                    mi_map(&template, &lidar, p.mi_bins)
                }
                .map_err(|_| RejectReason::Degenerate)?;
                cand.timing.correlation = t2.elapsed();
                (surf, SubpixelMethod::Parabolic)
            }
        };

        let (c, r, peak) = surface.argmax();
        cand.peak = peak;
        cand.confidence = surface.confidence(c, r);
        let (dx, dy) = if p.subpixel {
            subpixel_peak_with(&surface, c, r, method).map_err(|_| RejectReason::BorderPeak)?
        } else {
            let (ox, oy) = surface.offset_of(c, r);
            (ox as f64, oy as f64)
        };
        cand.offset_dx = dx;
        cand.offset_dy = dy;
        let radius = p.search_radius as f64;
        if dx.abs() > radius || dy.abs() > radius {
            return Err(RejectReason::OffsetBeyondRadius);
        }
        if cand.confidence < p.min_confidence {
            return Err(RejectReason::LowConfidence);
        }
        let (gx, gy) = self.lidar.pixel_to_world(lc + dx, lr + dy);
        let gz = self.dsm.sample_bilinear(gx, gy).ok_or(RejectReason::NoHeight)?;
        cand.ground_x = gx;
        cand.ground_y = gy;
        cand.ground_z = gz;
        cand.accepted = true;
        Ok(())
    }

    /// Matches every point in parallel; output order follows input order.
    pub fn match_all(&self, points: &[InterestPoint]) -> Vec<MatchCandidate> {
        points.par_iter().map(|pt| self.match_point(pt)).collect()
    }
}

/// Matches a single interest point; see [`Matcher::match_point`].
#[allow(clippy::too_many_arguments)]
pub fn match_point(
    aerial: &RasterGrid,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    lidar_intensity: &GeoRaster,
    dsm: &GeoRaster,
    pt: &InterestPoint,
    params: &MatchParams,
) -> Result<MatchCandidate> {
    Ok(Matcher::new(aerial, pose, intr, lidar_intensity, dsm, params)?.match_point(pt))
}

/// Accepted matches as control points, in input order.
pub fn run_matching(
    aerial: &RasterGrid,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    lidar_intensity: &GeoRaster,
    dsm: &GeoRaster,
    points: &[InterestPoint],
    params: &MatchParams,
) -> Result<Vec<ControlPoint>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let m = Matcher::new(aerial, pose, intr, lidar_intensity, dsm, params)?;
    Ok(m.match_all(points)
        .iter()
        .filter(|c| c.accepted)
        .map(MatchCandidate::control_point)
        .collect())
}

pub const CONTROL_POINT_HEADER: &str = "aerial_col,aerial_row,ground_X,ground_Y,ground_Z,offset_dx,offset_dy,peak,confidence";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| MatchError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
}

fn cp_row(c: &MatchCandidate) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        c.aerial_col, c.aerial_row, c.ground_x, c.ground_y, c.ground_z, c.offset_dx, c.offset_dy, c.peak, c.confidence
    )
}

/// Control-point table for the given candidates.
pub fn write_control_points_csv<'c>(path: impl AsRef<Path>, candidates: impl IntoIterator<Item = &'c MatchCandidate>) -> Result<()> {
    let mut out = format!("{CONTROL_POINT_HEADER}\n");
    for c in candidates {
        out.push_str(&cp_row(c));
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

/// Every candidate with its status, for diagnosis.
pub fn write_candidates_csv(path: impl AsRef<Path>, candidates: &[MatchCandidate]) -> Result<()> {
    let mut out = format!("{CONTROL_POINT_HEADER},accepted,reason\n");
    for c in candidates {
        out.push_str(&cp_row(c));
        out.push_str(&format!(",{},{}\n", c.accepted, c.reject.map_or("", |r| r.as_str())));
    }
    write_text(path.as_ref(), &out)
}
