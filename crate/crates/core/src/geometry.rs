//! Frame-camera geometry: exterior orientation, the collinearity projection,
//! ray/DSM intersection and local ortho-rectification of aerial patches.
//!
//! Conventions used throughout:
//!
//! * `R = R_Y(phi) · R_X(omega) · R_Z(kappa)` with rows `[a1 a2 a3; b1 b2 b3; c1 c2 c3]`.
//! * Image-plane `x` points right and `y` points up, in meters on the sensor.
//! * Pixel rows grow downward; the principal point and pixel pitch convert between the two.
//! * Ground is a right-handed east/north/up frame.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{GeoRaster, GeoTransform, RasterError, RasterGrid};

pub const RECTIFY_NODATA: f64 = -9999.0;

const DSM_TOLERANCE: f64 = 0.01;
const DSM_MAX_ITER: usize = 50;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("ground point is at or behind the projection plane")]
    BehindCamera,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("ray leaves the DSM extent near ({x:.3}, {y:.3})")]
    RayOutsideDsm { x: f64, y: f64 },
    #[error("DSM intersection did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("DSM has no data at ({x:.3}, {y:.3})")]
    DsmNodata { x: f64, y: f64 },
    #[error("rectification window is outside the DSM extent")]
    WindowOutsideDsm,
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("pose file {path}: {msg}")]
    PoseFile { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Orthonormal rotation between the image space and ground frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(pub Matrix3<f64>);

impl RotationMatrix {
    pub fn from_angles(phi: f64, omega: f64, kappa: f64) -> Self {
        let (sp, cp) = phi.sin_cos();
        let (so, co) = omega.sin_cos();
        let (sk, ck) = kappa.sin_cos();
        let r_phi = Matrix3::new(cp, 0.0, -sp, 0.0, 1.0, 0.0, sp, 0.0, cp);
        let r_omega = Matrix3::new(1.0, 0.0, 0.0, 0.0, co, -so, 0.0, so, co);
        let r_kappa = Matrix3::new(ck, -sk, 0.0, sk, ck, 0.0, 0.0, 0.0, 1.0);
        Self(r_phi * r_omega * r_kappa)
    }

    /// Inverse of [`RotationMatrix::from_angles`] for `|omega| < pi/2`.
    pub fn to_angles(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let omega = (-m[(1, 2)]).clamp(-1.0, 1.0).asin();
        let phi = (-m[(0, 2)]).atan2(m[(2, 2)]);
        let kappa = m[(1, 0)].atan2(m[(1, 1)]);
        (phi, omega, kappa)
    }

    #[inline]
    pub fn a1(&self) -> f64 {
        self.0[(0, 0)]
    }
    #[inline]
    pub fn a2(&self) -> f64 {
        self.0[(0, 1)]
    }
    #[inline]
    pub fn a3(&self) -> f64 {
        self.0[(0, 2)]
    }
    #[inline]
    pub fn b1(&self) -> f64 {
        self.0[(1, 0)]
    }
    #[inline]
    pub fn b2(&self) -> f64 {
        self.0[(1, 1)]
    }
    #[inline]
    pub fn b3(&self) -> f64 {
        self.0[(1, 2)]
    }
    #[inline]
    pub fn c1(&self) -> f64 {
        self.0[(2, 0)]
    }
    #[inline]
    pub fn c2(&self) -> f64 {
        self.0[(2, 1)]
    }
    #[inline]
    pub fn c3(&self) -> f64 {
        self.0[(2, 2)]
    }
}

pub fn rotation_from_angles(phi: f64, omega: f64, kappa: f64) -> RotationMatrix {
    RotationMatrix::from_angles(phi, omega, kappa)
}

pub fn angles_from_rotation(r: &RotationMatrix) -> (f64, f64, f64) {
    r.to_angles()
}

/// Exterior orientation: projection center in ground meters, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CameraPose {
    pub xs: f64,
    pub ys: f64,
    pub zs: f64,
    pub phi: f64,
    pub omega: f64,
    pub kappa: f64,
}

impl CameraPose {
    pub fn to_array(&self) -> [f64; 6] {
        [self.xs, self.ys, self.zs, self.phi, self.omega, self.kappa]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            xs: v[0],
            ys: v[1],
            zs: v[2],
            phi: v[3],
            omega: v[4],
            kappa: v[5],
        }
    }

    pub fn rotation(&self) -> RotationMatrix {
        RotationMatrix::from_angles(self.phi, self.omega, self.kappa)
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(GeometryError::InvalidPose("non-finite element".into()))
        }
    }
}

/// Interior orientation of a distortion-free frame camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length in meters.
    pub f: f64,
    /// Sensor pixel pitch in meters.
    pub pixel_size: f64,
    pub principal_col: f64,
    pub principal_row: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.into()));
        if !(self.f > 0.0 && self.f.is_finite()) {
            return bad("focal length must be positive");
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return bad("pixel size must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive");
        }
        let inside = |v: f64, n: usize| v >= 0.0 && v <= n as f64;
        if !inside(self.principal_col, self.image_width) || !inside(self.principal_row, self.image_height) {
            return bad("principal point outside the image");
        }
        Ok(())
    }

    #[inline]
    pub fn plane_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.principal_col + x / self.pixel_size,
            self.principal_row - y / self.pixel_size,
        )
    }

    #[inline]
    pub fn pixel_to_plane(&self, col: f64, row: f64) -> (f64, f64) {
        (
            (col - self.principal_col) * self.pixel_size,
            (self.principal_row - row) * self.pixel_size,
        )
    }
}

/// A ground point's image-plane coordinates and the matching pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
    pub col: f64,
    pub row: f64,
}

/// Collinearity projection of ground point `(x, y, z)`.
pub fn project_ground_to_image(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    x: f64,
    y: f64,
    z: f64,
) -> Result<ImagePoint> {
    project_with(&pose.rotation(), pose, intr, x, y, z)
}

/// Projection with a precomputed rotation; hot loops build `R` once.
#[inline]
pub fn project_with(
    r: &RotationMatrix,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    x: f64,
    y: f64,
    z: f64,
) -> Result<ImagePoint> {
    let (dx, dy, dz) = (x - pose.xs, y - pose.ys, z - pose.zs);
    let den = r.a3() * dx + r.b3() * dy + r.c3() * dz;
    if !(den < 0.0) {
        return Err(GeometryError::BehindCamera);
    }
    let px = -intr.f * (r.a1() * dx + r.b1() * dy + r.c1() * dz) / den;
    let py = -intr.f * (r.a2() * dx + r.b2() * dy + r.c2() * dz) / den;
    let (col, row) = intr.plane_to_pixel(px, py);
    Ok(ImagePoint { x: px, y: py, col, row })
}

/// Ground `(X, Y)` where the ray through pixel `(col, row)` crosses height `z`.
pub fn ray_at_height(pose: &CameraPose, intr: &CameraIntrinsics, col: f64, row: f64, z: f64) -> Result<(f64, f64)> {
    let dir = ray_direction(&pose.rotation(), intr, col, row);
    if !(dir.z < 0.0) {
        return Err(GeometryError::BehindCamera);
    }
    let t = (z - pose.zs) / dir.z;
    if !(t > 0.0) {
        return Err(GeometryError::BehindCamera);
    }
    Ok((pose.xs + t * dir.x, pose.ys + t * dir.y))
}

fn ray_direction(r: &RotationMatrix, intr: &CameraIntrinsics, col: f64, row: f64) -> Vector3<f64> {
    let (x, y) = intr.pixel_to_plane(col, row);
    r.0 * Vector3::new(x, y, -intr.f)
}

/// Mean of the DSM's valid samples; the starting height for ray intersection.
pub fn dsm_mean(dsm: &GeoRaster) -> Result<f64> {
    dsm.grid
        .valid_stats()
        .map(|(_, _, mean)| mean)
        .ok_or(GeometryError::DsmNodata { x: f64::NAN, y: f64::NAN })
}

/// Intersects the pixel ray with the DSM by fixed-point iteration on height.
pub fn image_to_ground(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    col: f64,
    row: f64,
    dsm: &GeoRaster,
) -> Result<(f64, f64, f64)> {
    image_to_ground_from(pose, intr, col, row, dsm, dsm_mean(dsm)?)
}

/// As [`image_to_ground`] with an explicit starting height.
pub fn image_to_ground_from(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    col: f64,
    row: f64,
    dsm: &GeoRaster,
    z_start: f64,
) -> Result<(f64, f64, f64)> {
    let mut z = z_start;
    for _ in 0..DSM_MAX_ITER {
        let (x, y) = ray_at_height(pose, intr, col, row, z)?;
        if !dsm.contains_world(x, y) {
            return Err(GeometryError::RayOutsideDsm { x, y });
        }
        let z_new = dsm.sample_bilinear(x, y).ok_or(GeometryError::DsmNodata { x, y })?;
        if (z_new - z).abs() < DSM_TOLERANCE {
            let (x, y) = ray_at_height(pose, intr, col, row, z_new)?;
            return Ok((x, y, z_new));
        }
        z = z_new;
    }
    Err(GeometryError::NoConvergence(DSM_MAX_ITER))
}

/// Ortho-rectifies an `out_size`×`out_size` ground window centered on
/// `(center_x, center_y)` at ground sample distance `gsd`.
pub fn rectify_patch(
    aerial: &RasterGrid,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    dsm: &GeoRaster,
    center_x: f64,
    center_y: f64,
    out_size: usize,
    gsd: f64,
) -> Result<GeoRaster> {
    if out_size == 0 || !(gsd > 0.0) {
        return Err(GeometryError::WindowOutsideDsm);
    }
    let half = 0.5 * out_size as f64 * gsd;
    let t = GeoTransform::north_up(center_x - half, center_y + half, gsd)?;
    rectify_window(aerial, pose, intr, dsm, t, out_size, out_size)
}

/// Ortho-rectifies the aerial image onto an arbitrary north-up ground grid.
///
/// Each output cell reads its height from the DSM, projects into the aerial
/// image and samples it bilinearly. Cells that land outside the image, or on
/// DSM nodata, hold [`RECTIFY_NODATA`].
pub fn rectify_window(
    aerial: &RasterGrid,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    dsm: &GeoRaster,
    transform: GeoTransform,
    width: usize,
    height: usize,
) -> Result<GeoRaster> {
    pose.validate()?;
    intr.validate()?;
    transform.validate()?;
    let corners = [(0.0, 0.0), ((width - 1) as f64, 0.0), (0.0, (height - 1) as f64), ((width - 1) as f64, (height - 1) as f64)];
    for (c, r) in corners {
        let (x, y) = transform.pixel_to_world(c, r);
        if !dsm.contains_world(x, y) {
            return Err(GeometryError::WindowOutsideDsm);
        }
    }
    let rot = pose.rotation();
    let mut pixels = vec![RECTIFY_NODATA; width * height];
    pixels.par_chunks_mut(width).enumerate().for_each(|(row, out)| {
        for (col, v) in out.iter_mut().enumerate() {
            let (x, y) = transform.pixel_to_world(col as f64, row as f64);
            let Some(z) = dsm.sample_bilinear(x, y) else { continue };
            let Ok(p) = project_with(&rot, pose, intr, x, y, z) else { continue };
            if let Some(s) = aerial.sample_pixel(p.col, p.row) {
                *v = s;
            }
        }
    });
    let grid = RasterGrid::with_nodata(width, height, pixels, Some(RECTIFY_NODATA))?;
    Ok(GeoRaster::new(grid, transform, dsm.crs_tag.clone())?)
}

/// On-disk pose document: interior plus exterior orientation, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub f_m: f64,
    pub pixel_size_m: f64,
    pub principal_col: f64,
    pub principal_row: f64,
    pub image_width: usize,
    pub image_height: usize,
    #[serde(rename = "Xs_m")]
    pub xs_m: f64,
    #[serde(rename = "Ys_m")]
    pub ys_m: f64,
    #[serde(rename = "Zs_m")]
    pub zs_m: f64,
    pub phi_deg: f64,
    pub omega_deg: f64,
    pub kappa_deg: f64,
}

impl PoseFile {
    pub fn new(pose: &CameraPose, intr: &CameraIntrinsics) -> Self {
        Self {
            f_m: intr.f,
            pixel_size_m: intr.pixel_size,
            principal_col: intr.principal_col,
            principal_row: intr.principal_row,
            image_width: intr.image_width,
            image_height: intr.image_height,
            xs_m: pose.xs,
            ys_m: pose.ys,
            zs_m: pose.zs,
            phi_deg: pose.phi.to_degrees(),
            omega_deg: pose.omega.to_degrees(),
            kappa_deg: pose.kappa.to_degrees(),
        }
    }

    pub fn pose(&self) -> CameraPose {
        CameraPose {
            xs: self.xs_m,
            ys: self.ys_m,
            zs: self.zs_m,
            phi: self.phi_deg.to_radians(),
            omega: self.omega_deg.to_radians(),
            kappa: self.kappa_deg.to_radians(),
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            f: self.f_m,
            pixel_size: self.pixel_size_m,
            principal_col: self.principal_col,
            principal_row: self.principal_row,
            image_width: self.image_width,
            image_height: self.image_height,
        }
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let doc: Self = toml::from_str(text).map_err(|e| e.message().to_string())?;
        doc.intrinsics().validate().map_err(|e| e.to_string())?;
        doc.pose().validate().map_err(|e| e.to_string())?;
        Ok(doc)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("pose serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |msg: String| GeometryError::PoseFile {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::parse(&text).map_err(err)
    }
}
