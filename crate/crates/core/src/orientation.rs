//! Exterior-orientation refinement: Gauss–Newton space resection on the
//! collinearity residuals and an iterative gross-error filter on top of it.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix6, SymmetricEigen, Vector6};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{project_with, CameraIntrinsics, CameraPose, GeometryError, PoseFile};

pub const MIN_POINTS: usize = 4;

#[derive(Debug, Error)]
pub enum OrientationError {
    #[error("resection needs at least {MIN_POINTS} control points, got {0}")]
    TooFewPoints(usize),
    #[error("normal matrix is singular (condition ratio {0:.3e}); control points are degenerate")]
    Singular(f64),
    #[error("resection diverged: RMSE rose for {0} consecutive iterations")]
    Diverged(usize),
    #[error("outlier removal would leave {0} inliers, fewer than {MIN_POINTS}")]
    InlierFloor(usize),
    #[error("control point {0} has non-finite coordinates")]
    NonFinite(usize),
    #[error("projection failed: {0}")]
    Projection(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, OrientationError>;

/// An aerial pixel paired with its ground coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlPoint {
    pub aerial_col: f64,
    pub aerial_row: f64,
    pub ground_x: f64,
    pub ground_y: f64,
    pub ground_z: f64,
    /// Pixel distance between observation and projection, set by resection.
    pub residual: f64,
    pub inlier: bool,
}

impl ControlPoint {
    pub fn new(aerial_col: f64, aerial_row: f64, ground_x: f64, ground_y: f64, ground_z: f64) -> Self {
        Self {
            aerial_col,
            aerial_row,
            ground_x,
            ground_y,
            ground_z,
            residual: 0.0,
            inlier: true,
        }
    }

    fn is_finite(&self) -> bool {
        [self.aerial_col, self.aerial_row, self.ground_x, self.ground_y, self.ground_z]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResectionParams {
    pub max_iterations: usize,
    /// Stop once the update norm (meters and radians mixed) drops below this.
    pub tolerance: f64,
    pub step_translation: f64,
    pub step_rotation: f64,
    /// Consecutive RMSE increases treated as divergence.
    pub divergence_window: usize,
    /// Smallest admissible eigenvalue ratio of the scaled normal matrix.
    pub min_condition: f64,
}

impl Default for ResectionParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-8,
            step_translation: 0.01,
            step_rotation: 1e-6,
            divergence_window: 5,
            min_condition: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResectionResult {
    pub pose: CameraPose,
    pub rmse: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final minus initial pose, in `CameraPose::to_array` order.
    pub corrections: [f64; 6],
}

/// Per-point `(observed - projected)` pixel residual pairs.
fn residual_vector(cps: &[ControlPoint], intr: &CameraIntrinsics, pose: &CameraPose) -> Result<DVector<f64>> {
    let rot = pose.rotation();
    let mut v = DVector::zeros(2 * cps.len());
    for (i, cp) in cps.iter().enumerate() {
        let p = project_with(&rot, pose, intr, cp.ground_x, cp.ground_y, cp.ground_z)?;
        v[2 * i] = cp.aerial_col - p.col;
        v[2 * i + 1] = cp.aerial_row - p.row;
    }
    Ok(v)
}

fn point_residuals(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().chunks_exact(2).map(|p| p[0].hypot(p[1])).collect()
}

/// Root mean square of per-point pixel distances.
pub fn rmse_of(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt()
}

/// Residuals of `cps` under `pose`, one Euclidean pixel distance per point.
pub fn residuals(cps: &[ControlPoint], intr: &CameraIntrinsics, pose: &CameraPose) -> Result<Vec<f64>> {
    Ok(point_residuals(&residual_vector(cps, intr, pose)?))
}

fn jacobian(cps: &[ControlPoint], intr: &CameraIntrinsics, pose: &CameraPose, params: &ResectionParams) -> Result<DMatrix<f64>> {
    let base = pose.to_array();
    let mut j = DMatrix::zeros(2 * cps.len(), 6);
    for k in 0..6 {
        let h = if k < 3 { params.step_translation } else { params.step_rotation };
        let mut plus = base;
        let mut minus = base;
        plus[k] += h;
        minus[k] -= h;
        let rp = residual_vector(cps, intr, &CameraPose::from_array(plus))?;
        let rm = residual_vector(cps, intr, &CameraPose::from_array(minus))?;
        j.set_column(k, &((rp - rm) / (2.0 * h)));
    }
    Ok(j)
}

/// Eigenvalue ratio of the normal matrix after unit-diagonal scaling.
fn condition_ratio(n: &Matrix6<f64>) -> f64 {
    let d: Vec<f64> = (0..6).map(|i| n[(i, i)]).collect();
    if d.iter().any(|&v| !(v > 0.0)) {
        return 0.0;
    }
    let scaled = Matrix6::from_fn(|i, k| n[(i, k)] / (d[i] * d[k]).sqrt());
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.max();
    if !(max > 0.0) {
        return 0.0;
    }
    eig.min() / max
}

pub fn resect(cps: &[ControlPoint], intr: &CameraIntrinsics, initial: &CameraPose) -> Result<ResectionResult> {
    resect_with(cps, intr, initial, &ResectionParams::default())
}

pub fn resect_with(
    cps: &[ControlPoint],
    intr: &CameraIntrinsics,
    initial: &CameraPose,
    params: &ResectionParams,
) -> Result<ResectionResult> {
    if cps.len() < MIN_POINTS {
        return Err(OrientationError::TooFewPoints(cps.len()));
    }
    if let Some(i) = cps.iter().position(|cp| !cp.is_finite()) {
        return Err(OrientationError::NonFinite(i));
    }
    intr.validate()?;
    initial.validate()?;

    let mut pose = *initial;
    let mut r = residual_vector(cps, intr, &pose)?;
    let mut rmse = rmse_of(&point_residuals(&r));
    let mut rises = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iterations {
        iterations += 1;
        let j = jacobian(cps, intr, &pose, params)?;
        let jt = j.transpose();
        let n: Matrix6<f64> = (&jt * &j).fixed_view::<6, 6>(0, 0).into_owned();
        let ratio = condition_ratio(&n);
        if ratio < params.min_condition {
            return Err(OrientationError::Singular(ratio));
        }
        let g: Vector6<f64> = (&jt * &r).fixed_view::<6, 1>(0, 0).into_owned();
        let delta = n
            .cholesky()
            .map(|c| c.solve(&(-g)))
            .ok_or(OrientationError::Singular(ratio))?;

        let mut next = pose.to_array();
        for (p, d) in next.iter_mut().zip(delta.iter()) {
            *p += d;
        }
        pose = CameraPose::from_array(next);
        r = residual_vector(cps, intr, &pose)?;
        let new_rmse = rmse_of(&point_residuals(&r));
        if new_rmse > rmse {
            rises += 1;
            if rises >= params.divergence_window {
                return Err(OrientationError::Diverged(rises));
            }
        } else {
            rises = 0;
        }
        rmse = new_rmse;
        if delta.norm() < params.tolerance {
            converged = true;
            break;
        }
    }

    let residuals = point_residuals(&r);
    let (a, b) = (initial.to_array(), pose.to_array());
    Ok(ResectionResult {
        pose,
        rmse: rmse_of(&residuals),
        residuals,
        iterations,
        converged,
        corrections: std::array::from_fn(|k| b[k] - a[k]),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierRejection {
    pub inliers: Vec<ControlPoint>,
    pub outliers: Vec<ControlPoint>,
    /// Positions of the surviving points in the input sequence.
    pub inlier_indices: Vec<usize>,
    pub result: ResectionResult,
    pub rounds: usize,
    /// RMSE after each round, over that round's inliers.
    pub rmse_history: Vec<f64>,
}

/// Alternates resection and removal of points whose residual exceeds
/// `max(3·RMSE, 3·rmse_target)` until the RMSE target is met, nothing is
/// removed, or `max_rounds` is reached.
pub fn reject_outliers(
    cps: &[ControlPoint],
    intr: &CameraIntrinsics,
    initial: &CameraPose,
    rmse_target: f64,
    max_rounds: usize,
) -> Result<OutlierRejection> {
    if cps.len() < MIN_POINTS {
        return Err(OrientationError::TooFewPoints(cps.len()));
    }
    let mut inliers: Vec<ControlPoint> = cps.to_vec();
    let mut indices: Vec<usize> = (0..cps.len()).collect();
    let mut outliers = Vec::new();
    let mut start = *initial;
    let mut history = Vec::new();
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut result = resect(&inliers, intr, &start)?;
        for (cp, &res) in inliers.iter_mut().zip(&result.residuals) {
            cp.residual = res;
            cp.inlier = true;
        }
        history.push(result.rmse);
        let (a, b) = (initial.to_array(), result.pose.to_array());
        result.corrections = std::array::from_fn(|k| b[k] - a[k]);

        let threshold = 3.0 * result.rmse.max(rmse_target);
        let keep = inliers.iter().filter(|cp| cp.residual <= threshold).count();
        let done = result.rmse < rmse_target || keep == inliers.len() || rounds >= max_rounds;
        if done {
            return Ok(OutlierRejection {
                inliers,
                outliers,
                inlier_indices: indices,
                result,
                rounds,
                rmse_history: history,
            });
        }
        if keep < MIN_POINTS {
            return Err(OrientationError::InlierFloor(keep));
        }
        let (kept, dropped): (Vec<_>, Vec<_>) = inliers.into_iter().zip(indices).partition(|(cp, _)| cp.residual <= threshold);
        outliers.extend(dropped.into_iter().map(|(mut cp, _)| {
            cp.inlier = false;
            cp
        }));
        (inliers, indices) = kept.into_iter().unzip();
        start = result.pose;
    }
}

/// Refined pose document followed by an Initial / Correction / Final ledger.
pub fn pose_report_text(intr: &CameraIntrinsics, initial: &CameraPose, result: &ResectionResult) -> String {
    let mut out = PoseFile::new(&result.pose, intr).to_text();
    let init = initial.to_array();
    let fin = result.pose.to_array();
    let names = ["Xs_m", "Ys_m", "Zs_m", "phi_deg", "omega_deg", "kappa_deg"];
    out.push_str("\n[report]\n");
    let _ = writeln!(out, "rmse_px = {}", result.rmse);
    let _ = writeln!(out, "iterations = {}", result.iterations);
    let _ = writeln!(out, "converged = {}", result.converged);
    for (k, name) in names.iter().enumerate() {
        let conv = |v: f64| if k < 3 { v } else { v.to_degrees() };
        let _ = writeln!(
            out,
            "{name} = {{ initial = {}, correction = {}, final = {} }}",
            conv(init[k]),
            conv(fin[k] - init[k]),
            conv(fin[k])
        );
    }
    out
}
