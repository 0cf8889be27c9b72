//! End-to-end registration: interest points, per-point matching, then
//! resection with gross-error removal.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{detect_partitioned, DetectorError, DetectorParams, InterestPoint};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::matcher::{MatchCandidate, MatchError, MatchMetric, MatchParams, MatchTiming, Matcher};
use crate::orientation::{reject_outliers, ControlPoint, OrientationError, OutlierRejection};
use crate::raster::{GeoRaster, RasterGrid};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("detection stage: {0}")]
    Detection(#[from] DetectorError),
    #[error("matching stage: {0}")]
    Matching(#[from] MatchError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrientationParams {
    pub rmse_target: f64,
    pub max_rounds: usize,
    /// Matching + orientation passes; each later pass re-matches with the
    /// pose refined by the previous one.
    pub passes: usize,
}

impl Default for OrientationParams {
    fn default() -> Self {
        Self {
            rmse_target: 2.0,
            max_rounds: 10,
            passes: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineParams {
    pub detector: DetectorParams,
    pub matching: MatchParams,
    pub orientation: OrientationParams,
}

pub struct SceneInputs<'a> {
    pub aerial: &'a RasterGrid,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub lidar_intensity: &'a GeoRaster,
    pub dsm: &'a GeoRaster,
}

/// Stage wall times. Rectification, descriptor and correlation are summed
/// over interest points and so count work done in parallel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub detection: Duration,
    pub matching_wall: Duration,
    pub per_point: MatchTiming,
    pub resection: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport {
    pub metric: MatchMetric,
    pub interest_points: usize,
    pub matched: usize,
    /// Correct match number: control points surviving outlier removal.
    pub cmn: usize,
    pub rmse: f64,
    pub rounds: usize,
    pub converged: bool,
    pub rmse_target: f64,
    pub initial: CameraPose,
    pub final_pose: CameraPose,
    pub failure: Option<String>,
    pub passes: usize,
    pub timings: StageTimings,
}

impl RegistrationReport {
    /// Converged with at least four inliers and RMSE under the target.
    pub fn success(&self) -> bool {
        self.failure.is_none() && self.converged && self.cmn >= 4 && self.rmse < self.rmse_target
    }

    /// Structured text report; the timing block is optional so that runs on
    /// identical inputs can be compared byte for byte.
    pub fn to_text(&self, with_timing: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[registration]");
        let _ = writeln!(s, "metric = \"{}\"", self.metric);
        let _ = writeln!(s, "interest_points = {}", self.interest_points);
        let _ = writeln!(s, "matched = {}", self.matched);
        let _ = writeln!(s, "cmn = {}", self.cmn);
        let _ = writeln!(s, "rmse_px = {}", self.rmse);
        let _ = writeln!(s, "rmse_target_px = {}", self.rmse_target);
        let _ = writeln!(s, "passes = {}", self.passes);
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "converged = {}", self.converged);
        let _ = writeln!(s, "success = {}", self.success());
        if let Some(f) = &self.failure {
            let _ = writeln!(s, "failure = {:?}", f);
        }
        let _ = writeln!(s, "\n[pose]");
        let names = ["Xs_m", "Ys_m", "Zs_m", "phi_deg", "omega_deg", "kappa_deg"];
        let (a, b) = (self.initial.to_array(), self.final_pose.to_array());
        for (k, name) in names.iter().enumerate() {
            let conv = |v: f64| if k < 3 { v } else { v.to_degrees() };
            let _ = writeln!(
                s,
                "{name} = {{ initial = {}, correction = {}, final = {} }}",
                conv(a[k]),
                conv(b[k] - a[k]),
                conv(b[k])
            );
        }
        if with_timing {
            s.push('\n');
            s.push_str(&self.timing_text());
        }
        s
    }

    /// The `[timing]` block on its own, in seconds.
    pub fn timing_text(&self) -> String {
        let t = &self.timings;
        let mut s = String::from("[timing]\n");
        let _ = writeln!(s, "detection_s = {:.6}", t.detection.as_secs_f64());
        let _ = writeln!(s, "matching_wall_s = {:.6}", t.matching_wall.as_secs_f64());
        let _ = writeln!(s, "rectification_cumulative_s = {:.6}", t.per_point.rectification.as_secs_f64());
        let _ = writeln!(s, "descriptor_cumulative_s = {:.6}", t.per_point.descriptor.as_secs_f64());
        let _ = writeln!(s, "correlation_cumulative_s = {:.6}", t.per_point.correlation.as_secs_f64());
        let _ = writeln!(s, "resection_s = {:.6}", t.resection.as_secs_f64());
        let _ = writeln!(s, "running_time_s = {:.6}", t.total.as_secs_f64());
        s
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub report: RegistrationReport,
    pub points: Vec<InterestPoint>,
    pub candidates: Vec<MatchCandidate>,
    /// Per candidate: survived outlier removal.
    pub inlier_mask: Vec<bool>,
    pub rejection: Option<OutlierRejection>,
}

impl Registration {
    pub fn inlier_candidates(&self) -> impl Iterator<Item = &MatchCandidate> {
        self.candidates.iter().zip(&self.inlier_mask).filter(|(_, &m)| m).map(|(c, _)| c)
    }
}

/// Runs detection, matching and orientation. Orientation failures do not
/// abort: they are recorded in the report so partial results stay available.
pub fn register(inputs: &SceneInputs<'_>, params: &PipelineParams) -> Result<Registration, PipelineError> {
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let points = detect_partitioned(inputs.aerial, &params.detector)?;
    timings.detection = t.elapsed();

    let o = &params.orientation;
    let mut pose = inputs.pose;
    let mut pass = 0;
    loop {
        pass += 1;
        let t = Instant::now();
        let matcher = Matcher::new(inputs.aerial, &pose, &inputs.intrinsics, inputs.lidar_intensity, inputs.dsm, &params.matching)?;
        let candidates = matcher.match_all(&points);
        timings.matching_wall += t.elapsed();
        for c in &candidates {
            timings.per_point += c.timing;
        }

        let accepted: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].accepted).collect();
        let cps: Vec<ControlPoint> = accepted.iter().map(|&i| candidates[i].control_point()).collect();

        let t = Instant::now();
        let outcome: Result<OutlierRejection, OrientationError> = reject_outliers(&cps, &inputs.intrinsics, &pose, o.rmse_target, o.max_rounds);
        timings.resection += t.elapsed();

        let mut inlier_mask = vec![false; candidates.len()];
        let mut report = RegistrationReport {
            metric: params.matching.metric,
            interest_points: points.len(),
            matched: cps.len(),
            cmn: 0,
            rmse: f64::NAN,
            rounds: 0,
            converged: false,
            rmse_target: o.rmse_target,
            initial: inputs.pose,
            final_pose: pose,
            failure: None,
            passes: pass,
            timings,
        };
        let rejection = match outcome {
            Ok(mut rej) => {
                for &k in &rej.inlier_indices {
                    inlier_mask[accepted[k]] = true;
                }
                let (a, b) = (inputs.pose.to_array(), rej.result.pose.to_array());
                rej.result.corrections = std::array::from_fn(|k| b[k] - a[k]);
                report.cmn = rej.inliers.len();
                report.rmse = rej.result.rmse;
                report.rounds = rej.rounds;
                report.converged = rej.result.converged;
                report.final_pose = rej.result.pose;
                Some(rej)
            }
            Err(e) => {
                report.failure = Some(format!("orientation stage: {e}"));
                None
            }
        };
        if pass < o.passes.max(1) && report.success() {
            pose = report.final_pose;
            continue;
        }
        report.timings = timings;
        report.timings.total = start.elapsed();
        return Ok(Registration {
            report,
            points,
            candidates,
            inlier_mask,
            rejection,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RegistrationReport {
        let initial = CameraPose::from_array([100.0, 200.0, 600.0, 0.0, 0.0, 0.0]);
        let final_pose = CameraPose::from_array([101.5, 199.0, 600.25, 0.0, 0.0, 0.5f64.to_radians()]);
        RegistrationReport {
            metric: MatchMetric::CfogPc,
            interest_points: 100,
            matched: 90,
            cmn: 80,
            rmse: 0.5,
            rounds: 3,
            converged: true,
            rmse_target: 2.0,
            initial,
            final_pose,
            failure: None,
            passes: 1,
            timings: StageTimings { total: Duration::from_millis(1500), ..Default::default() },
        }
    }

    #[test]
    fn success_needs_every_condition() {
        assert!(report().success());
        let cases: [fn(&mut RegistrationReport); 4] = [
            |r| r.converged = false,
            |r| r.cmn = 3,
            |r| r.rmse = 2.0,
            |r| r.failure = Some("singular".into()),
        ];
        for f in cases {
            let mut r = report();
            f(&mut r);
            assert!(!r.success());
        }
    }

    #[test]
    fn text_report_round_trips_as_toml() {
        let r = report();
        let t: toml::Table = toml::from_str(&r.to_text(true)).unwrap();
        let reg = t["registration"].as_table().unwrap();
        assert_eq!(reg["metric"].as_str(), Some("cfog-pc"));
        assert_eq!(reg["cmn"].as_integer(), Some(80));
        assert_eq!(reg["success"].as_bool(), Some(true));
        assert!(!reg.contains_key("failure"));
        let xs = t["pose"]["Xs_m"].as_table().unwrap();
        assert_eq!(xs["correction"].as_float(), Some(1.5));
        let kappa = t["pose"]["kappa_deg"]["final"].as_float().unwrap();
        assert!((kappa - 0.5).abs() < 1e-12);
        assert_eq!(t["timing"]["running_time_s"].as_float(), Some(1.5));
    }

    #[test]
    fn timing_block_is_optional_and_failures_are_quoted() {
        let mut r = report();
        r.failure = Some("too few \"points\"".into());
        let text = r.to_text(false);
        assert!(!text.contains("[timing]"));
        let t: toml::Table = toml::from_str(&text).unwrap();
        assert_eq!(t["registration"]["failure"].as_str(), Some("too few \"points\""));
        assert_eq!(t["registration"]["success"].as_bool(), Some(false));
        assert!(r.timing_text().starts_with("[timing]\n"));
    }
}
