//! Registration configuration: one TOML document plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use aerolidar::cfog::CfogParams;
use aerolidar::detector::DetectorParams;
use aerolidar::matcher::MatchParams;
use aerolidar::pipeline::{OrientationParams, PipelineParams};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub aerial: Option<PathBuf>,
    pub pose: Option<PathBuf>,
    pub lidar_intensity: Option<PathBuf>,
    pub dsm: Option<PathBuf>,
    /// Point cloud rasterized at `cell_size` when the rasters are not given.
    pub point_cloud: Option<PathBuf>,
    pub cell_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Writes each accepted point's rectified and LiDAR patches.
    pub debug_patches: bool,
    pub checkerboard_tile: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("registration"),
            debug_patches: false,
            checkerboard_tile: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: InputPaths,
    pub output: OutputConfig,
    pub detector: DetectorParams,
    pub cfog: CfogParams,
    pub matching: MatchParams,
    pub orientation: OrientationParams,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let i = &mut cfg.inputs;
        for p in [&mut i.aerial, &mut i.pose, &mut i.lidar_intensity, &mut i.dsm, &mut i.point_cloud] {
            resolve(base, p);
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pipeline_params(&self) -> PipelineParams {
        let mut matching = self.matching.clone();
        matching.cfog = self.cfog.clone();
        PipelineParams {
            detector: self.detector.clone(),
            matching,
            orientation: self.orientation.clone(),
        }
    }

    /// Checks parameters and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        let p = self.pipeline_params();
        p.detector.validate()?;
        p.matching.validate()?;
        let o = &self.orientation;
        ensure!(o.rmse_target > 0.0, "orientation.rmse_target must be positive");
        ensure!(o.max_rounds >= 1, "orientation.max_rounds must be >= 1");
        ensure!(o.passes >= 1, "orientation.passes must be >= 1");
        ensure!(self.output.checkerboard_tile >= 1, "output.checkerboard_tile must be >= 1");

        let i = &self.inputs;
        let required = |name: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                None => bail!("missing input path: inputs.{name}"),
                Some(p) if !p.exists() => bail!("inputs.{name} does not exist: {}", p.display()),
                Some(_) => Ok(()),
            }
        };
        required("aerial", &i.aerial)?;
        required("pose", &i.pose)?;
        match (&i.lidar_intensity, &i.dsm) {
            (Some(_), Some(_)) => {
                required("lidar_intensity", &i.lidar_intensity)?;
                required("dsm", &i.dsm)?;
            }
            (None, None) if i.point_cloud.is_some() => {
                required("point_cloud", &i.point_cloud)?;
                match i.cell_size {
                    Some(c) if c > 0.0 && c.is_finite() => {}
                    _ => bail!("inputs.cell_size must be a positive number when rasterizing a point cloud"),
                }
            }
            (None, None) => bail!("missing input path: inputs.lidar_intensity and inputs.dsm (or inputs.point_cloud)"),
            (Some(_), None) => bail!("missing input path: inputs.dsm"),
            (None, Some(_)) => bail!("missing input path: inputs.lidar_intensity"),
        }
        Ok(())
    }
}
