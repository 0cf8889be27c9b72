use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aerolidar::matcher::MatchMetric;

#[derive(Debug, Parser)]
#[command(name = "aerolidar", version, about = "Register aerial images to LiDAR intensity rasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bin an `x y z intensity` point cloud into intensity and elevation rasters.
    Rasterize(RasterizeArgs),
    /// Register an aerial image to LiDAR rasters and refine its pose.
    Register(RegisterArgs),
    /// Alternate tiles of two co-registered rasters into an 8-bit image.
    Checkerboard(CheckerboardArgs),
    /// Dump the similarity surfaces of a patch pair for each metric.
    Simsurface(SimsurfaceArgs),
    /// Summarize a raster, pose file or descriptor dump.
    Inspect(InspectArgs),
    /// Write a synthetic test scene and a matching register config.
    #[command(hide = true)]
    Synth(SynthArgs),
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got {s}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FillArg {
    Nearest,
    Idw,
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    /// Point cloud with `x y z intensity` lines.
    #[arg(long)]
    pub points: PathBuf,
    /// Cell size in metres.
    #[arg(long, value_parser = positive_f64)]
    pub cell_size: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = FillArg::Nearest)]
    pub fill: FillArg,
    /// Hole-filling search radius, in cells.
    #[arg(long, default_value_t = 3)]
    pub fill_radius: usize,
}

#[derive(Debug, Args, Default)]
pub struct RegisterArgs {
    /// TOML config; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub aerial: Option<PathBuf>,
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub lidar: Option<PathBuf>,
    #[arg(long)]
    pub dsm: Option<PathBuf>,
    /// Point cloud to rasterize instead of `--lidar`/`--dsm`.
    #[arg(long)]
    pub point_cloud: Option<PathBuf>,
    #[arg(long, value_parser = positive_f64)]
    pub cell_size: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub metric: Option<MatchMetric>,
    #[arg(long)]
    pub template_size: Option<usize>,
    #[arg(long)]
    pub search_radius: Option<usize>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long)]
    pub fast_threshold: Option<f64>,
    #[arg(long)]
    pub rmse_target: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub passes: Option<usize>,
    /// Report integer offsets only.
    #[arg(long)]
    pub no_subpixel: bool,
    /// Taper patches with a raised-cosine window before correlation.
    #[arg(long)]
    pub window: bool,
    #[arg(long)]
    pub debug_patches: bool,
    #[arg(long)]
    pub tile: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CheckerboardArgs {
    /// Layer whose grid defines the output.
    pub a: PathBuf,
    /// Layer resampled onto the grid of `a`.
    pub b: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub tile: usize,
    /// Output PGM; a world file is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimsurfaceArgs {
    #[arg(long)]
    pub aerial: PathBuf,
    #[arg(long)]
    pub lidar: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "cfog-pc,ncc,mi")]
    pub metrics: Vec<MatchMetric>,
    /// Offset range of the spatial metrics; defaults to a quarter of the patch.
    #[arg(long)]
    pub search_radius: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub mi_bins: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1024)]
    pub size: usize,
    #[arg(long, default_value_t = 200)]
    pub margin: usize,
    /// Initial pose error: dX, dY, dZ in metres, dphi, domega, dkappa in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true,
          default_values_t = [10.0, 10.0, 5.0, 0.3, 0.3, 0.5])]
    pub perturb: Vec<f64>,
}
