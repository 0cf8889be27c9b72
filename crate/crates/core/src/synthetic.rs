//! Seeded synthetic scenes: textured ground, smooth DSM, a perspective
//! aerial rendering and a radiometrically different LiDAR intensity layer.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::cfog::gaussian_blur;
use crate::geometry::{image_to_ground_from, CameraIntrinsics, CameraPose, GeometryError, PoseFile};
use crate::raster::{save_raster, GeoRaster, GeoTransform, RasterError, RasterGrid};

/// Piecewise-constant blocks and discs over a smooth background, lightly
/// blurred. Values span roughly [0, 255].
pub fn texture(width: usize, height: usize, seed: u64) -> RasterGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy, ph) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0), rng.random_range(0.0..PI));
    let mut g = RasterGrid::from_fn(width, height, |c, r| {
        let u = c as f64 / width.max(1) as f64;
        let v = r as f64 / height.max(1) as f64;
        110.0 + 30.0 * (2.0 * PI * fx * u + ph).sin() * (2.0 * PI * fy * v).cos()
    })
    .expect("shape");
    let shapes = (width * height / 90).max(4);
    for _ in 0..shapes {
        let v = rng.random_range(0.0..255.0);
        let (cx, cy) = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
        if rng.random_bool(0.75) {
            let (hw, hh) = (rng.random_range(1.5..16.0), rng.random_range(1.5..16.0));
            let (c0, c1) = ((cx - hw).max(0.0) as usize, ((cx + hw) as usize).min(width));
            let (r0, r1) = ((cy - hh).max(0.0) as usize, ((cy + hh) as usize).min(height));
            for r in r0..r1 {
                for c in c0..c1 {
                    g.set(c, r, v);
                }
            }
        } else {
            let rad: f64 = rng.random_range(2.0..10.0);
            let (c0, c1) = ((cx - rad).max(0.0) as usize, ((cx + rad) as usize + 1).min(width));
            let (r0, r1) = ((cy - rad).max(0.0) as usize, ((cy + rad) as usize + 1).min(height));
            for r in r0..r1 {
                for c in c0..c1 {
                    if (c as f64 - cx).hypot(r as f64 - cy) <= rad {
                        g.set(c, r, v);
                    }
                }
            }
        }
    }
    gaussian_blur(&g, 0.7)
}

/// Rolling terrain above `base`: a planar tilt spanning `relief / 2` across
/// the grid plus a few broad bumps. Curvature stays low at patch scale, so a
/// patch's parallax is close to that of its center.
pub fn hills(width: usize, height: usize, base: f64, relief: f64, seed: u64) -> RasterGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = width.max(height) as f64;
    let (ts, tc) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
    let tilt = 0.5 * relief / scale;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(0.3..0.6) * scale,
                rng.random_range(-0.4..0.8) * relief,
            )
        })
        .collect();
    let (cx, cy) = (0.5 * width as f64, 0.5 * height as f64);
    RasterGrid::from_fn(width, height, |c, r| {
        let (x, y) = (c as f64, r as f64);
        base + tilt * (tc * (x - cx) + ts * (y - cy))
            + bumps
                .iter()
                .map(|&(bx, by, s, a)| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp())
                .sum::<f64>()
    })
    .expect("shape")
}

/// Strictly monotone gamma curve on a [0, 255] scale, optionally inverted.
pub fn gamma_remap(grid: &RasterGrid, gamma: f64, invert: bool) -> RasterGrid {
    let px = grid
        .pixels()
        .iter()
        .map(|&v| {
            let g = 255.0 * (v.clamp(0.0, 255.0) / 255.0).powf(gamma);
            if invert { 255.0 - g } else { g }
        })
        .collect();
    RasterGrid::new(grid.width(), grid.height(), px).expect("shape")
}

/// Additive white Gaussian noise at the given signal-to-noise ratio (dB),
/// relative to the grid's standard deviation.
pub fn add_noise(grid: &RasterGrid, snr_db: f64, rng: &mut impl Rng) -> RasterGrid {
    let n = grid.pixels().len() as f64;
    let mean = grid.pixels().iter().sum::<f64>() / n;
    let var = grid.pixels().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma = (var / 10f64.powf(snr_db / 10.0)).sqrt();
    if !(sigma > 0.0) {
        return grid.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let px = grid.pixels().iter().map(|v| v + normal.sample(rng)).collect();
    RasterGrid::new(grid.width(), grid.height(), px).expect("shape")
}

/// Renders a perspective image of a ground reflectance layer draped on a DSM.
/// Pixels whose ray misses the DSM are 0.
pub fn render_aerial(reflectance: &GeoRaster, dsm: &GeoRaster, pose: &CameraPose, intr: &CameraIntrinsics) -> Result<RasterGrid, GeometryError> {
    pose.validate()?;
    intr.validate()?;
    let z0 = crate::geometry::dsm_mean(dsm)?;
    let (w, h) = (intr.image_width, intr.image_height);
    let mut px = vec![0.0; w * h];
    px.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let mut z = z0;
        for (col, v) in out.iter_mut().enumerate() {
            if let Ok((x, y, zg)) = image_to_ground_from(pose, intr, col as f64, row as f64, dsm, z) {
                z = zg;
                *v = reflectance.sample_bilinear(x, y).unwrap_or(0.0);
            }
        }
    });
    Ok(RasterGrid::new(w, h, px)?)
}

/// Pose offset by `(dX, dY, dZ)` metres and `(dφ, dω, dκ)` degrees.
pub fn perturb(pose: &CameraPose, delta: [f64; 6]) -> CameraPose {
    CameraPose {
        xs: pose.xs + delta[0],
        ys: pose.ys + delta[1],
        zs: pose.zs + delta[2],
        phi: pose.phi + delta[3].to_radians(),
        omega: pose.omega + delta[4].to_radians(),
        kappa: pose.kappa + delta[5].to_radians(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Ground sample distance of the LiDAR rasters, metres.
    pub gsd: f64,
    /// LiDAR cells beyond the aerial footprint on each side.
    pub margin: usize,
    pub base_height: f64,
    pub relief: f64,
    /// Angles of the true pose, degrees.
    pub phi_deg: f64,
    pub omega_deg: f64,
    pub kappa_deg: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    /// Gamma of the LiDAR intensity remap, applied with inversion.
    pub lidar_gamma: f64,
    pub lidar_snr_db: Option<f64>,
    /// Camera focal length, metres; flying height follows from `gsd`.
    pub focal_length: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 1024,
            gsd: 0.5,
            margin: 200,
            base_height: 100.0,
            relief: 40.0,
            phi_deg: 0.4,
            omega_deg: -0.3,
            kappa_deg: 12.0,
            origin_x: 500_000.0,
            origin_y: 4_200_000.0,
            lidar_gamma: 2.0,
            lidar_snr_db: Some(30.0),
            focal_length: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    /// Ground reflectance seen by the camera.
    pub reflectance: GeoRaster,
    pub lidar_intensity: GeoRaster,
    pub dsm: GeoRaster,
    pub aerial: RasterGrid,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

impl Scene {
    pub fn generate(config: &SceneConfig) -> Result<Self, GeometryError> {
        let cells = config.image_size + 2 * config.margin;
        let t = GeoTransform::north_up(config.origin_x, config.origin_y + cells as f64 * config.gsd, config.gsd)?;
        let tex = texture(cells, cells, config.seed);
        let dsm_grid = hills(cells, cells, config.base_height, config.relief, config.seed ^ 0x9e37_79b9);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let mut li = gamma_remap(&tex, config.lidar_gamma, true);
        if let Some(snr) = config.lidar_snr_db {
            li = add_noise(&li, snr, &mut rng);
        }
        let reflectance = GeoRaster::new(tex, t, "synthetic")?;
        let lidar_intensity = GeoRaster::new(li, t, "synthetic")?;
        let dsm = GeoRaster::new(dsm_grid, t, "synthetic")?;

        let intr = CameraIntrinsics {
            f: config.focal_length,
            pixel_size: 1e-5,
            principal_col: (config.image_size as f64 - 1.0) / 2.0,
            principal_row: (config.image_size as f64 - 1.0) / 2.0,
            image_width: config.image_size,
            image_height: config.image_size,
        };
        let (cx, cy) = t.pixel_to_world((cells as f64 - 1.0) / 2.0, (cells as f64 - 1.0) / 2.0);
        let pose = CameraPose {
            xs: cx,
            ys: cy,
            zs: config.base_height + config.gsd * intr.f / intr.pixel_size,
            phi: config.phi_deg.to_radians(),
            omega: config.omega_deg.to_radians(),
            kappa: config.kappa_deg.to_radians(),
        };
        let aerial = render_aerial(&reflectance, &dsm, &pose, &intr)?;
        Ok(Self {
            config: config.clone(),
            reflectance,
            lidar_intensity,
            dsm,
            aerial,
            pose,
            intrinsics: intr,
        })
    }

    /// Writes the scene's inputs; returns the paths of the perturbed pose
    /// file, aerial image, LiDAR intensity and DSM, in that order.
    pub fn save(&self, dir: impl AsRef<Path>, perturbation: [f64; 6]) -> Result<[PathBuf; 4], RasterError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| RasterError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let aerial = GeoRaster::new(self.aerial.clone(), GeoTransform::new(0.0, 0.0, 1.0, -1.0)?, "image")?;
        let paths = [
            dir.join("pose.toml"),
            dir.join("aerial.hdr"),
            dir.join("lidar_intensity.hdr"),
            dir.join("dsm.hdr"),
        ];
        let write = |p: &Path, text: String| {
            fs::write(p, text).map_err(|e| RasterError::Io {
                path: p.display().to_string(),
                source: e,
            })
        };
        write(&paths[0], PoseFile::new(&perturb(&self.pose, perturbation), &self.intrinsics).to_text())?;
        write(&dir.join("pose_true.toml"), PoseFile::new(&self.pose, &self.intrinsics).to_text())?;
        save_raster(&aerial, &paths[1])?;
        save_raster(&self.lidar_intensity, &paths[2])?;
        save_raster(&self.dsm, &paths[3])?;
        Ok(paths)
    }
}
