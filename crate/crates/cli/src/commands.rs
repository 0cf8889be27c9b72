//! Command implementations. Every stage writes its output to files so runs
//! can be inspected step by step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use aerolidar::cfog::{build_cfog, CfogParams, DescriptorVolume};
use aerolidar::detector::write_points_csv;
use aerolidar::geometry::{rectify_window, PoseFile};
use aerolidar::matcher::{
    mi_map, ncc_map, phase_correlate, subpixel_peak_with, write_candidates_csv, write_control_points_csv, CorrelationSurface, MatchMetric,
    Matcher, SubpixelMethod,
};
use aerolidar::orientation::pose_report_text;
use aerolidar::pipeline::{self, Registration, SceneInputs};
use aerolidar::raster::{
    load_raster, read_point_cloud, save_raster, write_pgm, write_world_file, Attribute, FillStrategy, GeoRaster, RasterGrid, Rasterizer,
};
use aerolidar::synthetic::{Scene, SceneConfig};

use crate::args::{CheckerboardArgs, FillArg, InspectArgs, RasterizeArgs, RegisterArgs, SimsurfaceArgs, SynthArgs};
use crate::config::{InputPaths, PipelineConfig};
use crate::mosaic;
use crate::Status;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn rasterizer(cell_size: f64, fill: FillStrategy, radius: usize) -> Result<Rasterizer> {
    ensure!(cell_size > 0.0 && cell_size.is_finite(), "cell size must be positive, got {cell_size}");
    let mut r = Rasterizer::new(cell_size).with_fill(fill);
    r.search_radius = radius;
    Ok(r)
}

/// Intensity and elevation rasters of a point cloud file.
fn rasterize_file(path: &Path, r: &Rasterizer) -> Result<(GeoRaster, GeoRaster)> {
    let points = read_point_cloud(path)?;
    ensure!(!points.is_empty(), "point cloud {} holds no points", path.display());
    Ok((r.rasterize(&points, Attribute::Intensity)?, r.rasterize(&points, Attribute::Elevation)?))
}

pub fn rasterize(a: &RasterizeArgs) -> Result<Status> {
    let fill = match a.fill {
        FillArg::Nearest => FillStrategy::Nearest,
        FillArg::Idw => FillStrategy::InverseDistance,
    };
    let r = rasterizer(a.cell_size, fill, a.fill_radius)?;
    let (intensity, elevation) = rasterize_file(&a.points, &r)?;
    create_dir(&a.out_dir)?;
    for (name, raster) in [("intensity.hdr", &intensity), ("elevation.hdr", &elevation)] {
        save_raster(raster, a.out_dir.join(name))?;
    }
    println!(
        "rasterized {} into {}x{} cells of {} m ({} valid)",
        a.points.display(),
        intensity.width(),
        intensity.height(),
        a.cell_size,
        intensity.grid.valid_count()
    );
    Ok(Status::Success)
}

/// Config file values with command-line flags applied on top.
pub fn build_config(a: &RegisterArgs) -> Result<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let i = &mut cfg.inputs;
    if a.point_cloud.is_some() {
        i.point_cloud = a.point_cloud.clone();
        if a.lidar.is_none() && a.dsm.is_none() {
            i.lidar_intensity = None;
            i.dsm = None;
        }
    }
    let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
        if src.is_some() {
            *dst = src.clone();
        }
    };
    set(&mut i.aerial, &a.aerial);
    set(&mut i.pose, &a.pose);
    set(&mut i.lidar_intensity, &a.lidar);
    set(&mut i.dsm, &a.dsm);
    if a.cell_size.is_some() {
        i.cell_size = a.cell_size;
    }
    if let Some(d) = &a.out_dir {
        cfg.output.dir = d.clone();
    }
    let m = &mut cfg.matching;
    if let Some(v) = a.metric {
        m.metric = v;
    }
    if let Some(v) = a.template_size {
        m.template_size = v;
    }
    if let Some(v) = a.search_radius {
        m.search_radius = v;
    }
    if let Some(v) = a.min_confidence {
        m.min_confidence = v;
    }
    if a.no_subpixel {
        m.subpixel = false;
    }
    if a.window {
        m.window = true;
    }
    if let Some(v) = a.grid_n {
        cfg.detector.grid_n = v;
    }
    if let Some(v) = a.fast_threshold {
        cfg.detector.fast_threshold = v;
    }
    let o = &mut cfg.orientation;
    if let Some(v) = a.rmse_target {
        o.rmse_target = v;
    }
    if let Some(v) = a.max_rounds {
        o.max_rounds = v;
    }
    if let Some(v) = a.passes {
        o.passes = v;
    }
    if a.debug_patches {
        cfg.output.debug_patches = true;
    }
    if let Some(v) = a.tile {
        cfg.output.checkerboard_tile = v;
    }
    Ok(cfg)
}

pub struct LoadedInputs {
    pub aerial: RasterGrid,
    pub pose: PoseFile,
    pub lidar_intensity: GeoRaster,
    pub dsm: GeoRaster,
}

/// Loads the inputs of a validated config.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<LoadedInputs> {
    let i = &cfg.inputs;
    let path = |p: &Option<PathBuf>| p.clone().expect("validated config");
    let aerial = load_raster(path(&i.aerial))?.grid;
    let pose = PoseFile::read(path(&i.pose))?;
    let intr = pose.intrinsics();
    ensure!(
        (aerial.width(), aerial.height()) == (intr.image_width, intr.image_height),
        "aerial image is {}x{} but the pose file describes a {}x{} sensor",
        aerial.width(),
        aerial.height(),
        intr.image_width,
        intr.image_height
    );
    let (lidar_intensity, dsm) = match (&i.lidar_intensity, &i.dsm) {
        (Some(l), Some(d)) => (load_raster(l)?, load_raster(d)?),
        _ => {
            let r = rasterizer(i.cell_size.unwrap_or(0.0), FillStrategy::Nearest, 3)?;
            rasterize_file(&path(&i.point_cloud), &r)?
        }
    };
    Ok(LoadedInputs {
        aerial,
        pose,
        lidar_intensity,
        dsm,
    })
}

fn write_registration_artifacts(cfg: &PipelineConfig, inputs: &LoadedInputs, reg: &Registration) -> Result<()> {
    let out = &cfg.output.dir;
    let intr = inputs.pose.intrinsics();
    let report = &reg.report;

    let f = fs::File::create(out.join("interest_points.csv")).context("creating interest_points.csv")?;
    write_points_csv(std::io::BufWriter::new(f), &reg.points).context("writing interest_points.csv")?;
    write_candidates_csv(out.join("candidates.csv"), &reg.candidates)?;
    write_control_points_csv(out.join("control_points.csv"), reg.inlier_candidates())?;
    write_file(&out.join("report.toml"), &report.to_text(false))?;
    write_file(&out.join("timing.toml"), &report.timing_text())?;
    if let Some(rej) = &reg.rejection {
        write_file(&out.join("pose_refined.toml"), &pose_report_text(&intr, &report.initial, &rej.result))?;
    }

    let lidar = &inputs.lidar_intensity;
    match rectify_window(&inputs.aerial, &report.final_pose, &intr, &inputs.dsm, lidar.transform, lidar.width(), lidar.height()) {
        Ok(ortho) => {
            save_raster(&ortho, out.join("orthophoto.hdr"))?;
            let (board, _) = mosaic::checkerboard(&ortho, lidar, cfg.output.checkerboard_tile)?;
            write_pgm(&board, out.join("checkerboard.pgm"))?;
            write_world_file(&lidar.transform, out.join("checkerboard.pgw"))?;
        }
        Err(e) => eprintln!("warning: skipping orthophoto and checkerboard: {e}"),
    }

    if cfg.output.debug_patches {
        let dir = out.join("patches");
        create_dir(&dir)?;
        let params = cfg.pipeline_params();
        let m = Matcher::new(&inputs.aerial, &report.initial, &intr, lidar, &inputs.dsm, &params.matching)?;
        for (k, (pt, c)) in reg.points.iter().zip(&reg.candidates).enumerate() {
            if !c.accepted {
                continue;
            }
            if let Ok((aerial, lidar, _)) = m.patches(pt) {
                save_raster(&aerial, dir.join(format!("{k:04}_aerial.hdr")))?;
                save_raster(&lidar, dir.join(format!("{k:04}_lidar.hdr")))?;
            }
        }
    }
    Ok(())
}

pub fn register(a: &RegisterArgs) -> Result<Status> {
    let cfg = build_config(a)?;
    cfg.validate()?;
    let inputs = load_inputs(&cfg)?;
    create_dir(&cfg.output.dir)?;
    let scene = SceneInputs {
        aerial: &inputs.aerial,
        pose: inputs.pose.pose(),
        intrinsics: inputs.pose.intrinsics(),
        lidar_intensity: &inputs.lidar_intensity,
        dsm: &inputs.dsm,
    };
    let reg = pipeline::register(&scene, &cfg.pipeline_params())?;
    write_registration_artifacts(&cfg, &inputs, &reg)?;
    print!("{}", reg.report.to_text(true));
    Ok(if reg.report.success() { Status::Success } else { Status::RegistrationFailed })
}

pub fn checkerboard(a: &CheckerboardArgs) -> Result<Status> {
    let (la, lb) = (load_raster(&a.a)?, load_raster(&a.b)?);
    let (board, _) = mosaic::checkerboard(&la, &lb, a.tile)?;
    write_pgm(&board, &a.out)?;
    write_world_file(&la.transform, a.out.with_extension("pgw"))?;
    println!("wrote {}x{} checkerboard to {}", board.width(), board.height(), a.out.display());
    Ok(Status::Success)
}

fn crop(grid: &RasterGrid, col: usize, row: usize, w: usize, h: usize) -> Result<RasterGrid> {
    Ok(RasterGrid::from_fn(w, h, |c, r| grid.get(col + c, row + r))?)
}

/// Similarity surface of one metric. Spatial metrics slide the central
/// crop of `aerial` over `lidar` within `radius`.
fn surface(metric: MatchMetric, aerial: &RasterGrid, lidar: &RasterGrid, radius: usize, bins: usize) -> Result<CorrelationSurface> {
    let (w, h) = (aerial.width(), aerial.height());
    match metric {
        MatchMetric::CfogPc => {
            ensure!(
                (w, h) == (lidar.width(), lidar.height()),
                "phase correlation needs equal patch sizes, got {w}x{h} and {}x{}",
                lidar.width(),
                lidar.height()
            );
            let p = CfogParams::default();
            Ok(phase_correlate(&build_cfog(aerial, &p)?, &build_cfog(lidar, &p)?)?)
        }
        MatchMetric::Ncc | MatchMetric::Mi => {
            ensure!(2 * radius < w.min(h), "search radius {radius} leaves no template inside a {w}x{h} patch");
            let t = crop(aerial, radius, radius, w - 2 * radius, h - 2 * radius)?;
            Ok(if metric == MatchMetric::Ncc { ncc_map(&t, lidar)? } else { mi_map(&t, lidar, bins)? })
        }
    }
}

pub fn simsurface(a: &SimsurfaceArgs) -> Result<Status> {
    let aerial = load_raster(&a.aerial)?.grid;
    let lidar = load_raster(&a.lidar)?.grid;
    let radius = a.search_radius.unwrap_or(aerial.width().min(aerial.height()) / 4);
    create_dir(&a.out_dir)?;
    let mut summary = String::new();
    for &metric in &a.metrics {
        let _ = writeln!(summary, "[{metric}]");
        match surface(metric, &aerial, &lidar, radius, a.mi_bins) {
            Ok(s) => {
                let file = format!("surface_{metric}.hdr");
                s.write_dump(a.out_dir.join(&file))?;
                let (c, r, peak) = s.argmax();
                let (dx, dy) = s.offset_of(c, r);
                let method = if metric == MatchMetric::CfogPc { SubpixelMethod::TwoPoint } else { SubpixelMethod::Parabolic };
                let _ = writeln!(summary, "surface = {file:?}");
                let _ = writeln!(summary, "argmax_dx = {dx}");
                let _ = writeln!(summary, "argmax_dy = {dy}");
                let _ = writeln!(summary, "peak = {peak}");
                let _ = writeln!(summary, "confidence = {}", s.confidence(c, r));
                if let Ok((sx, sy)) = subpixel_peak_with(&s, c, r, method) {
                    let _ = writeln!(summary, "subpixel_dx = {sx}");
                    let _ = writeln!(summary, "subpixel_dy = {sy}");
                }
            }
            Err(e) => {
                let _ = writeln!(summary, "error = {:?}", format!("{e:#}"));
            }
        }
        summary.push('\n');
    }
    write_file(&a.out_dir.join("summary.toml"), &summary)?;
    print!("{summary}");
    Ok(Status::Success)
}

fn inspect_volume(v: &DescriptorVolume) -> String {
    let (w, h, m) = v.dims();
    let mut s = format!("kind = \"cfog\"\nwidth = {w}\nheight = {h}\nchannels = {m}\n");
    let n = w * h;
    let zero = (0..n).filter(|&i| (0..m).all(|ch| v.channel(ch)[i] == 0.0)).count();
    let _ = writeln!(s, "zero_pixels = {zero}");
    for ch in 0..m {
        let c = v.channel(ch);
        let mean = c.iter().sum::<f64>() / n as f64;
        let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(s, "channel_{ch} = {{ mean = {mean}, max = {max} }}");
    }
    s
}

fn inspect_raster(r: &GeoRaster) -> String {
    let t = &r.transform;
    let mut s = format!("kind = \"raster\"\nwidth = {}\nheight = {}\n", r.width(), r.height());
    let _ = writeln!(s, "origin = [{}, {}]", t.origin_x, t.origin_y);
    let _ = writeln!(s, "pixel_size = [{}, {}]", t.pixel_size_x, t.pixel_size_y);
    let (x0, y0, x1, y1) = r.bounds();
    let _ = writeln!(s, "bounds = [{x0}, {y0}, {x1}, {y1}]");
    let _ = writeln!(s, "crs_tag = {:?}", r.crs_tag);
    if let Some(nd) = r.grid.nodata() {
        let _ = writeln!(s, "nodata = {nd}");
    }
    let _ = writeln!(s, "valid = {}", r.grid.valid_count());
    if let Some((min, max, mean)) = r.grid.valid_stats() {
        let _ = writeln!(s, "min = {min}\nmax = {max}\nmean = {mean}");
    }
    s
}

pub fn inspect(a: &InspectArgs) -> Result<Status> {
    let p = &a.path;
    let mut magic = [0u8; 4];
    let head = fs::File::open(p)
        .and_then(|mut f| std::io::Read::read(&mut f, &mut magic))
        .with_context(|| format!("reading {}", p.display()))?;
    let text = if head == 4 && &magic == b"CFOG" {
        inspect_volume(&DescriptorVolume::read_dump(p)?)
    } else if p.extension().is_some_and(|e| e == "toml") {
        let pose = PoseFile::read(p)?;
        format!("kind = \"pose\"\n{}", pose.to_text())
    } else {
        inspect_raster(&load_raster(p)?)
    };
    print!("{text}");
    Ok(Status::Success)
}

pub fn synth(a: &SynthArgs) -> Result<Status> {
    let &[dx, dy, dz, dp, dw, dk] = a.perturb.as_slice() else {
        bail!("--perturb takes six values");
    };
    let config = SceneConfig {
        seed: a.seed,
        image_size: a.size,
        margin: a.margin,
        ..SceneConfig::default()
    };
    let scene = Scene::generate(&config)?;
    let paths = scene.save(&a.out_dir, [dx, dy, dz, dp, dw, dk])?;
    let name = |p: &PathBuf| PathBuf::from(p.file_name().expect("file name"));
    let mut cfg = PipelineConfig {
        inputs: InputPaths {
            pose: Some(name(&paths[0])),
            aerial: Some(name(&paths[1])),
            lidar_intensity: Some(name(&paths[2])),
            dsm: Some(name(&paths[3])),
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.output.dir = PathBuf::from("registration");
    write_file(&a.out_dir.join("register.toml"), &cfg.to_text())?;
    println!("wrote synthetic scene to {}", a.out_dir.display());
    Ok(Status::Success)
}
