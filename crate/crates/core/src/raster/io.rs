//! Raster containers on disk.
//!
//! The native container is a raw little-endian float payload plus a sidecar
//! `.hdr` key/value header. Binary PGM (P5, 8- or 16-bit) is accepted on load,
//! georeferenced by an optional ESRI world file (`.pgw` or `.wld`).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GeoRaster, GeoTransform, LidarPoint, RasterError, RasterGrid, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    width: usize,
    height: usize,
    #[serde(default = "default_sample_type")]
    sample_type: String,
    origin_x: f64,
    origin_y: f64,
    pixel_size_x: f64,
    pixel_size_y: f64,
    #[serde(default)]
    rotation_x: f64,
    #[serde(default)]
    rotation_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nodata: Option<f64>,
    #[serde(default)]
    crs_tag: String,
}

fn default_sample_type() -> String {
    "float32".into()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Payload and header paths for a container path. A `.hdr` path names the
/// header and implies a `.bin` payload; any other path names the payload.
fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "hdr") {
        (path.with_extension("bin"), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.with_extension("hdr"))
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<GeoRaster> {
    let path = path.as_ref();
    if is_pgm(path) {
        return load_pgm(path);
    }
    let (payload_path, header_path) = container_paths(path);
    let text = fs::read_to_string(&header_path).map_err(io_err(&header_path))?;
    let header: Header = toml::from_str(&text).map_err(|e| RasterError::MalformedHeader {
        path: header_path.display().to_string(),
        msg: e.message().to_string(),
    })?;
    let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;

    let width = header.width;
    let height = header.height;
    let sample_bytes = match header.sample_type.as_str() {
        "float32" => 4,
        "float64" => 8,
        other => {
            return Err(RasterError::MalformedHeader {
                path: header_path.display().to_string(),
                msg: format!("unsupported sample_type {other:?}"),
            })
        }
    };
    if bytes.len() % sample_bytes != 0 {
        return Err(RasterError::MalformedHeader {
            path: payload_path.display().to_string(),
            msg: format!("payload length {} is not a multiple of {sample_bytes}", bytes.len()),
        });
    }
    let found = bytes.len() / sample_bytes;
    if found != width * height {
        return Err(RasterError::DimensionMismatch {
            expected: width * height,
            found,
        });
    }
    let pixels: Vec<f64> = if sample_bytes == 4 {
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()
    };
    let grid = RasterGrid::with_nodata(width, height, pixels, header.nodata)?;
    let transform = GeoTransform {
        origin_x: header.origin_x,
        origin_y: header.origin_y,
        pixel_size_x: header.pixel_size_x,
        pixel_size_y: header.pixel_size_y,
        rotation_x: header.rotation_x,
        rotation_y: header.rotation_y,
    };
    GeoRaster::new(grid, transform, header.crs_tag)
}

/// Writes the native container. Samples are stored as 32-bit floats when that
/// is lossless for every sample, otherwise as 64-bit floats.
pub fn save_raster(raster: &GeoRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (payload_path, header_path) = container_paths(path);
    raster.transform.validate()?;

    let f32_exact = |v: f64| v.is_nan() || (v as f32) as f64 == v;
    let pixels = raster.grid.pixels();
    let narrow = pixels.iter().all(|&v| f32_exact(v)) && raster.grid.nodata().is_none_or(f32_exact);

    let mut payload = Vec::with_capacity(pixels.len() * if narrow { 4 } else { 8 });
    for &v in pixels {
        if narrow {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let t = &raster.transform;
    let header = Header {
        width: raster.width(),
        height: raster.height(),
        sample_type: if narrow { "float32" } else { "float64" }.into(),
        origin_x: t.origin_x,
        origin_y: t.origin_y,
        pixel_size_x: t.pixel_size_x,
        pixel_size_y: t.pixel_size_y,
        rotation_x: t.rotation_x,
        rotation_y: t.rotation_y,
        nodata: raster.grid.nodata(),
        crs_tag: raster.crs_tag.clone(),
    };
    let text = toml::to_string(&header).expect("header serializes");
    fs::write(&payload_path, payload).map_err(io_err(&payload_path))?;
    fs::write(&header_path, text).map_err(io_err(&header_path))?;
    Ok(())
}

fn load_pgm(path: &Path) -> Result<GeoRaster> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let malformed = |msg: &str| RasterError::MalformedHeader {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };

    // Header: magic, width, height, maxval, separated by whitespace and comments.
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates maxval from the raster.
    pos += 1;
    if tokens[0] != "P5" {
        return Err(malformed("only binary PGM (P5) is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| malformed("non-numeric PGM field"));
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let maxval = parse(&tokens[3])?;
    if maxval == 0 || maxval > 65535 {
        return Err(malformed("PGM maxval out of range"));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let data = bytes.get(pos..).unwrap_or(&[]);
    let found = data.len() / bps;
    if found != width * height {
        return Err(RasterError::DimensionMismatch {
            expected: width * height,
            found,
        });
    }
    let pixels = if bps == 1 {
        data.iter().map(|&b| b as f64).collect()
    } else {
        data.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64)
            .collect()
    };
    let grid = RasterGrid::new(width, height, pixels)?;
    let transform = match read_world_file(path)? {
        Some(t) => t,
        None => GeoTransform::new(0.0, 0.0, 1.0, -1.0)?,
    };
    GeoRaster::new(grid, transform, "")
}

fn read_world_file(image_path: &Path) -> Result<Option<GeoTransform>> {
    for ext in ["pgw", "wld"] {
        let wpath = image_path.with_extension(ext);
        if !wpath.exists() {
            continue;
        }
        let text = fs::read_to_string(&wpath).map_err(io_err(&wpath))?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| RasterError::MalformedHeader {
                path: wpath.display().to_string(),
                msg: "world file terms must be numeric".into(),
            })?;
        if vals.len() != 6 {
            return Err(RasterError::MalformedHeader {
                path: wpath.display().to_string(),
                msg: format!("world file needs 6 terms, found {}", vals.len()),
            });
        }
        // A, D, B, E, C, F with C/F naming the center of the upper-left pixel.
        let (a, d, b, e, c, f) = (vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]);
        let t = GeoTransform {
            origin_x: c - 0.5 * a - 0.5 * b,
            origin_y: f - 0.5 * d - 0.5 * e,
            pixel_size_x: a,
            pixel_size_y: e,
            rotation_x: b,
            rotation_y: d,
        };
        t.validate()?;
        return Ok(Some(t));
    }
    Ok(None)
}

pub fn write_world_file(transform: &GeoTransform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let t = transform;
    let (cx, cy) = t.pixel_to_world(0.0, 0.0);
    let text = format!(
        "{}\n{}\n{}\n{}\n{}\n{}\n",
        t.pixel_size_x, t.rotation_y, t.rotation_x, t.pixel_size_y, cx, cy
    );
    fs::write(path, text).map_err(io_err(path))
}

/// Writes an 8-bit binary PGM. Samples are rounded and clamped to 0..=255.
pub fn write_pgm(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.pixels().iter().map(|&v| {
        if v.is_finite() {
            v.round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

/// Parses `x y z intensity` lines; blank lines and `#` comments are skipped.
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<Vec<LidarPoint>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let parse_err = |msg: String| RasterError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<f64> = body
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(format!("bad number {s:?}"))))
            .collect::<Result<_>>()?;
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        if fields[3] < 0.0 {
            return Err(parse_err("negative intensity".into()));
        }
        points.push(LidarPoint {
            x: fields[0],
            y: fields[1],
            z: fields[2],
            intensity: fields[3],
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raster(w: usize, h: usize, pixels: Vec<f64>, nodata: Option<f64>) -> GeoRaster {
        GeoRaster::new(
            RasterGrid::with_nodata(w, h, pixels, nodata).unwrap(),
            GeoTransform::new(500123.25, 3328440.5, 0.2, -0.2).unwrap(),
            "EPSG:32650",
        )
        .unwrap()
    }

    #[test]
    fn payload_echo_2x2() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        fs::write(&p, [1f32, 2., 3., 4.].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()).unwrap();
        fs::write(
            p.with_extension("hdr"),
            "width = 2\nheight = 2\norigin_x = 0.0\norigin_y = 2.0\npixel_size_x = 1.0\npixel_size_y = -1.0\n",
        )
        .unwrap();
        let r = load_raster(&p).unwrap();
        assert_eq!(r.grid.pixels(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.transform.origin_y, 2.0);
        // Either path of the pair opens the container.
        assert_eq!(load_raster(p.with_extension("hdr")).unwrap(), r);
    }

    #[test]
    fn header_payload_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        fs::write(&p, vec![0u8; 16]).unwrap();
        fs::write(
            p.with_extension("hdr"),
            "width = 3\nheight = 1\norigin_x = 0.0\norigin_y = 0.0\npixel_size_x = 1.0\npixel_size_y = -1.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_raster(&p),
            Err(RasterError::DimensionMismatch { expected: 3, found: 4 })
        ));
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.bin");
        assert!(matches!(load_raster(&p), Err(RasterError::Io { .. })));
        fs::write(&p, [0u8; 4]).unwrap();
        fs::write(p.with_extension("hdr"), "width = \"x\"").unwrap();
        assert!(matches!(load_raster(&p), Err(RasterError::MalformedHeader { .. })));
    }

    #[test]
    fn unwritable_destination() {
        let r = raster(1, 1, vec![1.0], None);
        assert!(matches!(
            save_raster(&r, "/nonexistent-dir/x/y.bin"),
            Err(RasterError::Io { .. })
        ));
    }

    #[test]
    fn roundtrip_256_with_nodata_holes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<f64> = (0..256 * 256)
            .map(|i| if i % 97 == 0 { -9999.0 } else { (rng.random::<f32>() * 255.0) as f64 })
            .collect();
        let r = raster(256, 256, pixels, Some(-9999.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        save_raster(&r, &p).unwrap();
        let back = load_raster(&p).unwrap();
        assert_eq!(back, r);
        assert!(fs::read_to_string(p.with_extension("hdr")).unwrap().contains("float32"));
    }

    #[test]
    fn wide_samples_fall_back_to_float64() {
        let r = raster(2, 1, vec![0.1, 1.0 / 3.0], Some(f64::NAN));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        save_raster(&r, &p).unwrap();
        let back = load_raster(&p).unwrap();
        assert_eq!(back.grid.pixels(), r.grid.pixels());
        assert!(back.grid.nodata().unwrap().is_nan());
    }

    #[test]
    fn pgm_8_and_16_bit_with_world_file() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("a.pgm");
        let mut b = b"P5\n# comment\n3 1\n255\n".to_vec();
        b.extend([0u8, 128, 255]);
        fs::write(&p8, b).unwrap();
        let r = load_raster(&p8).unwrap();
        assert_eq!(r.grid.pixels(), &[0.0, 128.0, 255.0]);
        assert_eq!(r.transform.pixel_size_x, 1.0);

        let p16 = dir.path().join("b.pgm");
        let mut b = b"P5 2 1 65535\n".to_vec();
        b.extend([0x01, 0x02, 0xff, 0xff]);
        fs::write(&p16, b).unwrap();
        fs::write(p16.with_extension("pgw"), "0.5\n0\n0\n-0.5\n100.25\n199.75\n").unwrap();
        let r = load_raster(&p16).unwrap();
        assert_eq!(r.grid.pixels(), &[258.0, 65535.0]);
        assert_eq!(r.pixel_to_world(0.0, 0.0), (100.25, 199.75));
        assert_eq!(r.transform.origin_x, 100.0);
    }

    #[test]
    fn world_file_roundtrip_via_pgm_writer() {
        let dir = tempfile::tempdir().unwrap();
        let grid = RasterGrid::from_fn(4, 3, |c, r| (c * 10 + r) as f64).unwrap();
        let t = GeoTransform::new(10.0, 20.0, 2.0, -2.0).unwrap();
        let p = dir.path().join("w.pgm");
        write_pgm(&grid, &p).unwrap();
        write_world_file(&t, p.with_extension("pgw")).unwrap();
        let r = load_raster(&p).unwrap();
        assert_eq!(r.grid, grid);
        assert_eq!(r.transform, t);
    }

    #[test]
    fn point_cloud_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pc.txt");
        fs::write(&p, "# header\n1 2 3 4\n\n 5.5\t6 7 8 # trailing\n").unwrap();
        let pts = read_point_cloud(&p).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].x, 5.5);
        fs::write(&p, "1 2 3\n").unwrap();
        assert!(matches!(read_point_cloud(&p), Err(RasterError::Parse { line: 1, .. })));
        fs::write(&p, "1 2 3 -1\n").unwrap();
        assert!(read_point_cloud(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_roundtrip_is_exact(
            w in 1usize..24,
            h in 1usize..24,
            seed in any::<u64>(),
            ox in -1e6f64..1e6,
            oy in -1e6f64..1e6,
            cell in 1e-3f64..50.0,
            wide in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pixels: Vec<f64> = (0..w * h)
                .map(|_| if wide { rng.random::<f64>() } else { rng.random::<f32>() as f64 })
                .collect();
            let r = GeoRaster::new(
                RasterGrid::new(w, h, pixels).unwrap(),
                GeoTransform::new(ox, oy, cell, -cell * 1.5).unwrap(),
                "tag with spaces",
            ).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.bin");
            save_raster(&r, &p).unwrap();
            prop_assert_eq!(load_raster(&p).unwrap(), r);
        }
    }
}
