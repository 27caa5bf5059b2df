//! File formats: the `splatscene` text format, binary PPM images, and
//! plain-text depth grids. All decimals are written with 17 significant
//! digits so a save/load round trip is exact for f64.

use crate::scene::{normalize_quat, Camera, Gaussian3D, Image};
use nalgebra::{Matrix3, Vector3};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

type Result<T> = std::result::Result<T, IoError>;

/// Scene file plus parse statistics.
#[derive(Debug)]
pub struct LoadedScene {
    pub gaussians: Vec<Gaussian3D>,
    pub cameras: Vec<Camera>,
    /// Quaternions that were not unit length and got renormalized on load.
    pub renormalized_quats: usize,
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn gaussian_line(g: &Gaussian3D) -> String {
    let mut fields = Vec::with_capacity(14);
    fields.extend(g.mean.iter().map(|v| fmt_f64(*v)));
    fields.extend(g.log_scale.iter().map(|v| fmt_f64(*v)));
    fields.extend(g.rotation.iter().map(|v| fmt_f64(*v)));
    fields.push(fmt_f64(g.opacity_logit));
    fields.extend(g.color.iter().map(|v| fmt_f64(*v)));
    fields.join(" ")
}

/// Build a gaussian from 14 parsed fields; the flag reports whether the
/// stored quaternion needed renormalizing.
pub(crate) fn gaussian_from_fields(v: &[f64]) -> (Gaussian3D, bool) {
    let quat = [v[6], v[7], v[8], v[9]];
    let norm = quat.iter().map(|q| q * q).sum::<f64>().sqrt();
    let renormalized = (norm - 1.0).abs() > 1e-9;
    let rotation = if renormalized { normalize_quat(quat) } else { quat };
    (
        Gaussian3D {
            mean: Vector3::new(v[0], v[1], v[2]),
            log_scale: Vector3::new(v[3], v[4], v[5]),
            rotation,
            opacity_logit: v[10],
            color: [v[11], v[12], v[13]],
        },
        renormalized,
    )
}

/// Serialize gaussians and cameras to the `splatscene 1` text format.
pub fn save_scene(gaussians: &[Gaussian3D], cameras: &[Camera], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("splatscene 1\n");
    let _ = writeln!(out, "gaussians {}", gaussians.len());
    for g in gaussians {
        out.push_str(&gaussian_line(g));
        out.push('\n');
    }
    let _ = writeln!(out, "cameras {}", cameras.len());
    for c in cameras {
        let mut fields = Vec::with_capacity(19);
        for i in 0..3 {
            for j in 0..3 {
                fields.push(fmt_f64(c.rotation[(i, j)]));
            }
        }
        fields.extend(c.translation.iter().map(|v| fmt_f64(*v)));
        for v in [
            c.fx,
            c.fy,
            c.cx,
            c.cy,
            c.width as f64,
            c.height as f64,
            c.znear,
            c.zfar,
        ] {
            fields.push(fmt_f64(v));
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let err = |line: usize, msg: String| IoError::Parse {
        path: pstr.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();

    let (ln, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty file".into()))?;
    if header.trim() != "splatscene 1" {
        return Err(err(ln + 1, format!("expected `splatscene 1`, got `{header}`")));
    }

    fn section_count(
        lines: &mut std::iter::Enumerate<std::str::Lines>,
        keyword: &str,
        err: &dyn Fn(usize, String) -> IoError,
    ) -> Result<usize> {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing `{keyword}` section")))?;
        let mut it = line.split_whitespace();
        let (kw, n) = (it.next(), it.next());
        if kw != Some(keyword) {
            return Err(err(ln + 1, format!("expected `{keyword} <count>`, got `{line}`")));
        }
        n.and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| err(ln + 1, format!("bad count in `{line}`")))
    }

    let n_gaussians = section_count(&mut lines, "gaussians", &err)?;
    let mut gaussians = Vec::with_capacity(n_gaussians);
    let mut renormalized = 0usize;
    for _ in 0..n_gaussians {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(0, "unexpected end of gaussian section".into()))?;
        let v = parse_fields(line, 14).map_err(|msg| err(ln + 1, msg))?;
        let (g, fixed) = gaussian_from_fields(&v);
        renormalized += usize::from(fixed);
        gaussians.push(g);
    }

    let n_cameras = section_count(&mut lines, "cameras", &err)?;
    let mut cameras = Vec::with_capacity(n_cameras);
    for _ in 0..n_cameras {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(0, "unexpected end of camera section".into()))?;
        let v = parse_fields(line, 20).map_err(|msg| err(ln + 1, msg))?;
        #[rustfmt::skip]
        let rotation = Matrix3::new(
            v[0], v[1], v[2],
            v[3], v[4], v[5],
            v[6], v[7], v[8],
        );
        cameras.push(Camera {
            rotation,
            translation: Vector3::new(v[9], v[10], v[11]),
            fx: v[12],
            fy: v[13],
            cx: v[14],
            cy: v[15],
            width: v[16] as u32,
            height: v[17] as u32,
            znear: v[18],
            zfar: v[19],
        });
    }

    Ok(LoadedScene {
        gaussians,
        cameras,
        renormalized_quats: renormalized,
    })
}

pub(crate) fn parse_fields(line: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != expected {
        return Err(format!("expected {expected} fields, got {}", fields.len()));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| format!("bad decimal `{f}`"))
        })
        .collect()
}

/// Write a binary `P6` PPM, maxval 255, channels quantized by
/// round(clamp(v,0,1)·255).
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(img.pixels.len() * 3 + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for px in &img.pixels {
        for c in px {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let pstr = path.display().to_string();
    let err = |msg: &str| IoError::Parse {
        path: pstr.clone(),
        line: 1,
        msg: msg.into(),
    };
    // Header: three whitespace-separated tokens (magic, dims, maxval), then
    // a single whitespace byte before the raster.
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, IoError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Parse {
                path: pstr.clone(),
                line: 1,
                msg: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(err("not a P6 PPM"));
    }
    let width: u32 = token()?.parse().map_err(|_| err("bad width"))?;
    let height: u32 = token()?.parse().map_err(|_| err("bad height"))?;
    if token()? != "255" {
        return Err(err("expected maxval 255"));
    }
    pos += 1; // single whitespace after maxval
    let n = (width * height) as usize;
    if bytes.len() < pos + 3 * n {
        return Err(err("truncated pixel data"));
    }
    let pixels = (0..n)
        .map(|i| {
            let b = &bytes[pos + 3 * i..pos + 3 * i + 3];
            [
                b[0] as f64 / 255.0,
                b[1] as f64 / 255.0,
                b[2] as f64 / 255.0,
            ]
        })
        .collect();
    Ok(Image {
        width,
        height,
        pixels,
        depth: None,
    })
}

/// Text depth grid: `PF` header, `width height`, then row-major decimals.
pub fn write_depth(depth: &[f64], width: u32, height: u32, path: &Path) -> Result<()> {
    assert_eq!(depth.len(), (width * height) as usize);
    let mut out = String::new();
    let _ = writeln!(out, "PF\n{width} {height}");
    for row in depth.chunks(width as usize) {
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<(Vec<f64>, u32, u32)> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut tokens = text.split_whitespace();
    let err = |msg: &str| IoError::Parse {
        path: pstr.clone(),
        line: 1,
        msg: msg.into(),
    };
    if tokens.next() != Some("PF") {
        return Err(err("not a PF depth grid"));
    }
    let width: u32 = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad width"))?;
    let height: u32 = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad height"))?;
    let n = (width * height) as usize;
    let values: Vec<f64> = tokens
        .take(n)
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err("bad depth value"))?;
    if values.len() != n {
        return Err(err("truncated depth grid"));
    }
    Ok((values, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic, CameraLayout};
    use approx::assert_relative_eq;

    #[test]
    fn scene_roundtrip_is_exact() {
        let (gaussians, cameras) = make_synthetic(7, 12, 4, CameraLayout::Orbit).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.txt");
        save_scene(&gaussians, &cameras, &path).unwrap();
        let loaded = load_scene(&path).unwrap();
        assert_eq!(loaded.renormalized_quats, 0);
        assert_eq!(loaded.gaussians.len(), gaussians.len());
        for (a, b) in gaussians.iter().zip(&loaded.gaussians) {
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.log_scale, b.log_scale);
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.opacity_logit, b.opacity_logit);
            assert_eq!(a.color, b.color);
        }
        for (a, b) in cameras.iter().zip(&loaded.cameras) {
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.translation, b.translation);
            assert_eq!((a.fx, a.fy, a.cx, a.cy), (b.fx, b.fy, b.cx, b.cy));
            assert_eq!((a.width, a.height), (b.width, b.height));
            assert_eq!((a.znear, a.zfar), (b.znear, b.zfar));
        }
        // Save → load → save reproduces the file byte for byte.
        let path2 = dir.path().join("scene2.txt");
        save_scene(&loaded.gaussians, &loaded.cameras, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn load_renormalizes_and_counts_bad_quats() {
        let (mut gaussians, cameras) = make_synthetic(7, 3, 4, CameraLayout::Orbit).unwrap();
        gaussians[1].rotation = [2.0, 0.0, 0.0, 0.0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.txt");
        save_scene(&gaussians, &cameras, &path).unwrap();
        let loaded = load_scene(&path).unwrap();
        assert_eq!(loaded.renormalized_quats, 1);
        assert_relative_eq!(loaded.gaussians[1].rotation[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn parse_error_reports_line_and_field_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "splatscene 1\ngaussians 1\n0 0 0\n").unwrap();
        match load_scene(&path) {
            Err(IoError::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(msg, "expected 14 fields, got 3");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "splatscene 2\n").unwrap();
        assert!(matches!(load_scene(&path), Err(IoError::Parse { line: 1, .. })));
    }

    #[test]
    fn ppm_roundtrip_quantized() {
        let img = Image {
            width: 3,
            height: 2,
            pixels: vec![
                [0.0, 0.5, 1.0],
                [1.5, -0.25, 0.25],
                [0.1, 0.2, 0.3],
                [0.9, 0.8, 0.7],
                [0.333, 0.667, 0.999],
                [1.0, 0.0, 1.0],
            ],
            depth: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            for c in 0..3 {
                let expect = (a[c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                assert_relative_eq!(b[c], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn depth_roundtrip_is_exact() {
        let depth: Vec<f64> = (0..12).map(|i| (i as f64).exp() / 7.0).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        write_depth(&depth, 4, 3, &path).unwrap();
        let (back, w, h) = read_depth(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, depth);
    }

    #[test]
    fn formatted_decimals_roundtrip_exactly() {
        for v in [
            0.1,
            std::f64::consts::PI,
            -1.0 / 3.0,
            1e-300,
            -2.5e117,
            f64::MIN_POSITIVE,
        ] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
