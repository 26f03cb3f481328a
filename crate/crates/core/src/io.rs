//! ASCII PLY point files and the `SFC1` descriptor sidecar.
//!
//! Sidecar layout: magic `SFC1`, `u32` N, `u32` C (little-endian), then
//! `N·C` little-endian `f32` row-major. Row `i` belongs to vertex `i` of the
//! companion PLY.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Point3;

use crate::cloud::{FeatureMatrix, SemanticCloud, Space};
use crate::error::{Error, Result};

pub const FEAT_MAGIC: &[u8; 4] = b"SFC1";

/// Serializes points as ASCII PLY with `float x y z` and optional `uchar` RGB.
pub fn ply_to_string(points: &[Point3<f64>], colors: Option<&[[u8; 3]]>) -> String {
    let mut s = String::with_capacity(points.len() * 32 + 128);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
        if let Some(c) = colors {
            let [r, g, b] = c[i];
            let _ = write!(s, " {r} {g} {b}");
        }
        s.push('\n');
    }
    s
}

pub fn write_ply(
    path: impl AsRef<Path>,
    points: &[Point3<f64>],
    colors: Option<&[[u8; 3]]>,
) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::Dimension(format!(
                "{} colors for {} points",
                c.len(),
                points.len()
            )));
        }
    }
    let path = path.as_ref();
    fs::write(path, ply_to_string(points, colors)).map_err(|e| Error::io(path, e))
}

/// Parses an ASCII PLY vertex list, returning `x y z` of every vertex.
pub fn parse_ply(text: &str) -> Result<Vec<Point3<f64>>> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let mut next_line = |offset: &mut u64| -> Option<(u64, &str)> {
        let l = lines.next()?;
        let at = *offset;
        *offset += l.len() as u64;
        Some((at, l.trim_end_matches(['\n', '\r'])))
    };

    match next_line(&mut offset) {
        Some((_, "ply")) => {}
        _ => return Err(Error::format(0, "missing `ply` magic line")),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    loop {
        let (at, line) =
            next_line(&mut offset).ok_or_else(|| Error::format(offset, "unterminated header"))?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(Error::format(at, "only ascii PLY is supported"));
                }
            }
            Some("element") => {
                let name = tok.next().unwrap_or("");
                in_vertex = name == "vertex";
                if in_vertex {
                    let n = tok
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| Error::format(at, "bad vertex count"))?;
                    vertex_count = Some(n);
                }
            }
            Some("property") if in_vertex => {
                let name = tok
                    .last()
                    .ok_or_else(|| Error::format(at, "bad property line"))?;
                props.push(name.to_string());
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let n = vertex_count.ok_or_else(|| Error::format(offset, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::format(0, format!("missing vertex property `{name}`")))
    };
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let (at, line) =
            next_line(&mut offset).ok_or_else(|| Error::format(offset, "truncated vertex list"))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < props.len() {
            return Err(Error::format(at, "vertex line has too few values"));
        }
        let get = |i: usize| {
            vals[i]
                .parse::<f32>()
                .map(f64::from)
                .map_err(|_| Error::format(at, format!("bad number `{}`", vals[i])))
        };
        points.push(Point3::new(get(ix)?, get(iy)?, get(iz)?));
    }
    Ok(points)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<Point3<f64>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text)
}

pub fn feat_to_bytes(features: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + features.as_slice().len() * 4);
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for v in features.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn feat_from_bytes(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != FEAT_MAGIC {
        return Err(Error::format(0, "bad magic, expected SFC1"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(12))
        .ok_or_else(|| Error::format(4, "dimension overflow"))?;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need) as u64,
            format!(
                "expected {need} bytes for {n}x{c} descriptors, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    FeatureMatrix::from_row_major(n, c, data)
}

pub fn write_feat(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, feat_to_bytes(features)).map_err(|e| Error::io(path, e))
}

pub fn read_feat(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    feat_from_bytes(&bytes)
}

/// Sidecar path for a PLY file: `foo.ply` → `foo.feat`.
pub fn feat_path(ply: &Path) -> PathBuf {
    ply.with_extension("feat")
}

/// Loads a PLY and, when present, its `.feat` sidecar.
pub fn read_cloud(ply: impl AsRef<Path>, space: Space) -> Result<SemanticCloud> {
    let ply = ply.as_ref();
    let points = read_ply(ply)?;
    let fp = feat_path(ply);
    let descriptors = if fp.exists() {
        Some(read_feat(&fp)?)
    } else {
        None
    };
    SemanticCloud::new(points, descriptors, space)
}

/// Writes a PLY and, when the cloud has descriptors, its `.feat` sidecar.
pub fn write_cloud(ply: impl AsRef<Path>, cloud: &SemanticCloud) -> Result<()> {
    let ply = ply.as_ref();
    write_ply(ply, cloud.points(), None)?;
    if let Some(d) = cloud.descriptors() {
        write_feat(feat_path(ply), d)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip_at_f32_precision() {
        let pts = vec![
            Point3::new(0.125, -3.5, 1e-3),
            Point3::new(1.0 / 3.0, 2.0, 0.0),
        ];
        let back = parse_ply(&ply_to_string(&pts, None)).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            assert!((a - b).norm() < 1e-7);
        }
        // values representable in f32 come back exactly
        assert_eq!((back[0].x, back[0].y), (0.125, -3.5));
    }

    #[test]
    fn ply_with_colors_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n\
                    1 2 3 255 0 0\n4 5 6 0 255 0\n";
        let p = parse_ply(text).unwrap();
        assert_eq!(p[1], Point3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn ply_truncated_reports_offset() {
        let pts = vec![Point3::new(1.0, 2.0, 3.0); 3];
        let s = ply_to_string(&pts, None);
        let cut = &s[..s.len() - 7];
        match parse_ply(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn feat_header_layout() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.5]]).unwrap();
        let b = feat_to_bytes(&f);
        assert_eq!(&b[..4], b"SFC1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[24..28].try_into().unwrap()), 4.5);
        assert_eq!(feat_from_bytes(&b).unwrap(), f);
    }

    #[test]
    fn feat_corruption() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut b = feat_to_bytes(&f);
        b.pop();
        assert!(matches!(feat_from_bytes(&b), Err(Error::Format { .. })));
        let mut b = feat_to_bytes(&f);
        b[0] = b'X';
        assert!(matches!(
            feat_from_bytes(&b),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
