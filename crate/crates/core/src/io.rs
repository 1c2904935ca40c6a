//! On-disk formats: primitive checkpoints and point clouds as binary
//! little-endian PLY, float maps, and 8-bit PNG images.
//!
//! Checkpoint PLY: one `vertex` per primitive with `double` properties
//! `x y z quat_w quat_x quat_y quat_z raw_scale_1..3 raw_sign_1..3
//! raw_opacity sh_0..sh_47`, where `sh_{3k+c}` is coefficient `k` of
//! channel `c`.
//!
//! Float map: ASCII magic `QGF1` (one channel) or `QGF3` (three
//! channels), then `u32` height and `u32` width, then `f32` samples in
//! row-major order with channels interleaved. All little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{QgsError, Result};
use crate::maps::Map;
use crate::primitive::QuadricPrimitive;
use crate::sh::MAX_SH_COEFFS;

fn checkpoint_properties() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "quat_w", "quat_x", "quat_y", "quat_z"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((1..=3).map(|k| format!("raw_scale_{k}")));
    names.extend((1..=3).map(|k| format!("raw_sign_{k}")));
    names.push("raw_opacity".into());
    names.extend((0..3 * MAX_SH_COEFFS).map(|k| format!("sh_{k}")));
    names
}

fn primitive_row(p: &QuadricPrimitive) -> Vec<f64> {
    let mut row = vec![p.center.x, p.center.y, p.center.z];
    row.extend_from_slice(&p.rotation);
    row.extend_from_slice(p.raw_scales.as_slice());
    row.extend_from_slice(p.raw_signs.as_slice());
    row.push(p.raw_opacity);
    for coeff in &p.sh {
        row.extend_from_slice(coeff);
    }
    row
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

/// The vertex element of a binary little-endian PLY file.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyVertices {
    pub names: Vec<String>,
    /// Whether each property has an integer type.
    pub integer: Vec<bool>,
    /// Row-major, `names.len()` values per vertex.
    pub values: Vec<f64>,
}

impl PlyVertices {
    pub fn len(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.values.len() / self.names.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.column(name)
            .ok_or_else(|| QgsError::Format(format!("PLY vertex element lacks property `{name}`")))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.names.len() + col]
    }
}

/// Reads the `vertex` element of a binary little-endian PLY. Other
/// elements must come after it and are ignored; list properties are
/// rejected.
pub fn read_ply_vertices(path: &Path) -> Result<PlyVertices> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let read_line = |r: &mut BufReader<File>, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(QgsError::Format("PLY header ended unexpectedly".into()));
        }
        Ok(())
    };
    read_line(&mut r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(QgsError::Format("missing `ply` magic".into()));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<(ScalarType, String)> = Vec::new();
    loop {
        read_line(&mut r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(QgsError::Format(format!("unsupported PLY format `{fmt}`")));
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    if vertex_count.is_some() || !props.is_empty() {
                        return Err(QgsError::Format("duplicate vertex element".into()));
                    }
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| QgsError::Format(format!("bad vertex count `{count}`")))?,
                    );
                } else if vertex_count.is_none() {
                    return Err(QgsError::Format("vertex element must come first".into()));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(QgsError::Format("list properties on vertices are not supported".into()));
            }
            ["property", ty, name] if in_vertex => {
                let t = ScalarType::parse(ty).ok_or_else(|| QgsError::Format(format!("unknown PLY type `{ty}`")))?;
                props.push((t, name.to_string()));
            }
            ["property", ..] => {}
            _ => return Err(QgsError::Format(format!("unexpected PLY header line `{}`", line.trim_end()))),
        }
    }
    let n = vertex_count.ok_or_else(|| QgsError::Format("PLY has no vertex element".into()))?;
    let stride: usize = props.iter().map(|(t, _)| t.size()).sum();
    let mut buf = vec![0u8; n * stride];
    r.read_exact(&mut buf)
        .map_err(|e| QgsError::Format(format!("PLY body shorter than {n} vertices: {e}")))?;
    let mut values = Vec::with_capacity(n * props.len());
    for row in buf.chunks_exact(stride.max(1)).take(n) {
        let mut off = 0;
        for (t, _) in &props {
            values.push(t.decode(&row[off..]));
            off += t.size();
        }
    }
    Ok(PlyVertices {
        integer: props.iter().map(|(t, _)| !matches!(t, ScalarType::F32 | ScalarType::F64)).collect(),
        names: props.into_iter().map(|(_, n)| n).collect(),
        values,
    })
}

fn write_double_ply(path: &Path, names: &[String], rows: impl Iterator<Item = Vec<f64>>, count: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {count}")?;
    for n in names {
        writeln!(w, "property double {n}")?;
    }
    writeln!(w, "end_header")?;
    for row in rows {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint(path: &Path, primitives: &[QuadricPrimitive]) -> Result<()> {
    write_double_ply(path, &checkpoint_properties(), primitives.iter().map(primitive_row), primitives.len())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<QuadricPrimitive>> {
    let v = read_ply_vertices(path)?;
    let cols = checkpoint_properties()
        .iter()
        .map(|n| v.require(n))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(v.len());
    for row in 0..v.len() {
        let f: Vec<f64> = cols.iter().map(|&c| v.get(row, c)).collect();
        let mut p = QuadricPrimitive::new(Vector3::new(f[0], f[1], f[2]));
        p.rotation = [f[3], f[4], f[5], f[6]];
        p.raw_scales = Vector3::new(f[7], f[8], f[9]);
        p.raw_signs = Vector3::new(f[10], f[11], f[12]);
        p.raw_opacity = f[13];
        for (k, coeff) in p.sh.iter_mut().enumerate() {
            coeff.copy_from_slice(&f[14 + 3 * k..17 + 3 * k]);
        }
        out.push(p);
    }
    Ok(out)
}

/// A seed point with an optional color in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    pub color: Option<[f64; 3]>,
}

/// Reads `x y z` and, if present, `red green blue` (integer types are
/// scaled from `[0, 255]`).
pub fn read_points(path: &Path) -> Result<Vec<SeedPoint>> {
    let v = read_ply_vertices(path)?;
    let xyz = [v.require("x")?, v.require("y")?, v.require("z")?];
    let rgb = match (v.column("red"), v.column("green"), v.column("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    // Floating-point colors are taken as already normalized.
    let scale = match rgb {
        Some(c) if v.integer[c[0]] => 1.0 / 255.0,
        _ => 1.0,
    };
    Ok((0..v.len())
        .map(|row| SeedPoint {
            position: Vector3::new(v.get(row, xyz[0]), v.get(row, xyz[1]), v.get(row, xyz[2])),
            color: rgb.map(|c| [0, 1, 2].map(|k| (v.get(row, c[k]) * scale).clamp(0.0, 1.0))),
        })
        .collect())
}

/// Writes points as `double x y z` plus `uchar red green blue` when colored.
pub fn write_points(path: &Path, points: &[SeedPoint]) -> Result<()> {
    let colored = points.iter().all(|p| p.color.is_some()) && !points.is_empty();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    for n in ["x", "y", "z"] {
        writeln!(w, "property double {n}")?;
    }
    if colored {
        for n in ["red", "green", "blue"] {
            writeln!(w, "property uchar {n}")?;
        }
    }
    writeln!(w, "end_header")?;
    for p in points {
        for v in p.position.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        if let (true, Some(c)) = (colored, p.color) {
            w.write_all(&c.map(to_u8))?;
        }
    }
    w.flush()?;
    Ok(())
}

// ----------------------------------------------------------------------
// Float maps

pub fn write_float_map(path: &Path, map: &Map) -> Result<()> {
    let magic: &[u8; 4] = match map.channels {
        1 => b"QGF1",
        3 => b"QGF3",
        c => {
            return Err(QgsError::DimensionMismatch {
                expected: "1 or 3 channels".into(),
                actual: format!("{c} channels"),
            })
        }
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&(map.height as u32).to_le_bytes())?;
    w.write_all(&(map.width as u32).to_le_bytes())?;
    for v in &map.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_float_map(path: &Path) -> Result<Map> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| QgsError::Format(format!("{} is too short for a float map", path.display())))?;
    let channels = match &head[0..4] {
        b"QGF1" => 1,
        b"QGF3" => 3,
        m => return Err(QgsError::Format(format!("bad float map magic {m:?}"))),
    };
    let h = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let n = w * h * channels;
    if body.len() != 4 * n {
        return Err(QgsError::Format(format!(
            "float map body has {} bytes, expected {}",
            body.len(),
            4 * n
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Map::from_data(w, h, channels, data)
}

// ----------------------------------------------------------------------
// PNG

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel map in `[0, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, map: &Map) -> Result<()> {
    let bytes: Vec<u8> = map.data.iter().map(|v| to_u8(*v)).collect();
    let (w, h) = (map.width as u32, map.height as u32);
    match map.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
        3 => image::RgbImage::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
        c => {
            return Err(QgsError::DimensionMismatch {
                expected: "1 or 3 channels".into(),
                actual: format!("{c} channels"),
            })
        }
    }
    Ok(())
}

/// Reads any PNG as a 3-channel map in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Map> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Map::from_data(w as usize, h as usize, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let mut a = QuadricPrimitive::new(Vector3::new(0.1, -2.0, 3.5));
        a.rotation = [0.9, 0.1, -0.2, 0.3];
        a.raw_signs.y = -1.7;
        a.raw_opacity = -0.123456789012345;
        a.sh[15][2] = 1e-9;
        let b = QuadricPrimitive::new(Vector3::zeros());
        write_checkpoint(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn float_map_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.f32");
        let m = Map::from_data(3, 2, 1, vec![0.5, 1.0, 2.0, -1.0, 0.0, 3.25]).unwrap();
        write_float_map(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"QGF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + 6 * 4);
        assert_eq!(read_float_map(&path).unwrap(), m);
        std::fs::write(&path, b"QGF9\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_float_map(&path).is_err());
    }

    #[test]
    fn png_roundtrip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let m = Map::from_data(2, 1, 3, vec![0.0, 0.5, 1.0, 0.2, 0.7, 1.5]).unwrap();
        write_png(&path, &m).unwrap();
        let back = read_png(&path).unwrap();
        for (a, b) in m.data.iter().zip(&back.data) {
            assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn seed_points_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let pts = vec![
            SeedPoint {
                position: Vector3::new(1.0, 2.0, 3.0),
                color: Some([1.0, 0.0, 0.2]),
            },
            SeedPoint {
                position: Vector3::new(-1.0, 0.5, 0.0),
                color: Some([0.0, 0.0, 0.0]),
            },
        ];
        write_points(&path, &pts).unwrap();
        let back = read_points(&path).unwrap();
        assert_eq!(back[0].position, pts[0].position);
        let c = back[0].color.unwrap();
        assert!((c[2] - 51.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_ascii_ply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        std::fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n").unwrap();
        assert!(read_ply_vertices(&path).is_err());
    }
}
