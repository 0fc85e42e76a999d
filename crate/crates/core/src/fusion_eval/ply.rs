//! PLY point clouds (`x y z [red green blue]`), ASCII or binary little-endian.

use std::io::Write;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = Vec::new();
    let _ = write!(out, "ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.points.len());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let c = cloud.colors.as_ref().map(|c| c[i]);
        match format {
            PlyFormat::Ascii => {
                let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
                if let Some(c) = c {
                    let _ = write!(out, " {} {} {}", c[0], c[1], c[2]);
                }
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = c {
                    out.extend_from_slice(&c);
                }
            }
        }
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    std::fs::write(path, encode_ply(cloud, format)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Read the vertex element of a PLY file. The vertex element must come
/// first; later elements are ignored.
pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let bad = |line: usize, msg: String| Error::parse(path, line, msg);
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad(0, "missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad(0, "header is not UTF-8".into()))?;
    let body = &bytes[end + 11..];
    let mut lines = header.lines().enumerate();
    if lines.next().map(|l| l.1.trim()) != Some("ply") {
        return Err(bad(1, "missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    for (i, l) in lines {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(bad(i + 1, format!("unsupported format '{other}'"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if count.is_none() && *name != "vertex" {
                    return Err(bad(i + 1, "vertex element must come first".into()));
                }
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| bad(i + 1, format!("bad count '{n}'")))?);
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad(i + 1, "list properties on vertices unsupported".into())),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(i + 1, format!("unknown type '{ty}'")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(bad(i + 1, format!("unrecognised header line '{l}'"))),
        }
    }
    let format = format.ok_or_else(|| bad(0, "missing format line".into()))?;
    let count = count.ok_or_else(|| bad(0, "missing vertex element".into()))?;
    let find = |n: &str| props.iter().position(|p| p.0 == n);
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad(0, "vertex element needs x, y, z".into())),
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| bad(0, "body is not UTF-8".into()))?;
            let header_lines = header.lines().count() + 1;
            for (i, l) in text.lines().filter(|l| !l.trim().is_empty()).take(count).enumerate() {
                let vals = l
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(header_lines + i + 1, format!("bad vertex '{l}'")))?;
                if vals.len() < props.len() {
                    return Err(bad(header_lines + i + 1, "too few vertex fields".into()));
                }
                rows.push(vals);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = props.iter().map(|p| p.1.size()).sum();
            if body.len() < stride * count {
                return Err(bad(0, format!("expected {} vertex bytes, found {}", stride * count, body.len())));
            }
            for v in body.chunks_exact(stride).take(count) {
                let mut off = 0;
                let row = props
                    .iter()
                    .map(|p| {
                        let x = p.1.read_le(&v[off..]);
                        off += p.1.size();
                        x
                    })
                    .collect();
                rows.push(row);
            }
        }
    }
    if rows.len() != count {
        return Err(bad(0, format!("expected {count} vertices, found {}", rows.len())));
    }
    let points = rows.iter().map(|r| [r[xi], r[yi], r[zi]]).collect();
    let colors = rgb.map(|c| rows.iter().map(|r| c.map(|k| r[k].clamp(0.0, 255.0) as u8)).collect());
    let cloud = PointCloud { points, colors };
    cloud.validate()?;
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes, path)
}
