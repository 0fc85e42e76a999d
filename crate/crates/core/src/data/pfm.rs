//! Single-channel PFM maps (`Pf`), written little-endian, bottom-up.

use std::path::Path;

use mvs_autograd::Tensor;

use crate::error::{Error, Result};

/// Encode an `[H, W]` map.
pub fn encode_pfm(map: &Tensor) -> Vec<u8> {
    let (h, w) = (map.dim(0), map.dim(1));
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map.data()[y * w + x] as f32).to_le_bytes());
        }
    }
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().filter(|s| !s.is_empty())
}

/// Decode a `Pf` map into `[H, W]`, top row first. Either byte order is
/// accepted, as given by the sign of the scale.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::parse(path, 0, msg.to_string());
    let mut pos = 0;
    match header_token(bytes, &mut pos) {
        Some("Pf") => {}
        Some("PF") => return Err(bad("three-channel PFM where a depth map was expected")),
        _ => return Err(bad("missing PFM magic")),
    }
    let mut num = |what: &str| -> Result<f64> {
        header_token(bytes, &mut pos)
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| bad(&format!("bad PFM {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let scale = num("scale")?;
    if !(w >= 1.0 && h >= 1.0 && w.fract() == 0.0 && h.fract() == 0.0) || scale == 0.0 {
        return Err(bad("bad PFM header values"));
    }
    let (w, h) = (w as usize, h as usize);
    pos += 1;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != 4 * w * h {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * w * h, body.len())));
    }
    let little = scale < 0.0;
    let mut out = Tensor::zeros(&[h, w]);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (h - 1 - i / w, i % w);
        out.data_mut()[row * w + x] = v as f64;
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pfm(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_orientation() {
        let m = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5);
        let bytes = encode_pfm(&m);
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        // First stored scanline is the bottom row.
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first as f64, m.at(&[2, 0]));
        assert_eq!(decode_pfm(&bytes, Path::new("d.pfm")).unwrap(), m);
        assert!(decode_pfm(&bytes[..bytes.len() - 1], Path::new("d.pfm")).is_err());
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n0000", Path::new("d.pfm")).is_err());
    }

    #[test]
    fn reads_big_endian() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes, Path::new("d")).unwrap().data(), &[2.5]);
    }
}
