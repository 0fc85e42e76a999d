//! Camera and pair text files in the common MVS layout.
//!
//! Camera file:
//! ```text
//! extrinsic
//! r00 r01 r02 t0
//! r10 r11 r12 t1
//! r20 r21 r22 t2
//! 0 0 0 1
//!
//! intrinsic
//! fx s cx
//! 0 fy cy
//! 0 0 1
//!
//! depth_min depth_interval [hypotheses [depth_max]]
//! ```
//! With only two fields `depth_max = depth_min + interval · (192 − 1)`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Camera;

/// Hypothesis count assumed when a camera file omits it.
pub const DEFAULT_FILE_HYPOTHESES: usize = 192;

/// A camera together with the depth interval recorded next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRecord {
    pub camera: Camera,
    pub depth_interval: f64,
}

struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Self { path, iter: text.lines().enumerate(), last: 0 }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(self.path, line, msg)
    }

    /// Next non-blank line with its 1-based number.
    fn next_nonblank(&mut self, what: &str) -> Result<(usize, &'a str)> {
        for (i, l) in self.iter.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Ok((i + 1, l.trim()));
            }
        }
        Err(self.err(self.last + 1, format!("unexpected end of file, expected {what}")))
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        let (n, l) = self.next_nonblank(kw)?;
        if l != kw {
            return Err(self.err(n, format!("expected '{kw}', found '{l}'")));
        }
        Ok(())
    }

    fn numbers(&mut self, what: &str, counts: &[usize]) -> Result<(usize, Vec<f64>)> {
        let (n, l) = self.next_nonblank(what)?;
        let vals = l
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| self.err(n, format!("bad number '{tok}' in {what}"))))
            .collect::<Result<Vec<_>>>()?;
        if !counts.contains(&vals.len()) {
            return Err(self.err(n, format!("{what}: expected {counts:?} values, found {}", vals.len())));
        }
        if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
            return Err(self.err(n, format!("{what}: non-finite value {v}")));
        }
        Ok((n, vals))
    }
}

/// Parse camera-file text; `path` is only used in diagnostics.
pub fn parse_camera(text: &str, path: &Path) -> Result<CameraRecord> {
    let mut lines = Lines::new(path, text);
    lines.keyword("extrinsic")?;
    let mut ext = [[0.0; 4]; 4];
    let mut ext_lines = [0; 4];
    for (row, e) in ext.iter_mut().enumerate() {
        let (n, v) = lines.numbers("extrinsic row", &[4])?;
        e.copy_from_slice(&v);
        ext_lines[row] = n;
    }
    if ext[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(lines.err(ext_lines[3], "last extrinsic row must be 0 0 0 1"));
    }
    lines.keyword("intrinsic")?;
    let mut k = Matrix3::zeros();
    let mut k_line = 0;
    for row in 0..3 {
        let (n, v) = lines.numbers("intrinsic row", &[3])?;
        for c in 0..3 {
            k[(row, c)] = v[c];
        }
        k_line = n;
    }
    let (dn, d) = lines.numbers("depth line", &[2, 3, 4])?;
    let (depth_min, interval) = (d[0], d[1]);
    let depth_max = match d.len() {
        4 => d[3],
        3 => depth_min + interval * (d[2] - 1.0),
        _ => depth_min + interval * (DEFAULT_FILE_HYPOTHESES - 1) as f64,
    };
    if d.len() >= 3 && !(d[2] >= 2.0 && d[2].fract() == 0.0) {
        return Err(lines.err(dn, format!("hypothesis count must be an integer ≥ 2, got {}", d[2])));
    }
    if let Ok((n, l)) = lines.next_nonblank("end of file") {
        return Err(lines.err(n, format!("trailing content '{l}'")));
    }
    let r = Matrix3::from_fn(|i, j| ext[i][j]);
    let t = Vector3::new(ext[0][3], ext[1][3], ext[2][3]);
    let camera = Camera::new(k, r, t, depth_min, depth_max).map_err(|e| {
        let line = match &e {
            Error::InvalidCamera(m) if m.contains("depth range") => dn,
            Error::InvalidCamera(m) if m.contains("rotation") || m.contains("translation") => ext_lines[0],
            _ => k_line,
        };
        lines.err(line, e.to_string())
    })?;
    Ok(CameraRecord { camera, depth_interval: interval })
}

pub fn read_camera_file(path: &Path) -> Result<CameraRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_camera(&text, path)
}

/// Format a camera in the four-field depth variant, so that the file records
/// `depth_max` exactly.
pub fn format_camera(cam: &Camera, hypotheses: usize) -> String {
    let interval = (cam.depth_max - cam.depth_min) / (hypotheses.max(2) - 1) as f64;
    let mut s = String::from("extrinsic\n");
    for i in 0..3 {
        s += &format!("{} {} {} {}\n", cam.r[(i, 0)], cam.r[(i, 1)], cam.r[(i, 2)], cam.t[i]);
    }
    s += "0 0 0 1\n\nintrinsic\n";
    for i in 0..3 {
        s += &format!("{} {} {}\n", cam.k[(i, 0)], cam.k[(i, 1)], cam.k[(i, 2)]);
    }
    s += &format!("\n{} {} {} {}\n", cam.depth_min, interval, hypotheses.max(2), cam.depth_max);
    s
}

pub fn write_camera_file(path: &Path, cam: &Camera, hypotheses: usize) -> Result<()> {
    std::fs::write(path, format_camera(cam, hypotheses)).map_err(|e| Error::io(path, e))
}

/// Source views of one reference view, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEntry {
    pub reference: usize,
    pub sources: Vec<(usize, f64)>,
}

/// Per-reference ordered source lists.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScenePairing {
    pub entries: Vec<PairEntry>,
}

impl ScenePairing {
    pub fn view_count(&self) -> usize {
        self.entries.len()
    }

    pub fn sources(&self, reference: usize) -> Result<&[(usize, f64)]> {
        self.entries
            .iter()
            .find(|e| e.reference == reference)
            .map(|e| e.sources.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("pair file has no entry for view {reference}")))
    }

    /// Reference id followed by its first `n_views − 1` sources.
    pub fn select(&self, reference: usize, n_views: usize) -> Result<Vec<usize>> {
        let src = self.sources(reference)?;
        if n_views < 1 || src.len() < n_views - 1 {
            return Err(Error::InvalidInput(format!(
                "view {reference} has {} sources, {} needed",
                src.len(),
                n_views.saturating_sub(1)
            )));
        }
        Ok(std::iter::once(reference).chain(src.iter().take(n_views - 1).map(|s| s.0)).collect())
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let v = self.entries.len();
        for e in &self.entries {
            if e.reference >= v {
                return Err(Error::parse(path, 0, format!("view id {} out of range (V = {v})", e.reference)));
            }
            for &(s, _) in &e.sources {
                if s >= v {
                    return Err(Error::parse(path, 0, format!("source id {s} of view {} out of range", e.reference)));
                }
                if s == e.reference {
                    return Err(Error::parse(path, 0, format!("view {s} lists itself as a source")));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_pair(text: &str, path: &Path) -> Result<ScenePairing> {
    let mut lines = Lines::new(path, text);
    let (n, l) = lines.next_nonblank("view count")?;
    let count: usize = l.parse().map_err(|_| lines.err(n, format!("bad view count '{l}'")))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = lines.next_nonblank("view id")?;
        let reference: usize = l.parse().map_err(|_| lines.err(n, format!("bad view id '{l}'")))?;
        let (n, l) = lines.next_nonblank("source list")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let s: usize = toks[0].parse().map_err(|_| lines.err(n, format!("bad source count '{}'", toks[0])))?;
        if toks.len() != 1 + 2 * s {
            return Err(lines.err(n, format!("expected {s} (id, score) pairs, found {} tokens", toks.len() - 1)));
        }
        let mut sources = Vec::with_capacity(s);
        for p in toks[1..].chunks(2) {
            let id: usize = p[0].parse().map_err(|_| lines.err(n, format!("bad source id '{}'", p[0])))?;
            let score: f64 = p[1].parse().map_err(|_| lines.err(n, format!("bad score '{}'", p[1])))?;
            if id == reference {
                return Err(lines.err(n, format!("view {id} lists itself as a source")));
            }
            sources.push((id, score));
        }
        if entries.iter().any(|e: &PairEntry| e.reference == reference) {
            return Err(lines.err(n, format!("duplicate entry for view {reference}")));
        }
        entries.push(PairEntry { reference, sources });
    }
    let pairing = ScenePairing { entries };
    pairing.validate(path)?;
    Ok(pairing)
}

pub fn read_pair_file(path: &Path) -> Result<ScenePairing> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pair(&text, path)
}

pub fn format_pair(p: &ScenePairing) -> String {
    let mut s = format!("{}\n", p.entries.len());
    for e in &p.entries {
        s += &format!("{}\n{}", e.reference, e.sources.len());
        for (id, score) in &e.sources {
            s += &format!(" {id} {score}");
        }
        s += "\n";
    }
    s
}

pub fn write_pair_file(path: &Path, p: &ScenePairing) -> Result<()> {
    std::fs::write(path, format_pair(p)).map_err(|e| Error::io(path, e))
}
