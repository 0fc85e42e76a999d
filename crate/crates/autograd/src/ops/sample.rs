//! Bilinear and trilinear sampling with zero padding.
//!
//! Pixel centres sit at integer coordinates with the origin at the centre of
//! the top-left pixel. Coordinates are `(x, y)` for images (x along width) and
//! `(x, y, z)` for volumes (z along the depth axis). Neighbours outside the
//! grid contribute zero. Non-finite coordinates sample zero and receive no
//! gradient.

use crate::graph::Var;
use crate::par;
use crate::tensor::Tensor;

const POINT_BLOCK: usize = 1024;

/// Corner table entry: flat offset inside one channel plane (or `usize::MAX`
/// when outside) and the interpolation weight.
type Corner = (usize, f64);

fn corners_2d(x: f64, y: f64, h: usize, w: usize) -> [Corner; 4] {
    let mut out = [(usize::MAX, 0.0); 4];
    if !(x.is_finite() && y.is_finite()) {
        return out;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    for (k, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let (cx, cy) = (x0 + dx, y0 + dy);
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            out[k] = (cy as usize * w + cx as usize, weights[k]);
        }
    }
    out
}

fn corners_3d(x: f64, y: f64, z: f64, d: usize, h: usize, w: usize) -> [Corner; 8] {
    let mut out = [(usize::MAX, 0.0); 8];
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return out;
    }
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let (x0, y0, z0) = (x0 as i64, y0 as i64, z0 as i64);
    for k in 0..8 {
        let (dx, dy, dz) = ((k & 1) as i64, ((k >> 1) & 1) as i64, ((k >> 2) & 1) as i64);
        let wgt = (if dx == 1 { fx } else { 1.0 - fx })
            * (if dy == 1 { fy } else { 1.0 - fy })
            * (if dz == 1 { fz } else { 1.0 - fz });
        let (cx, cy, cz) = (x0 + dx, y0 + dy, z0 + dz);
        if cx >= 0 && cy >= 0 && cz >= 0 && (cx as usize) < w && (cy as usize) < h && (cz as usize) < d {
            out[k] = ((cz as usize * h + cy as usize) * w + cx as usize, wgt);
        }
    }
    out
}

/// Bilinear sampling of a `[C, H, W]` tensor at `coords` (`[P, 2]`), no tape.
pub fn bilinear_sample(img: &Tensor, coords: &Tensor) -> Tensor {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let p = coords.dim(0);
    let table: Vec<[Corner; 4]> = (0..p)
        .map(|i| corners_2d(coords.data()[2 * i], coords.data()[2 * i + 1], h, w))
        .collect();
    gather(img.data(), c, h * w, &table)
}

fn gather<const N: usize>(data: &[f64], channels: usize, plane: usize, table: &[[Corner; N]]) -> Tensor {
    let p = table.len();
    let mut out = vec![0.0; channels * p];
    par::for_each_chunk_mut(&mut out, p.max(1), |ch, row| {
        let src = &data[ch * plane..(ch + 1) * plane];
        for (o, corners) in row.iter_mut().zip(table) {
            let mut acc = 0.0;
            for &(off, wgt) in corners {
                if off != usize::MAX {
                    acc += wgt * src[off];
                }
            }
            *o = acc;
        }
    });
    Tensor::new(&[channels, p], out)
}

fn scatter<const N: usize>(g: &Tensor, channels: usize, plane: usize, table: &[[Corner; N]]) -> Vec<f64> {
    let p = table.len();
    let mut out = vec![0.0; channels * plane];
    par::for_each_chunk_mut(&mut out, plane, |ch, dst| {
        let gr = &g.data()[ch * p..(ch + 1) * p];
        for (&gv, corners) in gr.iter().zip(table) {
            for &(off, wgt) in corners {
                if off != usize::MAX {
                    dst[off] += wgt * gv;
                }
            }
        }
    });
    out
}

impl<'g> Var<'g> {
    /// Bilinear samples of a `[C, H, W]` image at `[P, 2]` pixel coordinates,
    /// returned channel-major as `[C, P]`. Differentiable in both arguments.
    pub fn grid_sample_2d(&self, coords: &Var<'g>) -> Var<'g> {
        let (iv, cv) = (self.value(), coords.value());
        assert_eq!(iv.ndim(), 3, "grid_sample_2d image must be [C, H, W]");
        assert_eq!(cv.shape()[1], 2, "grid_sample_2d coords must be [P, 2]");
        let (c, h, w) = (iv.dim(0), iv.dim(1), iv.dim(2));
        let p = cv.dim(0);
        let table: Vec<[Corner; 4]> = (0..p)
            .map(|i| corners_2d(cv.data()[2 * i], cv.data()[2 * i + 1], h, w))
            .collect();
        let value = gather(iv.data(), c, h * w, &table);
        let (need_img, need_xy) = (self.requires_grad(), coords.requires_grad());
        self.graph().custom(&[*self, *coords], value, move |g| {
            let gi = need_img.then(|| Tensor::new(iv.shape(), scatter(g, c, h * w, &table)));
            let gc = need_xy.then(|| {
                let mut out = vec![0.0; 2 * p];
                let (iv, cv) = (&*iv, &*cv);
                par::for_each_chunk_mut(&mut out, 2 * POINT_BLOCK, |blk, dst| {
                    for (j, pair) in dst.chunks_mut(2).enumerate() {
                        let i = blk * POINT_BLOCK + j;
                        let (x, y) = (cv.data()[2 * i], cv.data()[2 * i + 1]);
                        if !(x.is_finite() && y.is_finite()) {
                            continue;
                        }
                        let (x0, y0) = (x.floor(), y.floor());
                        let (fx, fy) = (x - x0, y - y0);
                        let (x0, y0) = (x0 as i64, y0 as i64);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ch in 0..c {
                            let plane = &iv.data()[ch * h * w..(ch + 1) * h * w];
                            let at = |dx: i64, dy: i64| {
                                let (cx, cy) = (x0 + dx, y0 + dy);
                                if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
                                    plane[cy as usize * w + cx as usize]
                                } else {
                                    0.0
                                }
                            };
                            let (v00, v10, v01, v11) = (at(0, 0), at(1, 0), at(0, 1), at(1, 1));
                            let gv = g.data()[ch * p + i];
                            gx += gv * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                            gy += gv * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                        }
                        pair[0] = gx;
                        pair[1] = gy;
                    }
                });
                Tensor::new(&[p, 2], out)
            });
            vec![gi, gc]
        })
    }

    /// Trilinear samples of a `[C, D, H, W]` volume at `[P, 3]` coordinates
    /// `(x, y, z)`, returned as `[C, P]`. Differentiable in both arguments.
    pub fn grid_sample_3d(&self, coords: &Var<'g>) -> Var<'g> {
        let (vv, cv) = (self.value(), coords.value());
        assert_eq!(vv.ndim(), 4, "grid_sample_3d volume must be [C, D, H, W]");
        assert_eq!(cv.shape()[1], 3, "grid_sample_3d coords must be [P, 3]");
        let (c, d, h, w) = (vv.dim(0), vv.dim(1), vv.dim(2), vv.dim(3));
        let plane = d * h * w;
        let p = cv.dim(0);
        let table: Vec<[Corner; 8]> = (0..p)
            .map(|i| corners_3d(cv.data()[3 * i], cv.data()[3 * i + 1], cv.data()[3 * i + 2], d, h, w))
            .collect();
        let value = gather(vv.data(), c, plane, &table);
        let (need_vol, need_xyz) = (self.requires_grad(), coords.requires_grad());
        self.graph().custom(&[*self, *coords], value, move |g| {
            let gv = need_vol.then(|| Tensor::new(vv.shape(), scatter(g, c, plane, &table)));
            let gc = need_xyz.then(|| {
                let mut out = vec![0.0; 3 * p];
                let (vv, cv) = (&*vv, &*cv);
                par::for_each_chunk_mut(&mut out, 3 * POINT_BLOCK, |blk, dst| {
                    for (j, triple) in dst.chunks_mut(3).enumerate() {
                        let i = blk * POINT_BLOCK + j;
                        let (x, y, z) = (cv.data()[3 * i], cv.data()[3 * i + 1], cv.data()[3 * i + 2]);
                        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
                            continue;
                        }
                        let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
                        let f = [x - x0, y - y0, z - z0];
                        let base = [x0 as i64, y0 as i64, z0 as i64];
                        let mut grad = [0.0; 3];
                        for k in 0..8 {
                            let bits = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
                            let (cx, cy, cz) = (base[0] + bits[0] as i64, base[1] + bits[1] as i64, base[2] + bits[2] as i64);
                            if cx < 0 || cy < 0 || cz < 0 || cx as usize >= w || cy as usize >= h || cz as usize >= d {
                                continue;
                            }
                            let off = (cz as usize * h + cy as usize) * w + cx as usize;
                            let mut s = 0.0;
                            for ch in 0..c {
                                s += g.data()[ch * p + i] * vv.data()[ch * plane + off];
                            }
                            // derivative of the corner weight along each axis
                            for (ax, gax) in grad.iter_mut().enumerate() {
                                let mut wgt = if bits[ax] == 1 { 1.0 } else { -1.0 };
                                for (o, &b) in bits.iter().enumerate() {
                                    if o != ax {
                                        wgt *= if b == 1 { f[o] } else { 1.0 - f[o] };
                                    }
                                }
                                *gax += wgt * s;
                            }
                        }
                        triple.copy_from_slice(&grad);
                    }
                });
                Tensor::new(&[p, 3], out)
            });
            vec![gv, gc]
        })
    }

    /// Variance across equally shaped variables, with the number of
    /// variables as denominator: `Σ (Vⱼ − V̄)² / n`.
    pub fn variance(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let shape = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.shape(), &shape[..], "variance inputs must share a shape");
        }
        let n = values.len() as f64;
        let len = values[0].len();
        let mut mean = vec![0.0; len];
        for v in &values {
            for (m, x) in mean.iter_mut().zip(v.data()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut out = vec![0.0; len];
        for v in &values {
            for ((o, x), m) in out.iter_mut().zip(v.data()).zip(&mean) {
                let d = x - m;
                *o += d * d;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        parts[0].graph().custom(parts, Tensor::new(&shape, out), move |g| {
            values
                .iter()
                .zip(&needs)
                .map(|(v, &need)| {
                    need.then(|| {
                        let d = v
                            .data()
                            .iter()
                            .zip(&mean)
                            .zip(g.data())
                            .map(|((x, m), gv)| 2.0 * (x - m) / n * gv)
                            .collect();
                        Tensor::new(&shape, d)
                    })
                })
                .collect()
        })
    }

    /// 3×3 mean filter over the trailing two axes of `[C, H, W]` without
    /// padding; output is `[C, H−2, W−2]`.
    pub fn box_filter3(&self) -> Var<'g> {
        let xv = self.value();
        let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert!(h >= 3 && w >= 3, "box_filter3 needs at least 3x3 input");
        let (ho, wo) = (h - 2, w - 2);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let src = &xv.data()[ch * h * w..(ch + 1) * h * w];
            for y in 0..ho {
                for x in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += src[(y + dy) * w + x + dx];
                        }
                    }
                    out[(ch * ho + y) * wo + x] = s / 9.0;
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.graph().custom(&[*self], Tensor::new(&[c, ho, wo], out), move |g| {
            let mut gi = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        let gv = g.data()[(ch * ho + y) * wo + x] / 9.0;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                gi[ch * h * w + (y + dy) * w + x + dx] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gi))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn integer_coordinates_hit_pixels_exactly() {
        let img = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let coords = Tensor::new(&[2, 2], vec![3.0, 2.0, 0.0, 1.0]);
        let s = bilinear_sample(&img, &coords);
        assert_eq!(s.at(&[0, 0]), img.at(&[0, 2, 3]));
        assert_eq!(s.at(&[1, 1]), img.at(&[1, 1, 0]));
    }

    #[test]
    fn outside_samples_are_zero() {
        let img = Tensor::ones(&[1, 3, 3]);
        let coords = Tensor::new(&[3, 2], vec![-1.5, 0.0, 0.0, 9.0, f64::NAN, 1.0]);
        assert_eq!(bilinear_sample(&img, &coords).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn coordinate_gradients_match_finite_differences() {
        let img = Tensor::from_fn(&[2, 5, 6], |i| ((i as f64) * 0.7).sin());
        let pts = Tensor::new(&[3, 2], vec![1.3, 2.6, 3.7, 0.2, 4.1, 3.45]);
        let g = Graph::new();
        let iv = g.leaf(img.clone());
        let cv = g.leaf(pts.clone());
        let y = iv.grid_sample_2d(&cv).square().sum();
        let grads = g.backward(y);
        let f = |p: &Tensor| bilinear_sample(&img, p).sq_norm();
        let h = 1e-6;
        for i in 0..6 {
            let mut a = pts.clone();
            a.data_mut()[i] += h;
            let mut b = pts.clone();
            b.data_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - grads.get(cv).unwrap().data()[i]).abs() < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn trilinear_coordinate_gradients() {
        let vol = Tensor::from_fn(&[2, 3, 4, 5], |i| ((i as f64) * 0.31).cos());
        let pts = Tensor::new(&[2, 3], vec![1.2, 2.3, 0.6, 3.4, 0.7, 1.9]);
        let g = Graph::new();
        let vv = g.leaf(vol.clone());
        let cv = g.leaf(pts.clone());
        let y = vv.grid_sample_3d(&cv).square().sum();
        let grads = g.backward(y);
        let f = |p: &Tensor| {
            let g2 = Graph::new();
            g2.constant(vol.clone()).grid_sample_3d(&g2.constant(p.clone())).value().sq_norm()
        };
        let h = 1e-6;
        for i in 0..6 {
            let mut a = pts.clone();
            a.data_mut()[i] += h;
            let mut b = pts.clone();
            b.data_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - grads.get(cv).unwrap().data()[i]).abs() < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn variance_of_opposite_values() {
        let g = Graph::new();
        let a = g.constant(Tensor::new(&[1], vec![3.0]));
        let b = g.constant(Tensor::new(&[1], vec![-3.0]));
        assert_eq!(Var::variance(&[a, b]).item(), 9.0);
    }
}
