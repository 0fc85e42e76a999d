//! 2-D and 3-D convolution via im2col and dense products, plus nearest
//! upsampling.
//!
//! Layouts are unbatched: images are `[C, H, W]`, volumes `[C, D, H, W]`,
//! kernels `[O, C, kh, kw]` / `[O, C, kd, kh, kw]`.

use std::rc::Rc;

use crate::graph::Var;
use crate::ops::linalg::{gemm, MatRef};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dGeometry {
    pub fn output(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for i in 0..3 {
            let span = self.input[i] + 2 * self.pad[i];
            assert!(span >= self.kernel[i], "kernel larger than padded input on axis {i}");
            o[i] = (span - self.kernel[i]) / self.stride[i] + 1;
        }
        o
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output().iter().product()
    }

    /// Source flat offset inside one input channel for (kernel tap, output
    /// position), or `None` when it falls in the padding.
    #[inline]
    fn source(&self, tap: [usize; 3], out: [usize; 3]) -> Option<usize> {
        let mut off = 0usize;
        for i in 0..3 {
            let pos = (out[i] * self.stride[i] + tap[i]) as isize - self.pad[i] as isize;
            if pos < 0 || pos >= self.input[i] as isize {
                return None;
            }
            off = off * self.input[i] + pos as usize;
        }
        Some(off)
    }

    /// For every (tap, output position) pair, the source offset or `usize::MAX`.
    fn tap_table(&self) -> Vec<usize> {
        let o = self.output();
        let k = self.kernel;
        let mut table = Vec::with_capacity(self.kvol() * self.out_plane());
        for a in 0..k[0] {
            for b in 0..k[1] {
                for c in 0..k[2] {
                    for z in 0..o[0] {
                        for y in 0..o[1] {
                            for x in 0..o[2] {
                                table.push(self.source([a, b, c], [z, y, x]).unwrap_or(usize::MAX));
                            }
                        }
                    }
                }
            }
        }
        table
    }
}

fn im2col(x: &[f64], geo: &Conv3dGeometry, table: &[usize]) -> Vec<f64> {
    let (kv, p, plane) = (geo.kvol(), geo.out_plane(), geo.in_plane());
    let mut col = vec![0.0; geo.channels * kv * p];
    par::for_each_chunk_mut(&mut col, kv * p, |c, rows| {
        let src = &x[c * plane..(c + 1) * plane];
        for (dst, &s) in rows.iter_mut().zip(table) {
            if s != usize::MAX {
                *dst = src[s];
            }
        }
    });
    col
}

fn col2im(col: &[f64], geo: &Conv3dGeometry, table: &[usize]) -> Vec<f64> {
    let (kv, p, plane) = (geo.kvol(), geo.out_plane(), geo.in_plane());
    let mut dx = vec![0.0; geo.channels * plane];
    par::for_each_chunk_mut(&mut dx, plane, |c, dst| {
        let rows = &col[c * kv * p..(c + 1) * kv * p];
        for (&v, &s) in rows.iter().zip(table) {
            if s != usize::MAX {
                dst[s] += v;
            }
        }
    });
    dx
}

/// Raw 3-D convolution over tensors. Returns `[O, Do, Ho, Wo]`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let geo = geometry(x, w, stride, pad);
    let table = geo.tap_table();
    forward_with(x, w, bias, &geo, &table)
}

fn geometry(x: &Tensor, w: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Conv3dGeometry {
    assert_eq!(x.ndim(), 4, "conv3d input must be [C, D, H, W], got {:?}", x.shape());
    assert_eq!(w.ndim(), 5, "conv3d kernel must be [O, C, kd, kh, kw], got {:?}", w.shape());
    assert_eq!(w.dim(1), x.dim(0), "conv3d channel mismatch {:?} vs {:?}", x.shape(), w.shape());
    Conv3dGeometry {
        channels: x.dim(0),
        input: [x.dim(1), x.dim(2), x.dim(3)],
        kernel: [w.dim(2), w.dim(3), w.dim(4)],
        stride,
        pad,
    }
}

fn forward_with(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geo: &Conv3dGeometry, table: &[usize]) -> Tensor {
    let o_ch = w.dim(0);
    let ck = geo.channels * geo.kvol();
    let p = geo.out_plane();
    let col = im2col(x.data(), geo, table);
    let mut out = vec![0.0; o_ch * p];
    gemm(MatRef::new(w.data(), o_ch, ck), MatRef::new(&col, ck, p), &mut out);
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(p).enumerate() {
            let bo = b.data()[o];
            row.iter_mut().for_each(|v| *v += bo);
        }
    }
    let [d, h, wd] = geo.output();
    Tensor::new(&[o_ch, d, h, wd], out)
}

impl<'g> Var<'g> {
    /// 3-D convolution of a `[C, D, H, W]` volume.
    pub fn conv3d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, stride: [usize; 3], pad: [usize; 3]) -> Var<'g> {
        let (xv, wv) = (self.value(), weight.value());
        let bv = bias.map(|b| b.value());
        let geo = geometry(&xv, &wv, stride, pad);
        let table = Rc::new(geo.tap_table());
        let value = forward_with(&xv, &wv, bv.as_deref(), &geo, &table);
        let mut inputs = vec![*self, *weight];
        if let Some(b) = bias {
            inputs.push(*b);
        }
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        let has_bias = bias.is_some();
        self.graph().custom(&inputs, value, move |g| {
            let o_ch = wv.dim(0);
            let ck = geo.channels * geo.kvol();
            let p = geo.out_plane();
            let gm = MatRef::new(g.data(), o_ch, p);
            let gw = need_w.then(|| {
                let col = im2col(xv.data(), &geo, &table);
                let mut d = vec![0.0; o_ch * ck];
                gemm(gm, MatRef::new(&col, ck, p).t(), &mut d);
                Tensor::new(wv.shape(), d)
            });
            let gx = need_x.then(|| {
                let mut dcol = vec![0.0; ck * p];
                gemm(MatRef::new(wv.data(), o_ch, ck).t(), gm, &mut dcol);
                Tensor::new(xv.shape(), col2im(&dcol, &geo, &table))
            });
            let mut out = vec![gx, gw];
            if has_bias {
                let gb: Vec<f64> = g.data().chunks(p).map(|r| r.iter().sum()).collect();
                out.push(Some(Tensor::new(&[o_ch], gb)));
            }
            out
        })
    }

    /// 2-D convolution of a `[C, H, W]` image with a `[O, C, kh, kw]` kernel.
    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [O, C, kh, kw]");
        let x4 = self.reshape(&[xs[0], 1, xs[1], xs[2]]);
        let w5 = weight.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]);
        let y = x4.conv3d(&w5, bias, [1, stride, stride], [0, pad, pad]);
        let ys = y.shape();
        y.reshape(&[ys[0], ys[2], ys[3]])
    }

    /// Nearest-neighbour resize of the trailing axes to `size`
    /// (`[C, H, W]` with 2 sizes or `[C, D, H, W]` with 3).
    pub fn upsample_nearest(&self, size: &[usize]) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let sp = &shape[1..];
        assert_eq!(sp.len(), size.len(), "upsample rank mismatch");
        let in_plane: usize = sp.iter().product();
        let out_plane: usize = size.iter().product();
        // per-axis source index, then the flat map for one channel
        let axis_maps: Vec<Vec<usize>> = sp
            .iter()
            .zip(size)
            .map(|(&n_in, &n_out)| (0..n_out).map(|i| i * n_in / n_out).collect())
            .collect();
        let in_strides = crate::tensor::strides(sp);
        let mut map = Vec::with_capacity(out_plane);
        let mut idx = vec![0usize; size.len()];
        for _ in 0..out_plane {
            map.push(idx.iter().enumerate().map(|(a, &i)| axis_maps[a][i] * in_strides[a]).sum::<usize>());
            for a in (0..size.len()).rev() {
                idx[a] += 1;
                if idx[a] < size[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let channels = shape[0];
        let mut out = Vec::with_capacity(channels * out_plane);
        for c in 0..channels {
            let src = &xv.data()[c * in_plane..(c + 1) * in_plane];
            out.extend(map.iter().map(|&m| src[m]));
        }
        let mut out_shape = vec![channels];
        out_shape.extend_from_slice(size);
        self.graph().custom(&[*self], Tensor::new(&out_shape, out), move |g| {
            let mut gi = vec![0.0; channels * in_plane];
            for c in 0..channels {
                let dst = &mut gi[c * in_plane..(c + 1) * in_plane];
                for (&m, &v) in map.iter().zip(&g.data()[c * out_plane..(c + 1) * out_plane]) {
                    dst[m] += v;
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

    /// Direct nested-loop convolution, kept independent of im2col.
    fn direct(x: &Tensor, w: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
        let geo = geometry(x, w, stride, pad);
        let o = geo.output();
        let mut out = Tensor::zeros(&[w.dim(0), o[0], o[1], o[2]]);
        for oc in 0..w.dim(0) {
            for z in 0..o[0] {
                for y in 0..o[1] {
                    for xx in 0..o[2] {
                        let mut acc = 0.0;
                        for c in 0..x.dim(0) {
                            for a in 0..geo.kernel[0] {
                                for b in 0..geo.kernel[1] {
                                    for e in 0..geo.kernel[2] {
                                        let pz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let py = (y * stride[1] + b) as isize - pad[1] as isize;
                                        let px = (xx * stride[2] + e) as isize - pad[2] as isize;
                                        if pz < 0 || py < 0 || px < 0 {
                                            continue;
                                        }
                                        let (pz, py, px) = (pz as usize, py as usize, px as usize);
                                        if pz >= x.dim(1) || py >= x.dim(2) || px >= x.dim(3) {
                                            continue;
                                        }
                                        acc += x.at(&[c, pz, py, px]) * w.at(&[oc, c, a, b, e]);
                                    }
                                }
                            }
                        }
                        out.set(&[oc, z, y, xx], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[3, 5, 6, 7], |i| ((i * 37 % 23) as f64 - 11.0) * 0.05);
        let w = Tensor::from_fn(&[4, 3, 3, 3, 3], |i| ((i * 17 % 13) as f64 - 6.0) * 0.03);
        for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([2, 2, 2], [1, 1, 1]), ([1, 2, 1], [0, 1, 0])] {
            let got = conv3d_forward(&x, &w, None, stride, pad);
            let want = direct(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradient_matches_finite_difference() {
        let x0 = Tensor::from_fn(&[2, 3, 4, 5], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let w0 = Tensor::from_fn(&[2, 2, 3, 3, 3], |i| ((i * 5 % 7) as f64 - 3.0) * 0.1);
        let f = |x: &Tensor, w: &Tensor| conv3d_forward(x, w, None, [2, 1, 2], [1, 1, 1]).sq_norm();
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let w = g.leaf(w0.clone());
        let y = x.conv3d(&w, None, [2, 1, 2], [1, 1, 1]).square().sum();
        let grads = g.backward(y);
        let h = 1e-6;
        for i in [0, 7, 33, 100] {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp, &w0) - f(&xm, &w0)) / (2.0 * h);
            assert!((fd - grads.get(x).unwrap().data()[i]).abs() < 1e-6);
        }
        for i in [0, 19, 53] {
            let mut wp = w0.clone();
            wp.data_mut()[i] += h;
            let mut wm = w0.clone();
            wm.data_mut()[i] -= h;
            let fd = (f(&x0, &wp) - f(&x0, &wm)) / (2.0 * h);
            assert!((fd - grads.get(w).unwrap().data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_nearest_repeats() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]));
        let y = x.upsample_nearest(&[4, 4]);
        assert_eq!(y.value().at(&[0, 3, 3]), 4.0);
        assert_eq!(y.value().at(&[0, 1, 2]), 2.0);
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(x).unwrap().data(), &[4.0; 4]);
    }
}
