//! Reshaping, slicing, concatenation and gathers.

use std::rc::Rc;

use crate::graph::Var;
use crate::ops::reduce::split_axis;
use crate::tensor::{numel, strides, Tensor};

impl<'g> Var<'g> {
    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let value = (*xv).clone().reshape(shape);
        self.graph().custom(&[*self], value, move |g| {
            vec![Some(g.clone().reshape(&in_shape))]
        })
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        assert_eq!(axes.len(), in_shape.len());
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(&in_shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = Rc::new(gather_offsets(&out_shape, &src_strides));
        let data = map.iter().map(|&o| xv.data()[o]).collect();
        let value = Tensor::new(&out_shape, data);
        self.graph().custom(&[*self], value, move |g| {
            let mut gi = vec![0.0; g.len()];
            for (k, &o) in map.iter().enumerate() {
                gi[o] = g.data()[k];
            }
            vec![Some(Tensor::new(&in_shape, gi))]
        })
    }

    /// Swap the two axes of a matrix.
    pub fn t(&self) -> Var<'g> {
        assert_eq!(self.shape().len(), 2);
        self.permute(&[1, 0])
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        assert!(start + len <= n, "narrow {start}+{len} exceeds axis length {n}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        self.graph().custom(&[*self], Tensor::new(&out_shape, out), move |g| {
            let mut gi = vec![0.0; outer * n * inner];
            for o in 0..outer {
                gi[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&in_shape, gi))]
        })
    }

    /// Rows `indices` of axis 0.
    pub fn index_select(&self, indices: &[usize]) -> Var<'g> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let row = numel(&in_shape[1..]);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&xv.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = in_shape.clone();
        out_shape[0] = indices.len();
        let indices = indices.to_vec();
        self.graph().custom(&[*self], Tensor::new(&out_shape, out), move |g| {
            let mut gi = vec![0.0; numel(&in_shape)];
            for (k, &i) in indices.iter().enumerate() {
                for (d, s) in gi[i * row..(i + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                    *d += s;
                }
            }
            vec![Some(Tensor::new(&in_shape, gi))]
        })
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        let (outer, _, inner) = split_axis(&base, axis);
        let lens: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), base.len());
                for (i, (&a, &b)) in s.iter().zip(&base).enumerate() {
                    assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {base:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        parts[0].graph().custom(parts, Tensor::new(&out_shape, out), move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &l) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&g.data()[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::new(s, d)))
                .collect()
        })
    }

    /// Stack equally shaped variables along a new leading axis.
    pub fn stack(parts: &[Var<'g>]) -> Var<'g> {
        let mut shape = parts[0].shape();
        let lifted: Vec<Var<'g>> = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(&s)
            })
            .collect();
        shape.insert(0, parts.len());
        Var::concat(&lifted, 0).reshape(&shape)
    }
}

/// Flat source offsets for walking `out_shape` with per-axis source strides.
fn gather_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let total = numel(out_shape);
    let mut res = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        res.push(off);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use crate::graph::{Graph, Var};
    use crate::tensor::Tensor;

    #[test]
    fn permute_matches_manual_transpose() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = x.permute(&[2, 0, 1]).value();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
    }

    #[test]
    fn concat_then_narrow_roundtrips() {
        let g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = g.leaf(Tensor::from_fn(&[2, 1], |i| 10.0 + i as f64));
        let c = Var::concat(&[a, b], 1);
        assert_eq!(c.value().data(), &[0., 1., 2., 10., 3., 4., 5., 11.]);
        let back = c.narrow(1, 3, 1);
        assert_eq!(back.value().data(), b.value().data());
        let grads = g.backward(back.sum());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(a).unwrap().sum(), 0.0);
    }
}
