//! Reductions and the softmax.

use std::rc::Rc;

use crate::graph::Var;
use crate::tensor::{numel, Tensor};

/// (outer, axis length, inner) sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<'g> Var<'g> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let value = Tensor::scalar(xv.sum());
        self.graph().custom(&[*self], value, move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over `axis`. With `keepdim` the axis stays with length 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var<'g> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xv.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = in_shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        self.graph().custom(&[*self], Tensor::new(&out_shape, out), move |g| {
            let mut gi = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for k in 0..n {
                    gi[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(Tensor::new(&in_shape, gi))]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Var<'g> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n)
    }

    /// Normalized exponentials along `axis`.
    pub fn softmax(&self, axis: usize) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xv.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (xv.data()[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(&shape, out);
        let yv = Rc::new(value.clone());
        self.graph().custom(&[*self], value, move |g| {
            let mut gi = vec![0.0; yv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g.data()[at(k)] * yv.data()[at(k)]).sum();
                    for k in 0..n {
                        gi[at(k)] = yv.data()[at(k)] * (g.data()[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gi))]
        })
    }
}
