//! Dense matrix products.

use crate::graph::Var;
use crate::par;
use crate::tensor::Tensor;

/// Rows per parallel block. Fixed so results do not depend on thread count.
const ROW_BLOCK: usize = 64;

/// A matrix view: data plus row and column strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = a · b` (overwrites `c`, row-major `a.rows × b.cols`).
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    par::for_each_chunk_mut(c, ROW_BLOCK * n, |blk, out| {
        let r0 = blk * ROW_BLOCK;
        let rows = out.len() / n;
        // SAFETY: strides and extents describe in-bounds views of `a.data`,
        // `b.data` and `out`, which are live for the duration of the call.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().offset(r0 as isize * a.rs),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

pub fn matmul_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dim(0), a.dim(1));
    let n = b.dim(1);
    let mut out = vec![0.0; m * n];
    gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out);
    Tensor::new(&[m, n], out)
}

impl<'g> Var<'g> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.ndim(), 2, "matmul lhs must be 2-D");
        assert_eq!(bv.ndim(), 2, "matmul rhs must be 2-D");
        let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
        assert_eq!(bv.dim(0), k, "matmul shapes {:?} x {:?}", av.shape(), bv.shape());
        let value = matmul_tensors(&av, &bv);
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.graph().custom(&[*self, *other], value, move |g| {
            let gm = MatRef::new(g.data(), m, n);
            let ga = need_a.then(|| {
                let mut d = vec![0.0; m * k];
                gemm(gm, MatRef::new(bv.data(), k, n).t(), &mut d);
                Tensor::new(&[m, k], d)
            });
            let gb = need_b.then(|| {
                let mut d = vec![0.0; k * n];
                gemm(MatRef::new(av.data(), m, k).t(), gm, &mut d);
                Tensor::new(&[k, n], d)
            });
            vec![ga, gb]
        })
    }
}
