//! Elementwise arithmetic with numpy-style broadcasting, and unary maps.

use std::rc::Rc;

use crate::graph::Var;
use crate::tensor::{numel, strides, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        assert!(da == db || da == 1 || db == 1, "cannot broadcast {a:?} with {b:?}");
        out[i] = da.max(db);
    }
    out
}

/// For every element of `out_shape`, the flat offset of the broadcast source
/// element in a tensor of shape `in_shape`.
pub(crate) fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let pad = n - in_shape.len();
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = (0..n)
        .map(|i| if i < pad || in_shape[i - pad] == 1 { 0 } else { in_strides[i - pad] })
        .collect();
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// (d/da, d/db)
    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

fn binary<'g>(a: Var<'g>, b: Var<'g>, op: BinOp) -> Var<'g> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = broadcast_shape(av.shape(), bv.shape());
    let same = av.shape() == bv.shape();
    let (oa, ob) = if same {
        (None, None)
    } else {
        (
            Some(Rc::new(broadcast_offsets(av.shape(), &out_shape))),
            Some(Rc::new(broadcast_offsets(bv.shape(), &out_shape))),
        )
    };
    let data: Vec<f64> = match (&oa, &ob) {
        (Some(oa), Some(ob)) => oa
            .iter()
            .zip(ob.iter())
            .map(|(&i, &j)| op.apply(av.data()[i], bv.data()[j]))
            .collect(),
        _ => av.data().iter().zip(bv.data()).map(|(&x, &y)| op.apply(x, y)).collect(),
    };
    let value = Tensor::new(&out_shape, data);
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    a.graph().custom(&[a, b], value, move |g| {
        let n = g.len();
        let mut ga = need_a.then(|| vec![0.0; av.len()]);
        let mut gb = need_b.then(|| vec![0.0; bv.len()]);
        for k in 0..n {
            let (i, j) = match (&oa, &ob) {
                (Some(oa), Some(ob)) => (oa[k], ob[k]),
                _ => (k, k),
            };
            let (da, db) = op.partials(av.data()[i], bv.data()[j]);
            let gk = g.data()[k];
            if let Some(ga) = ga.as_mut() {
                ga[i] += gk * da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] += gk * db;
            }
        }
        vec![
            ga.map(|d| Tensor::new(av.shape(), d)),
            gb.map(|d| Tensor::new(bv.shape(), d)),
        ]
    })
}

/// Elementwise map `y = f(x)` with derivative `df(x, y)`.
pub(crate) fn unary<'g>(
    x: Var<'g>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'g> {
    let xv = x.value();
    let value = xv.map(f);
    let yv = Rc::new(value.clone());
    x.graph().custom(&[x], value, move |g| {
        let data = g
            .data()
            .iter()
            .zip(xv.data().iter().zip(yv.data()))
            .map(|(&gk, (&xk, &yk))| gk * df(xk, yk))
            .collect();
        vec![Some(Tensor::new(xv.shape(), data))]
    })
}

impl<'g> Var<'g> {
    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        binary(*self, *other, BinOp::Add)
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        binary(*self, *other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        binary(*self, *other, BinOp::Mul)
    }

    pub fn div(&self, other: &Var<'g>) -> Var<'g> {
        binary(*self, *other, BinOp::Div)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        unary(*self, move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'g> {
        unary(*self, move |x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Var<'g> {
        unary(*self, |x| x * x, |x, _| 2.0 * x)
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&self) -> Var<'g> {
        unary(*self, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn exp(&self) -> Var<'g> {
        unary(*self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g> {
        unary(*self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Var<'g> {
        unary(*self, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn sin(&self) -> Var<'g> {
        unary(*self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Var<'g> {
        unary(*self, f64::cos, |x, _| -x.sin())
    }

    pub fn relu(&self) -> Var<'g> {
        unary(*self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        unary(
            *self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var<'g> {
        unary(
            *self,
            |x| if x > 30.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn sigmoid(&self) -> Var<'g> {
        unary(*self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// Clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        unary(
            *self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    /// Smooth-L1 with transition point `beta`: `0.5 x²/β` inside, `|x| − 0.5β`
    /// outside. With `beta = 1` this is the usual Huber form.
    pub fn smooth_l1(&self, beta: f64) -> Var<'g> {
        unary(
            *self,
            move |x| if x.abs() < beta { 0.5 * x * x / beta } else { x.abs() - 0.5 * beta },
            move |x, _| if x.abs() < beta { x / beta } else { x.signum() },
        )
    }
}
