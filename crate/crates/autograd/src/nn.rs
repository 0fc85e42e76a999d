//! Parameterised layers.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// He-uniform initialisation: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Fully connected layer on row batches: `[P, in] -> [P, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[inputs, outputs], inputs, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        x.matmul(&w).add(&b)
    }
}

/// 2-D convolution layer on `[C, H, W]` images.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = inputs * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(&[outputs, inputs, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        x.conv2d(&w, Some(&b), self.stride, self.pad)
    }
}

/// 3-D convolution layer on `[C, D, H, W]` volumes with a cubic kernel.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = inputs * kernel * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(&[outputs, inputs, kernel, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let s = self.stride;
        let p = self.pad;
        x.conv3d(&w, Some(&b), [s, s, s], [p, p, p])
    }
}
