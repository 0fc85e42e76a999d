//! Positional encoding and the radiance network.

use mvs_autograd::nn::Linear;
use mvs_autograd::{Graph, ParamStore, Var};
use rand::Rng;

/// `[p, sin(2^l π p), cos(2^l π p)]` for `l < bands`, per row of `[P, D]`,
/// giving `[P, D (1 + 2 bands)]`.
pub fn positional_encoding<'g>(p: &Var<'g>, bands: usize) -> Var<'g> {
    let mut parts = vec![*p];
    for l in 0..bands {
        let scaled = p.mul_scalar(std::f64::consts::PI * (1u64 << l) as f64);
        parts.push(scaled.sin());
        parts.push(scaled.cos());
    }
    Var::concat(&parts, 1)
}

pub fn encoded_width(dims: usize, bands: usize) -> usize {
    dims * (1 + 2 * bands)
}

/// Density from position and volume features; colour additionally from the
/// viewing direction and the source-image colours.
#[derive(Clone, Debug)]
pub struct RadianceMlp {
    trunk: Vec<Linear>,
    sigma: Linear,
    feature: Linear,
    color_hidden: Linear,
    color_out: Linear,
}

impl RadianceMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        point_inputs: usize,
        view_inputs: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut trunk = Vec::with_capacity(layers);
        for l in 0..layers {
            let cin = if l == 0 { point_inputs } else { hidden };
            trunk.push(Linear::new(store, &format!("{name}.trunk{l}"), cin, hidden, rng));
        }
        let half = (hidden / 2).max(1);
        Self {
            trunk,
            sigma: Linear::new(store, &format!("{name}.sigma"), hidden, 1, rng),
            feature: Linear::new(store, &format!("{name}.feature"), hidden, hidden, rng),
            color_hidden: Linear::new(store, &format!("{name}.color_hidden"), hidden + view_inputs, half, rng),
            color_out: Linear::new(store, &format!("{name}.color_out"), half, 3, rng),
        }
    }

    /// `point` is `[P, point_inputs]` (encoded position and volume feature),
    /// `view` is `[P, view_inputs]` (encoded direction and source colours).
    /// Returns density `[P]` (≥ 0) and colour `[P, 3]` (in `[0, 1]`).
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, point: &Var<'g>, view: &Var<'g>) -> (Var<'g>, Var<'g>) {
        let mut h = *point;
        for layer in &self.trunk {
            h = layer.forward(g, store, &h).relu();
        }
        let p = h.shape()[0];
        let sigma = self.sigma.forward(g, store, &h).softplus().reshape(&[p]);
        let feat = self.feature.forward(g, store, &h);
        let c = self.color_hidden.forward(g, store, &Var::concat(&[feat, *view], 1)).relu();
        let color = self.color_out.forward(g, store, &c).sigmoid();
        (sigma, color)
    }

    /// Product of the Frobenius norms of the layers on the path from the
    /// point input to the outputs: an upper bound on the Lipschitz constant
    /// of `(σ, c)` with respect to the point input.
    pub fn lipschitz_bound(&self, store: &ParamStore) -> f64 {
        let fro = |l: &Linear| store.value(l.weight).sq_norm().sqrt();
        let trunk: f64 = self.trunk.iter().map(fro).product();
        let sigma_path = fro(&self.sigma);
        // Sigmoid is 1/4-Lipschitz.
        let color_path = fro(&self.feature) * fro(&self.color_hidden) * fro(&self.color_out) * 0.25;
        trunk * (sigma_path * sigma_path + color_path * color_path).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvs_autograd::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_layout() {
        let g = Graph::new();
        let p = g.constant(Tensor::new(&[1, 2], vec![0.5, -0.25]));
        let e = positional_encoding(&p, 2).value();
        assert_eq!(e.shape(), &[1, encoded_width(2, 2)]);
        let pi = std::f64::consts::PI;
        assert!((e.data()[2] - (0.5 * pi).sin()).abs() < 1e-12);
        assert!((e.data()[9] - (-0.25 * 2.0 * pi).cos()).abs() < 1e-12);
    }

    #[test]
    fn output_ranges_determinism_and_lipschitz() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = RadianceMlp::new(&mut store, "m", 10, 5, 16, 4, &mut rng);
        let pts = Tensor::from_fn(&[64, 10], |_| rng.random_range(-3.0..3.0));
        let view = Tensor::from_fn(&[64, 5], |_| rng.random_range(-3.0..3.0));
        let run = |pts: &Tensor| {
            let g = Graph::new();
            let (s, c) = mlp.forward(&g, &store, &g.constant(pts.clone()), &g.constant(view.clone()));
            ((*s.value()).clone(), (*c.value()).clone())
        };
        let (s, c) = run(&pts);
        assert!(s.data().iter().all(|&v| v >= 0.0));
        assert!(c.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(run(&pts), (s.clone(), c.clone()));
        let bound = mlp.lipschitz_bound(&store);
        for _ in 0..20 {
            let delta = Tensor::from_fn(&[64, 10], |_| rng.random_range(-0.01..0.01));
            let moved = pts.zip_map(&delta, |a, b| a + b);
            let (s2, c2) = run(&moved);
            for row in 0..64 {
                let dn: f64 = (0..10).map(|j| delta.data()[row * 10 + j].powi(2)).sum::<f64>().sqrt();
                let mut out = (s2.data()[row] - s.data()[row]).powi(2);
                out += (0..3).map(|j| (c2.data()[row * 3 + j] - c.data()[row * 3 + j]).powi(2)).sum::<f64>();
                assert!(out.sqrt() <= bound * dn + 1e-12);
            }
        }
    }
}
