//! Gaussian-uniform mixture sampling of distances along rays.

use std::rc::Rc;

use mvs_autograd::{Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Spread of the Gaussian around the prior: a third of the distance to the
/// nearer end of the range, so `±3 s_p` stays inside `[t_n, t_f]`.
pub fn prior_spread(z_p: f64, t_n: f64, t_f: f64) -> f64 {
    (z_p - t_f).abs().min((z_p - t_n).abs()) / 3.0
}

/// Samples of one ray, sorted, with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSamples {
    pub t: Vec<f64>,
    /// Sample came from the Gaussian half.
    pub gaussian: Vec<bool>,
    /// Gaussian sample was clamped to the range (no gradient to `z_p`).
    pub clamped: Vec<bool>,
    /// `∂t/∂z_p` per sample: `1 + ε ∂s_p/∂z_p` for unclamped Gaussian
    /// samples, 0 otherwise.
    pub dt_dz: Vec<f64>,
    pub spread: f64,
    /// The prior was outside `(t_n, t_f)` and all samples are uniform.
    pub fallback: bool,
}

/// `n` stratified-uniform samples on `[t_n, t_f]`, one per equal bin.
pub fn stratified(t_n: f64, t_f: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let width = (t_f - t_n) / n as f64;
    (0..n).map(|i| t_n + (i as f64 + rng.random::<f64>()) * width).collect()
}

/// `K/2` stratified-uniform samples plus `K/2` draws of `z_p + s_p ε`
/// clamped to the range, merged and sorted. With `mixture = false`, or when
/// `z_p ∉ (t_n, t_f)`, all `K` samples are stratified-uniform.
pub fn mixture_sample(z_p: f64, t_n: f64, t_f: f64, k: usize, mixture: bool, rng: &mut impl Rng) -> Result<MixtureSamples> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::InvalidInput(format!("samples per ray must be even and ≥ 2, got {k}")));
    }
    if !(0.0 <= t_n && t_n < t_f) {
        return Err(Error::InvalidInput(format!("bad ray range [{t_n}, {t_f}]")));
    }
    let inside = z_p > t_n && z_p < t_f;
    if !mixture || !inside {
        let t = stratified(t_n, t_f, k, rng);
        return Ok(MixtureSamples {
            t,
            gaussian: vec![false; k],
            clamped: vec![false; k],
            dt_dz: vec![0.0; k],
            spread: if inside { prior_spread(z_p, t_n, t_f) } else { 0.0 },
            fallback: mixture && !inside,
        });
    }
    let half = k / 2;
    let spread = prior_spread(z_p, t_n, t_f);
    let dspread = if t_f - z_p < z_p - t_n { -1.0 / 3.0 } else { 1.0 / 3.0 };
    let mut items: Vec<(f64, bool, bool, f64)> = stratified(t_n, t_f, half, rng).into_iter().map(|t| (t, false, false, 0.0)).collect();
    for _ in 0..half {
        let eps: f64 = StandardNormal.sample(rng);
        let raw = z_p + spread * eps;
        let t = raw.clamp(t_n, t_f);
        let clamped = t != raw;
        items.push((t, true, clamped, if clamped { 0.0 } else { 1.0 + eps * dspread }));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(MixtureSamples {
        t: items.iter().map(|x| x.0).collect(),
        gaussian: items.iter().map(|x| x.1).collect(),
        clamped: items.iter().map(|x| x.2).collect(),
        dt_dz: items.iter().map(|x| x.3).collect(),
        spread,
        fallback: false,
    })
}

/// Batched sampling with the Gaussian half reparameterised on `z_p` (`[R]`):
/// returns `t` as `[R, K]`; gradients reach `z_p` through the unclamped
/// Gaussian samples, including the dependence of the spread on `z_p`.
pub fn sample_rays<'g>(
    z_p: &Var<'g>,
    t_n: f64,
    t_f: f64,
    k: usize,
    mixture: bool,
    rng: &mut impl Rng,
) -> Result<(Var<'g>, Vec<MixtureSamples>)> {
    let zv = z_p.value();
    let r = zv.len();
    let mut rays = Vec::with_capacity(r);
    let mut data = Vec::with_capacity(r * k);
    for &z in zv.data() {
        let s = mixture_sample(z, t_n, t_f, k, mixture, rng)?;
        data.extend_from_slice(&s.t);
        rays.push(s);
    }
    let slope: Rc<Vec<f64>> = Rc::new(rays.iter().flat_map(|s| s.dt_dz.iter().copied()).collect());
    let t = z_p.graph().custom(&[*z_p], Tensor::new(&[r, k], data), move |g| {
        let mut gz = vec![0.0; r];
        for (ray, gzr) in gz.iter_mut().enumerate() {
            for j in 0..k {
                *gzr += slope[ray * k + j] * g.data()[ray * k + j];
            }
        }
        vec![Some(Tensor::new(&[r], gz))]
    });
    Ok((t, rays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvs_autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spread_arithmetic() {
        assert_eq!(prior_spread(3.0, 2.0, 6.0), 1.0 / 3.0);
        assert_eq!(prior_spread(4.0, 2.0, 6.0), 2.0 / 3.0);
    }

    #[test]
    fn split_range_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let z = rng.random_range(2.1..5.9);
            let s = mixture_sample(z, 2.0, 6.0, 16, true, &mut rng).unwrap();
            assert_eq!(s.gaussian.iter().filter(|&&g| g).count(), 8);
            assert!(s.t.windows(2).all(|w| w[0] <= w[1]));
            assert!(s.t.iter().all(|t| (2.0..=6.0).contains(t)));
            assert!(!s.fallback);
        }
    }

    #[test]
    fn out_of_range_prior_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for z in [1.0, 2.0, 6.0, f64::NAN] {
            let s = mixture_sample(z, 2.0, 6.0, 8, true, &mut rng).unwrap();
            assert!(s.fallback && s.gaussian.iter().all(|g| !g));
        }
        assert!(mixture_sample(4.0, 2.0, 6.0, 7, true, &mut rng).is_err());
        let s = mixture_sample(4.0, 2.0, 6.0, 8, false, &mut rng).unwrap();
        assert!(!s.fallback && s.gaussian.iter().all(|g| !g));
    }

    #[test]
    fn reparameterised_gradient_matches_finite_differences() {
        let g = Graph::new();
        let z = g.leaf(Tensor::new(&[2], vec![3.0, 7.0]));
        let (t, info) = sample_rays(&z, 2.0, 6.0, 8, true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let grads = g.backward(t.sum());
        let analytic = grads.get(z).unwrap().data()[0];
        assert_eq!(grads.get(z).unwrap().data()[1], 0.0);
        assert!(info[1].fallback);
        let total = |zp: f64| -> f64 { mixture_sample(zp, 2.0, 6.0, 8, true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().t.iter().sum() };
        let h = 1e-6;
        let numeric = (total(3.0 + h) - total(3.0 - h)) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-6, "{analytic} vs {numeric}");
        let live = info[0].gaussian.iter().zip(&info[0].clamped).filter(|(g, c)| **g && !**c).count();
        assert!(live > 0 && analytic != live as f64);
    }
}
