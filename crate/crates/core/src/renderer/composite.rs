//! Volume compositing of colour and depth along rays.

use std::rc::Rc;

use mvs_autograd::{Tensor, Var};

use crate::error::{Error, Result};

/// Transmittance prefix convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transmittance {
    /// `T_k = exp(−Σ_{j<k} σ_j δ_j)`: an opaque first sample takes all weight.
    Exclusive,
    /// `T_k = exp(−Σ_{j≤k} σ_j δ_j)`, kept for comparison.
    Inclusive,
}

/// Composited outputs and per-sample quantities.
pub struct Composite<'g> {
    /// `[R, 3]`.
    pub rgb: Var<'g>,
    /// `[R]`, `Σ_k w_k t_k` (not renormalised).
    pub depth: Var<'g>,
    /// `[R, K]`.
    pub weights: Tensor,
    /// `[R, K]`.
    pub transmittance: Tensor,
    /// `Σ_k w_k` per ray.
    pub opacity: Vec<f64>,
}

struct Forward {
    delta: Vec<f64>,
    a: Vec<f64>,
    trans: Vec<f64>,
    w: Vec<f64>,
}

fn forward(sigma: &[f64], t: &[f64], r: usize, k: usize, far_cap: f64, mode: Transmittance) -> Forward {
    let n = r * k;
    let (mut delta, mut a, mut trans, mut w) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for ray in 0..r {
        let base = ray * k;
        let mut acc = 0.0;
        for j in 0..k {
            let i = base + j;
            delta[i] = if j + 1 < k { t[i + 1] - t[i] } else { far_cap };
            a[i] = sigma[i] * delta[i];
            if mode == Transmittance::Inclusive {
                acc += a[i];
            }
            trans[i] = (-acc).exp();
            w[i] = trans[i] * -(-a[i]).exp_m1();
            if mode == Transmittance::Exclusive {
                acc += a[i];
            }
        }
    }
    Forward { delta, a, trans, w }
}

/// Composite densities `sigma` (`[R, K]`), colours `color` (`[R, K, 3]`) at
/// sorted distances `t` (`[R, K]`). `δ_k = t_{k+1} − t_k`, the last interval
/// is `far_cap`. Differentiable in all three inputs.
pub fn composite<'g>(sigma: &Var<'g>, color: &Var<'g>, t: &Var<'g>, far_cap: f64, mode: Transmittance) -> Result<Composite<'g>> {
    let (sv, cv, tv) = (sigma.value(), color.value(), t.value());
    let ss = sv.shape().to_vec();
    if ss.len() != 2 || tv.shape() != &ss[..] || cv.shape() != [ss[0], ss[1], 3] {
        return Err(Error::Shape(format!(
            "composite expects sigma [R,K], color [R,K,3], t [R,K]; got {:?}, {:?}, {:?}",
            ss,
            cv.shape(),
            tv.shape()
        )));
    }
    let (r, k) = (ss[0], ss[1]);
    if !(far_cap > 0.0) {
        return Err(Error::InvalidInput(format!("far cap must be positive, got {far_cap}")));
    }
    for ray in 0..r {
        let row = &tv.data()[ray * k..(ray + 1) * k];
        if let Some(j) = row.windows(2).position(|p| !(p[0] <= p[1])) {
            return Err(Error::InvalidInput(format!("ray {ray}: sample distances not sorted at index {j}")));
        }
    }
    if let Some(bad) = sv.data().iter().find(|s| !(**s >= 0.0)) {
        return Err(if bad.is_finite() { Error::InvalidInput(format!("negative density {bad}")) } else { Error::NonFinite(format!("density {bad}")) });
    }
    let fw = Rc::new(forward(sv.data(), tv.data(), r, k, far_cap, mode));
    let mut out = vec![0.0; r * 4];
    for ray in 0..r {
        for j in 0..k {
            let i = ray * k + j;
            for c in 0..3 {
                out[ray * 4 + c] += fw.w[i] * cv.data()[i * 3 + c];
            }
            out[ray * 4 + 3] += fw.w[i] * tv.data()[i];
        }
    }
    let opacity: Vec<f64> = (0..r).map(|ray| fw.w[ray * k..(ray + 1) * k].iter().sum()).collect();
    let weights = Tensor::new(&[r, k], fw.w.clone());
    let transmittance = Tensor::new(&[r, k], fw.trans.clone());
    let (need_s, need_c, need_t) = (sigma.requires_grad(), color.requires_grad(), t.requires_grad());
    let packed = sigma.graph().custom(&[*sigma, *color, *t], Tensor::new(&[r, 4], out), move |g| {
        let n = r * k;
        let mut gs = vec![0.0; n];
        let mut gc = need_c.then(|| vec![0.0; n * 3]);
        let mut gt = vec![0.0; n];
        for ray in 0..r {
            let base = ray * k;
            let g_rgb = &g.data()[ray * 4..ray * 4 + 3];
            let g_z = g.data()[ray * 4 + 3];
            let gw: Vec<f64> = (0..k)
                .map(|j| {
                    let i = base + j;
                    let c = &cv.data()[i * 3..i * 3 + 3];
                    g_rgb[0] * c[0] + g_rgb[1] * c[1] + g_rgb[2] * c[2] + g_z * tv.data()[i]
                })
                .collect();
            // Suffix sums of g_w·w: every later weight depends on a_j through T.
            let mut suffix = 0.0;
            let mut ga = vec![0.0; k];
            for j in (0..k).rev() {
                let i = base + j;
                let own = gw[j] * fw.w[i];
                if mode == Transmittance::Inclusive {
                    suffix += own;
                }
                ga[j] = gw[j] * fw.trans[i] * (-fw.a[i]).exp() - suffix;
                if mode == Transmittance::Exclusive {
                    suffix += own;
                }
            }
            for j in 0..k {
                let i = base + j;
                gs[i] = ga[j] * fw.delta[i];
                if j + 1 < k {
                    let gd = ga[j] * sv.data()[i];
                    gt[i + 1] += gd;
                    gt[i] -= gd;
                }
                gt[i] += g_z * fw.w[i];
                if let Some(gc) = gc.as_mut() {
                    for c in 0..3 {
                        gc[i * 3 + c] = fw.w[i] * g_rgb[c];
                    }
                }
            }
        }
        vec![
            need_s.then(|| Tensor::new(&[r, k], gs)),
            gc.map(|d| Tensor::new(&[r, k, 3], d)),
            need_t.then(|| Tensor::new(&[r, k], gt)),
        ]
    });
    Ok(Composite {
        rgb: packed.narrow(1, 0, 3),
        depth: packed.narrow(1, 3, 1).reshape(&[r]),
        weights,
        transmittance,
        opacity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvs_autograd::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(sigma: &[f64], color: &[f64], t: &[f64], cap: f64, mode: Transmittance) -> (Vec<f64>, f64, Vec<f64>) {
        let g = Graph::new();
        let k = sigma.len();
        let s = g.constant(Tensor::new(&[1, k], sigma.to_vec()));
        let c = g.constant(Tensor::new(&[1, k, 3], color.to_vec()));
        let tt = g.constant(Tensor::new(&[1, k], t.to_vec()));
        let out = composite(&s, &c, &tt, cap, mode).unwrap();
        (out.rgb.value().data().to_vec(), out.depth.value().data()[0], out.weights.data().to_vec())
    }

    #[test]
    fn empty_space_and_opaque_first_sample() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let c: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let (rgb, z, w) = run(&[0.0; 4], &c, &t, 1.0, Transmittance::Exclusive);
        assert!(rgb.iter().chain(&w).all(|&v| v == 0.0) && z == 0.0);
        let (rgb, z, w) = run(&[20.0, 1.0, 1.0, 1.0], &c, &t, 1.0, Transmittance::Exclusive);
        assert!(w[0] > 0.999);
        assert!((rgb[0] - c[0]).abs() < 1e-3 && (rgb[2] - c[2]).abs() < 1e-3);
        assert!((z - 1.0).abs() < 1e-3 * 4.0);
        // Under the inclusive prefix the opaque sample loses its weight.
        let (_, _, w) = run(&[20.0, 1.0, 1.0, 1.0], &c, &t, 1.0, Transmittance::Inclusive);
        assert!(w[0] < 1e-6);
    }

    #[test]
    fn unsorted_and_negative_rejected() {
        let g = Graph::new();
        let s = g.constant(Tensor::ones(&[1, 3]));
        let c = g.constant(Tensor::zeros(&[1, 3, 3]));
        let t = g.constant(Tensor::new(&[1, 3], vec![1.0, 3.0, 2.0]));
        assert!(composite(&s, &c, &t, 1.0, Transmittance::Exclusive).is_err());
        let s = g.constant(Tensor::new(&[1, 3], vec![1.0, -1.0, 0.0]));
        let t = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]));
        assert!(composite(&s, &c, &t, 1.0, Transmittance::Exclusive).is_err());
    }

    #[test]
    fn invariants_on_random_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, k) = (200, 16);
        let mut t = Vec::new();
        for _ in 0..r {
            let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(2.0..6.0)).collect();
            row.sort_by(f64::total_cmp);
            t.extend(row);
        }
        let g = Graph::new();
        let s = g.constant(Tensor::from_fn(&[r, k], |_| rng.random_range(0.0..5.0)));
        let c = g.constant(Tensor::from_fn(&[r, k, 3], |_| rng.random_range(0.0..1.0)));
        let out = composite(&s, &c, &g.constant(Tensor::new(&[r, k], t)), 0.1, Transmittance::Exclusive).unwrap();
        for ray in 0..r {
            let w = &out.weights.data()[ray * k..(ray + 1) * k];
            let tr = &out.transmittance.data()[ray * k..(ray + 1) * k];
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!(out.opacity[ray] <= 1.0 + 1e-12);
            assert!(tr.windows(2).all(|p| p[1] <= p[0]));
            let z = out.depth.value().data()[ray] / out.opacity[ray];
            assert!((2.0 - 1e-9..=6.0 + 1e-9).contains(&z));
        }
    }

    fn fd_check(mode: Transmittance) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (r, k) = (3, 8);
        let mut tv = Vec::new();
        for _ in 0..r {
            let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..4.0)).collect();
            row.sort_by(f64::total_cmp);
            tv.extend(row);
        }
        let sv = Tensor::from_fn(&[r, k], |_| rng.random_range(0.1..2.0));
        let cvt = Tensor::from_fn(&[r, k, 3], |_| rng.random_range(0.0..1.0));
        let tt = Tensor::new(&[r, k], tv);
        let proj = Tensor::from_fn(&[r, 4], |_| rng.random_range(-1.0..1.0));
        let scalar = |s: &Tensor, c: &Tensor, t: &Tensor| {
            let g = Graph::new();
            let o = composite(&g.constant(s.clone()), &g.constant(c.clone()), &g.constant(t.clone()), 0.5, mode).unwrap();
            let (rgb, z) = (o.rgb.value(), o.depth.value());
            (0..r)
                .map(|i| (0..3).map(|c| rgb.data()[i * 3 + c] * proj.data()[i * 4 + c]).sum::<f64>() + z.data()[i] * proj.data()[i * 4 + 3])
                .sum::<f64>()
        };
        let g = Graph::new();
        let (s, c, t) = (g.leaf(sv.clone()), g.leaf(cvt.clone()), g.leaf(tt.clone()));
        let o = composite(&s, &c, &t, 0.5, mode).unwrap();
        let pr = g.constant(proj.clone());
        let obj = o.rgb.mul(&pr.narrow(1, 0, 3)).sum().add(&o.depth.mul(&pr.narrow(1, 3, 1).reshape(&[r])).sum());
        let grads = g.backward(obj);
        let h = 1e-5;
        let check = |an: f64, num: f64| {
            let scale = an.abs().max(num.abs()).max(1e-6);
            assert!((an - num).abs() / scale < 1e-3, "{mode:?}: {an} vs {num}");
        };
        for i in 0..r * k {
            let (mut up, mut dn) = (sv.clone(), sv.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            check(grads.get(s).unwrap().data()[i], (scalar(&up, &cvt, &tt) - scalar(&dn, &cvt, &tt)) / (2.0 * h));
            let (mut up, mut dn) = (tt.clone(), tt.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            check(grads.get(t).unwrap().data()[i], (scalar(&sv, &cvt, &up) - scalar(&sv, &cvt, &dn)) / (2.0 * h));
        }
        for i in 0..r * k * 3 {
            let (mut up, mut dn) = (cvt.clone(), cvt.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            check(grads.get(c).unwrap().data()[i], (scalar(&sv, &up, &tt) - scalar(&sv, &dn, &tt)) / (2.0 * h));
        }
    }

    #[test]
    fn gradients_match_finite_differences_exclusive() {
        fd_check(Transmittance::Exclusive);
    }

    #[test]
    fn gradients_match_finite_differences_inclusive() {
        fd_check(Transmittance::Inclusive);
    }
}
