//! Loss terms and their weighted combination.

use mvs_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, CascadeOutput};
use crate::error::{Error, Result};
use crate::geometry::{inverse_warp_image, Camera};
use crate::imgproc::{Jitter, JitterConfig};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Which terms take part. The five ablation rows are
/// `{pc}`, `{pc, da}`, `{pc, da, rc}`, `{pc, da, rc}` with mixture sampling,
/// and all of those plus `dc` (mixture sampling is a renderer switch).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossFlags {
    pub pc: bool,
    pub rc: bool,
    pub dc: bool,
    pub ssim: bool,
    pub smooth: bool,
    pub da: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { pc: true, rc: true, dc: true, ssim: true, smooth: true, da: true }
    }
}

impl LossFlags {
    /// The renderer branch is needed at all.
    pub fn needs_renderer(&self) -> bool {
        self.rc || self.dc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pc: f64,
    pub rc: f64,
    pub dc: f64,
    pub ssim: f64,
    pub smooth: f64,
    /// Data-augmentation weight at epoch 0; doubled every two epochs.
    pub da_initial: f64,
    /// Transition point of the Smooth-L1 depth consistency term.
    pub dc_beta: f64,
    #[serde(default)]
    pub enable: LossFlags,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pc: 0.8, rc: 1.0, dc: 1.0, ssim: 0.2, smooth: 0.0067, da_initial: 0.01, dc_beta: 1.0, enable: LossFlags::default() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pc, self.rc, self.dc, self.ssim, self.smooth, self.da_initial];
        if all.iter().any(|w| !(*w >= 0.0)) || !(self.dc_beta > 0.0) {
            return Err(Error::Config("loss weights must be ≥ 0 and dc_beta > 0".into()));
        }
        Ok(())
    }

    /// `λ₆(epoch) = λ₆(0) · 2^⌊epoch/2⌋`, uncapped.
    pub fn da_weight(&self, epoch: usize) -> f64 {
        self.da_initial * 2f64.powi((epoch / 2) as i32)
    }
}

/// A loss value with the number of elements it averaged over.
pub struct Term<'g> {
    pub value: Var<'g>,
    pub count: usize,
    /// Views (or batches) that contributed nothing because nothing was valid.
    pub degenerate: usize,
}

/// One source image resampled into the reference view.
pub struct WarpedView<'g> {
    pub warped: Var<'g>,
    pub mask: Tensor,
}

/// Warp every source image into the reference view with depth `depth`.
pub fn warp_sources<'g>(src_images: &[Var<'g>], src_cams: &[Camera], ref_cam: &Camera, depth: &Var<'g>) -> Result<Vec<WarpedView<'g>>> {
    src_images
        .iter()
        .zip(src_cams)
        .map(|(img, cam)| {
            let r = inverse_warp_image(img, cam, ref_cam, depth)?;
            Ok(WarpedView { warped: r.warped, mask: r.mask })
        })
        .collect()
}

fn diff_x<'g>(x: &Var<'g>) -> Var<'g> {
    let s = x.shape();
    let ax = s.len() - 1;
    x.narrow(ax, 1, s[ax] - 1).sub(&x.narrow(ax, 0, s[ax] - 1))
}

fn diff_y<'g>(x: &Var<'g>) -> Var<'g> {
    let s = x.shape();
    let ax = s.len() - 2;
    x.narrow(ax, 1, s[ax] - 1).sub(&x.narrow(ax, 0, s[ax] - 1))
}

fn mask_pairs(mask: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (mask.dim(0), mask.dim(1));
    let mx = Tensor::from_fn(&[1, h, w - 1], |i| {
        let (y, x) = (i / (w - 1), i % (w - 1));
        mask.data()[y * w + x] * mask.data()[y * w + x + 1]
    });
    let my = Tensor::from_fn(&[1, h - 1, w], |i| mask.data()[i] * mask.data()[i + w]);
    (mx, my)
}

/// Sum over source views of
/// `(‖(Î − I)⊙M‖₂ + ‖(∇Î − ∇I)⊙M_∇‖₂) / ‖M‖₁`, with forward-difference
/// gradients masked where both neighbours are valid.
pub fn photometric_consistency_loss<'g>(reference: &Var<'g>, warped: &[WarpedView<'g>]) -> Result<Term<'g>> {
    let g = reference.graph();
    let rs = reference.shape();
    if rs.len() != 3 || rs[1] < 2 || rs[2] < 2 {
        return Err(Error::Shape(format!("reference image must be [C, H≥2, W≥2], got {rs:?}")));
    }
    let (h, w) = (rs[1], rs[2]);
    let (rgx, rgy) = (diff_x(reference), diff_y(reference));
    let mut total = g.constant(Tensor::scalar(0.0));
    let (mut count, mut degenerate) = (0, 0);
    for view in warped {
        let msum = view.mask.sum();
        if msum == 0.0 {
            degenerate += 1;
            continue;
        }
        count += msum as usize;
        let m = g.constant(view.mask.clone().reshape(&[1, h, w]));
        let intensity = view.warped.sub(reference).mul(&m).square().sum().sqrt();
        let (mx, my) = mask_pairs(&view.mask);
        let gx = diff_x(&view.warped).sub(&rgx).mul(&g.constant(mx)).square().sum();
        let gy = diff_y(&view.warped).sub(&rgy).mul(&g.constant(my)).square().sum();
        let gradient = gx.add(&gy).sqrt();
        total = total.add(&intensity.add(&gradient).mul_scalar(1.0 / msum));
    }
    if degenerate == warped.len() && !warped.is_empty() {
        log::warn!("photometric loss: every source view has an empty mask");
    }
    Ok(Term { value: total, count, degenerate })
}

/// Mean over fully valid 3×3 windows (and views, channels) of
/// `(1 − SSIM(Î, I)) / 2`.
pub fn ssim_loss<'g>(reference: &Var<'g>, warped: &[WarpedView<'g>]) -> Result<Term<'g>> {
    let g = reference.graph();
    let rs = reference.shape();
    if rs.len() != 3 || rs[1] < 3 || rs[2] < 3 {
        return Err(Error::Shape(format!("SSIM needs images of at least 3x3, got {rs:?}")));
    }
    let (c, h, w) = (rs[0], rs[1], rs[2]);
    let mu_y = reference.box_filter3();
    let yy = reference.square().box_filter3();
    let sig_y = yy.sub(&mu_y.square());
    let mut acc = g.constant(Tensor::scalar(0.0));
    let (mut count, mut degenerate) = (0usize, 0);
    for view in warped {
        let valid = g.constant(view.mask.clone().reshape(&[1, h, w])).box_filter3().value().map(|v| if v > 1.0 - 1e-9 { 1.0 } else { 0.0 });
        let n = valid.sum() as usize;
        if n == 0 {
            degenerate += 1;
            continue;
        }
        count += n * c;
        let x = &view.warped;
        let mu_x = x.box_filter3();
        let sig_x = x.square().box_filter3().sub(&mu_x.square());
        let sig_xy = x.mul(reference).box_filter3().sub(&mu_x.mul(&mu_y));
        let num = mu_x.mul(&mu_y).mul_scalar(2.0).add_scalar(SSIM_C1).mul(&sig_xy.mul_scalar(2.0).add_scalar(SSIM_C2));
        let den = mu_x.square().add(&mu_y.square()).add_scalar(SSIM_C1).mul(&sig_x.add(&sig_y).add_scalar(SSIM_C2));
        let ssim = num.div(&den);
        let per = ssim.neg().add_scalar(1.0).mul_scalar(0.5).mul(&g.constant(valid));
        acc = acc.add(&per.sum());
    }
    if count == 0 {
        log::warn!("SSIM loss: no fully valid windows");
        return Ok(Term { value: g.constant(Tensor::scalar(0.0)), count: 0, degenerate });
    }
    Ok(Term { value: acc.mul_scalar(1.0 / count as f64), count, degenerate })
}

/// Edge-aware first-order smoothness of the mean-normalised depth:
/// `mean(|∂ₓD̃| e^{−|∂ₓI|}) + mean(|∂ᵧD̃| e^{−|∂ᵧI|})`, with image gradients
/// averaged over channels.
pub fn smoothness_loss<'g>(depth: &Var<'g>, image: &Tensor) -> Result<Var<'g>> {
    let g = depth.graph();
    let ds = depth.shape();
    if ds.len() != 2 || image.shape()[1..] != ds[..] || ds[0] < 2 || ds[1] < 2 {
        return Err(Error::Shape(format!("smoothness needs aligned [H,W] depth and [C,H,W] image, got {ds:?} and {:?}", image.shape())));
    }
    let (h, w) = (ds[0], ds[1]);
    let c = image.dim(0);
    let edge = |dy: usize, dx: usize| {
        let (ho, wo) = (h - dy, w - dx);
        Tensor::from_fn(&[ho, wo], |i| {
            let (y, x) = (i / wo, i % wo);
            let grad: f64 = (0..c)
                .map(|ch| (image.data()[(ch * h + y + dy) * w + x + dx] - image.data()[(ch * h + y) * w + x]).abs())
                .sum::<f64>()
                / c as f64;
            (-grad).exp()
        })
    };
    let mean = depth.mean();
    let norm = depth.div(&mean);
    let sx = diff_x(&norm).abs().mul(&g.constant(edge(0, 1))).mean();
    let sy = diff_y(&norm).abs().mul(&g.constant(edge(1, 0))).mean();
    Ok(sx.add(&sy))
}

/// Mean squared error over rays and channels.
pub fn reference_view_synthesis_loss<'g>(rgb: &Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    if rgb.shape() != target.shape() {
        return Err(Error::Shape(format!("rendered {:?} vs target {:?}", rgb.shape(), target.shape())));
    }
    if target.is_empty() {
        return Err(Error::InvalidInput("empty ray batch".into()));
    }
    Ok(rgb.sub(&rgb.graph().constant(target.clone())).square().mean())
}

/// Mean Smooth-L1 of `ẑ − z_p` over gated rays; zero (with a warning) when
/// no ray passes the gate.
pub fn depth_rendering_consistency_loss<'g>(rendered: &Var<'g>, prior: &Var<'g>, gate: &[bool], beta: f64) -> Result<Term<'g>> {
    let r = rendered.shape()[0];
    if prior.shape() != rendered.shape() || gate.len() != r {
        return Err(Error::Shape("rendered depth, prior and gate must align".into()));
    }
    let idx: Vec<usize> = (0..r).filter(|&i| gate[i]).collect();
    if idx.is_empty() {
        log::warn!("depth consistency loss: no rays pass the opacity gate");
        return Ok(Term { value: rendered.graph().constant(Tensor::scalar(0.0)), count: 0, degenerate: 1 });
    }
    let diff = rendered.sub(prior).reshape(&[r, 1]).index_select(&idx);
    Ok(Term { value: diff.smooth_l1(beta).mean(), count: idx.len(), degenerate: 0 })
}

/// Mean absolute difference between the augmented-branch depth and the
/// (detached) original-branch depth.
pub fn depth_l1_to_anchor<'g>(augmented: &Var<'g>, original: &Var<'g>) -> Var<'g> {
    augmented.sub(&original.detach()).abs().mean()
}

/// Run the backbone on colour-jittered copies of `images` and return the
/// stage-weighted L1 distance of its depths to the detached depths of
/// `original`.
#[allow(clippy::too_many_arguments)]
pub fn data_augmentation_loss<'g>(
    backbone: &Backbone,
    g: &'g Graph,
    store: &ParamStore,
    images: &[Tensor],
    cams: &[Camera],
    original: &CascadeOutput<'g>,
    jitter: &JitterConfig,
    rng: &mut impl Rng,
) -> Result<Var<'g>> {
    let aug: Vec<Var<'g>> = images
        .iter()
        .map(|im| g.constant(Jitter::sample(jitter, rng).apply(im)))
        .collect();
    let out = backbone.forward(g, store, &aug, cams)?;
    let mut total = g.constant(Tensor::scalar(0.0));
    for ((a, o), st) in out.stages.iter().zip(&original.stages).zip(&backbone.config.stages) {
        total = total.add(&depth_l1_to_anchor(&a.depth, &o.depth).mul_scalar(st.loss_weight));
    }
    Ok(total)
}

/// Per-term inputs of the total loss; `None` for terms not computed.
#[derive(Default)]
pub struct LossTerms<'g> {
    pub pc: Option<Var<'g>>,
    pub rc: Option<Var<'g>>,
    pub dc: Option<Var<'g>>,
    pub ssim: Option<Var<'g>>,
    pub smooth: Option<Var<'g>>,
    pub da: Option<Var<'g>>,
}

/// Values of every term and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pc: f64,
    pub rc: f64,
    pub dc: f64,
    pub ssim: f64,
    pub smooth: f64,
    pub da: f64,
    pub total: f64,
    pub da_weight: f64,
    pub pc_pixels: usize,
    pub rc_rays: usize,
    pub dc_rays: usize,
    pub ssim_windows: usize,
    pub degenerate_views: usize,
    pub fallback_rays: usize,
    /// The weighted augmentation term dominates the others by more than 10×.
    pub da_dominates: bool,
}

/// `Σ λᵢ·termᵢ` over enabled terms.
pub fn total_loss<'g>(g: &'g Graph, terms: &LossTerms<'g>, weights: &LossWeights, epoch: usize) -> (Var<'g>, LossBreakdown) {
    let f = &weights.enable;
    let da_w = weights.da_weight(epoch);
    let entries = [
        (f.pc, weights.pc, &terms.pc),
        (f.rc, weights.rc, &terms.rc),
        (f.dc, weights.dc, &terms.dc),
        (f.ssim, weights.ssim, &terms.ssim),
        (f.smooth, weights.smooth, &terms.smooth),
        (f.da, da_w, &terms.da),
    ];
    let mut total = g.constant(Tensor::scalar(0.0));
    let mut vals = [0.0; 6];
    let mut others = 0.0;
    for (i, (on, lambda, term)) in entries.iter().enumerate() {
        if let (true, Some(t)) = (on, term) {
            vals[i] = t.item();
            total = total.add(&t.mul_scalar(*lambda));
            if i < 5 {
                others += lambda * vals[i];
            }
        }
    }
    let da_dominates = f.da && da_w * vals[5] > 10.0 * others && others > 0.0;
    if da_dominates {
        log::warn!("augmentation term {:.4e} exceeds 10x the other terms ({:.4e}) at epoch {epoch}", da_w * vals[5], others);
    }
    let breakdown = LossBreakdown {
        pc: vals[0],
        rc: vals[1],
        dc: vals[2],
        ssim: vals[3],
        smooth: vals[4],
        da: vals[5],
        total: total.item(),
        da_weight: da_w,
        da_dominates,
        ..Default::default()
    };
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_view<'g>(g: &'g Graph, img: Tensor) -> WarpedView<'g> {
        let (h, w) = (img.dim(1), img.dim(2));
        WarpedView { warped: g.constant(img), mask: Tensor::ones(&[h, w]) }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn pc_fixed_points_and_offset_oracle() {
        let g = Graph::new();
        let img = image(5, 6, 1);
        let r = g.constant(img.clone());
        let t = photometric_consistency_loss(&r, &[full_view(&g, img.clone()), full_view(&g, img.clone())]).unwrap();
        assert_eq!(t.value.item(), 0.0);
        let empty = WarpedView { warped: g.constant(Tensor::zeros(&[3, 5, 6])), mask: Tensor::zeros(&[5, 6]) };
        let t = photometric_consistency_loss(&r, &[empty]).unwrap();
        assert_eq!((t.value.item(), t.degenerate), (0.0, 1));
        // Constant offset: the gradient term vanishes; intensity is c√(3P)/P.
        let c = 0.05;
        let shifted = img.map(|v| v + c);
        let t = photometric_consistency_loss(&r, &[full_view(&g, shifted.clone())]).unwrap();
        let p = 30.0;
        let mut sq = 0.0;
        for (a, b) in shifted.data().iter().zip(img.data()) {
            sq += (a - b) * (a - b);
        }
        let direct = sq.sqrt() / p;
        assert!((t.value.item() - c * (3.0 * p).sqrt() / p).abs() < 1e-12);
        assert!((t.value.item() - direct).abs() < 1e-12);
    }

    #[test]
    fn pc_gradient_term_uses_pairwise_mask() {
        let g = Graph::new();
        let img = Tensor::zeros(&[1, 2, 3]);
        let mut other = Tensor::zeros(&[1, 2, 3]);
        other.data_mut()[1] = 1.0;
        let mut mask = Tensor::ones(&[2, 3]);
        mask.data_mut()[2] = 0.0;
        let view = WarpedView { warped: g.constant(other), mask };
        let t = photometric_consistency_loss(&g.constant(img), &[view]).unwrap();
        // Intensity 1; gradients: x pairs (0,1) only on row 0 → 1, y pair at column 1 → 1.
        let want = (1.0 + 2f64.sqrt()) / 5.0;
        assert!((t.value.item() - want).abs() < 1e-12);
    }

    fn ssim_oracle(x: &Tensor, y: &Tensor) -> f64 {
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let mut total = 0.0;
        let mut n = 0;
        for ch in 0..c {
            for yy in 0..h - 2 {
                for xx in 0..w - 2 {
                    let mut px = Vec::new();
                    let mut py = Vec::new();
                    for dy in 0..3 {
                        for dx in 0..3 {
                            px.push(x.at(&[ch, yy + dy, xx + dx]));
                            py.push(y.at(&[ch, yy + dy, xx + dx]));
                        }
                    }
                    let mx = px.iter().sum::<f64>() / 9.0;
                    let my = py.iter().sum::<f64>() / 9.0;
                    let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / 9.0;
                    let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / 9.0;
                    let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / 9.0;
                    let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    total += (1.0 - s) / 2.0;
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_fixed_point_anticorrelation_and_oracle() {
        let g = Graph::new();
        let img = image(6, 7, 2);
        let r = g.constant(img.clone());
        assert!(ssim_loss(&r, &[full_view(&g, img.clone())]).unwrap().value.item().abs() < 1e-12);
        let inv = img.map(|v| 1.0 - v);
        assert!(ssim_loss(&r, &[full_view(&g, inv)]).unwrap().value.item() > 0.0);
        let other = image(6, 7, 3);
        let got = ssim_loss(&r, &[full_view(&g, other.clone())]).unwrap().value.item();
        assert!((got - ssim_oracle(&other, &img)).abs() < 1e-6);
        let none = WarpedView { warped: g.constant(other), mask: Tensor::zeros(&[6, 7]) };
        assert_eq!(ssim_loss(&r, &[none]).unwrap().value.item(), 0.0);
    }

    #[test]
    fn smoothness_cases_and_oracle() {
        let g = Graph::new();
        let img = Tensor::full(&[3, 4, 5], 0.5);
        assert_eq!(smoothness_loss(&g.constant(Tensor::full(&[4, 5], 3.0)), &img).unwrap().item(), 0.0);
        let slope = 0.3;
        let ramp = Tensor::from_fn(&[4, 5], |i| 2.0 + slope * (i % 5) as f64);
        let mean = ramp.mean();
        let got = smoothness_loss(&g.constant(ramp), &img).unwrap().item();
        assert!((got - slope / mean).abs() < 1e-12);

        let d = Tensor::from_fn(&[4, 5], |i| 2.0 + ((i * 7) % 5) as f64 * 0.1);
        let im = image(4, 5, 4);
        let got = smoothness_loss(&g.constant(d.clone()), &im).unwrap().item();
        let m = d.mean();
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..4 {
            for x in 0..5 {
                let gi = |dy: usize, dx: usize| (0..3).map(|c| (im.at(&[c, y + dy, x + dx]) - im.at(&[c, y, x])).abs()).sum::<f64>() / 3.0;
                if x + 1 < 5 {
                    sx += ((d.at(&[y, x + 1]) - d.at(&[y, x])) / m).abs() * (-gi(0, 1)).exp();
                }
                if y + 1 < 4 {
                    sy += ((d.at(&[y + 1, x]) - d.at(&[y, x])) / m).abs() * (-gi(1, 0)).exp();
                }
            }
        }
        assert!((got - (sx / 16.0 + sy / 15.0)).abs() < 1e-9);
    }

    #[test]
    fn rc_and_dc_values() {
        let g = Graph::new();
        let target = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.05);
        assert_eq!(reference_view_synthesis_loss(&g.constant(target.clone()), &target).unwrap().item(), 0.0);
        let off = target.map(|v| v + 0.5);
        assert!((reference_view_synthesis_loss(&g.constant(off), &target).unwrap().item() - 0.25).abs() < 1e-12);
        assert!(reference_view_synthesis_loss(&g.constant(Tensor::zeros(&[0, 3])), &Tensor::zeros(&[0, 3])).is_err());

        let z = g.constant(Tensor::new(&[3], vec![4.0, 4.5, 6.0]));
        let p = g.constant(Tensor::new(&[3], vec![4.0, 4.0, 4.0]));
        for (gate, want) in [([true, false, false], 0.0), ([false, true, false], 0.125), ([false, false, true], 1.5)] {
            assert_eq!(depth_rendering_consistency_loss(&z, &p, &gate, 1.0).unwrap().value.item(), want);
        }
        let none = depth_rendering_consistency_loss(&z, &p, &[false; 3], 1.0).unwrap();
        assert_eq!((none.value.item(), none.count), (0.0, 0));
    }

    #[test]
    fn da_anchor_is_detached() {
        let g = Graph::new();
        let a = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        let o = g.leaf(Tensor::new(&[2], vec![1.5, 1.0]));
        let grads = g.backward(depth_l1_to_anchor(&a, &o));
        assert!(grads.get(o).is_none() || grads.get(o).unwrap().max_abs() == 0.0);
        assert_eq!(grads.get(a).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn total_constants_and_schedule() {
        let g = Graph::new();
        let one = || Some(g.constant(Tensor::scalar(1.0)));
        let terms = LossTerms { pc: one(), rc: one(), dc: one(), ssim: one(), smooth: one(), da: one() };
        let w = LossWeights::default();
        let (_, b) = total_loss(&g, &terms, &w, 0);
        assert!((b.total - 3.0167).abs() < 1e-9);
        let lambdas: Vec<f64> = [0, 2, 4, 6].iter().map(|&e| w.da_weight(e)).collect();
        assert_eq!(lambdas, vec![0.01, 0.02, 0.04, 0.08]);
        assert_eq!(w.da_weight(1), 0.01);
        let mut off = w.clone();
        off.enable.rc = false;
        let (_, b) = total_loss(&g, &terms, &off, 0);
        assert!((b.total - 2.0167).abs() < 1e-9);
        let zero = || Some(g.constant(Tensor::scalar(0.0)));
        let zeros = LossTerms { pc: zero(), rc: zero(), dc: zero(), ssim: zero(), smooth: zero(), da: zero() };
        assert_eq!(total_loss(&g, &zeros, &w, 5).1.total, 0.0);
    }

    fn fd_check(x0: &Tensor, f: impl for<'a> Fn(&'a Graph, Var<'a>) -> f64, grad: impl for<'a> Fn(&'a Graph, Var<'a>) -> Var<'a>) {
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let out = grad(&g, x);
        let analytic = g.backward(out).get_or_zero(x);
        let h = 1e-6;
        for i in (0..x0.len()).step_by(7) {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let (gp, gm) = (Graph::new(), Graph::new());
            let num = (f(&gp, gp.leaf(p)) - f(&gm, gm.leaf(m))) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - num).abs() <= 1e-4 * (1.0 + num.abs()), "index {i}: {a} vs {num}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let reference = image(8, 8, 5);
        let x0 = image(8, 8, 6);
        let mut mask = Tensor::ones(&[8, 8]);
        mask.data_mut()[9] = 0.0;
        let pc = |g: &Graph, x: Var<'_>| {
            let r = g.constant(reference.clone());
            let v = WarpedView { warped: x, mask: mask.clone() };
            photometric_consistency_loss(&r, &[v]).unwrap().value.item()
        };
        fd_check(&x0, pc, |g, x| {
            let r = g.constant(reference.clone());
            photometric_consistency_loss(&r, &[WarpedView { warped: x, mask: mask.clone() }]).unwrap().value
        });
        fd_check(
            &x0,
            |g, x| ssim_loss(&g.constant(reference.clone()), &[WarpedView { warped: x, mask: mask.clone() }]).unwrap().value.item(),
            |g, x| ssim_loss(&g.constant(reference.clone()), &[WarpedView { warped: x, mask: mask.clone() }]).unwrap().value,
        );
        let d0 = Tensor::from_fn(&[8, 8], |i| 2.0 + ((i * 13) % 8) as f64 * 0.07);
        fd_check(
            &d0,
            |_, d| smoothness_loss(&d, &reference).unwrap().item(),
            |_, d| smoothness_loss(&d, &reference).unwrap(),
        );
    }
}
