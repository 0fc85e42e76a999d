//! Cascade cost-volume depth network: shared feature pyramid, variance cost
//! volumes, 3D regularisation and soft-argmax regression.

use mvs_autograd::nn::{Conv2d, Conv3d};
use mvs_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, WarpCoefficients};
use crate::imgproc::resample_map;

/// Width of the hypothesis window summed into the confidence map.
pub const CONFIDENCE_WINDOW: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub hypotheses: usize,
    pub channels: usize,
    /// Hypothesis range as a fraction of `depth_max − depth_min`.
    pub range_scale: f64,
    /// Weight of this stage in the image-space losses.
    pub loss_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Coarsest first. Stage `s` of `S` runs at `1/2^(S−1−s)` resolution.
    pub stages: Vec<StageConfig>,
    /// Channels of the first encoder level; doubled at each level.
    pub encoder_channels: usize,
    /// Channels of the first 3D regulariser level; doubled at each level.
    pub regularizer_channels: usize,
    /// Number of resolution levels in the 3D regulariser.
    pub regularizer_levels: usize,
    /// Space the first-stage hypotheses uniformly in inverse depth.
    #[serde(default)]
    pub inverse_depth: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |hypotheses, channels, range_scale, loss_weight| StageConfig { hypotheses, channels, range_scale, loss_weight };
        Self {
            stages: vec![stage(48, 32, 1.0, 0.5), stage(32, 16, 0.5, 1.0), stage(8, 8, 0.125, 2.0)],
            encoder_channels: 8,
            regularizer_channels: 8,
            regularizer_levels: 3,
            inverse_depth: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.hypotheses < 2 || s.channels == 0 {
                return Err(Error::Config(format!("stage {i}: need ≥ 2 hypotheses and ≥ 1 channel")));
            }
            if !(s.range_scale > 0.0 && s.range_scale <= 1.0) {
                return Err(Error::Config(format!("stage {i}: range_scale must lie in (0, 1]")));
            }
            if !(s.loss_weight >= 0.0) {
                return Err(Error::Config(format!("stage {i}: negative loss weight")));
            }
        }
        if self.encoder_channels == 0 || self.regularizer_channels == 0 || self.regularizer_levels == 0 {
            return Err(Error::Config("backbone channel counts and levels must be positive".into()));
        }
        Ok(())
    }

    /// Resolution factor of stage `s` relative to the input image.
    pub fn stage_scale(&self, s: usize) -> f64 {
        0.5f64.powi((self.stages.len() - 1 - s) as i32)
    }

    /// Output size of stage `s` for an `h × w` input.
    pub fn stage_size(&self, s: usize, h: usize, w: usize) -> (usize, usize) {
        let mut size = (h, w);
        for _ in 0..self.stages.len() - 1 - s {
            size = (size.0.div_ceil(2), size.1.div_ceil(2));
        }
        size
    }
}

/// Shared 2D U-Net style encoder with a top-down decoder emitting one feature
/// map per stage.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    encoder: Vec<[Conv2d; 2]>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    out: Vec<Conv2d>,
}

impl FeatureNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let levels = cfg.stages.len();
        let ch = |l: usize| cfg.encoder_channels << l;
        let mut encoder = Vec::new();
        for l in 0..levels {
            let (cin, stride) = if l == 0 { (3, 1) } else { (ch(l - 1), 2) };
            encoder.push([
                Conv2d::new(store, &format!("{name}.enc{l}a"), cin, ch(l), 3, stride, rng),
                Conv2d::new(store, &format!("{name}.enc{l}b"), ch(l), ch(l), 3, 1, rng),
            ]);
        }
        let top = ch(levels - 1);
        let (mut lateral, mut smooth, mut out) = (Vec::new(), Vec::new(), Vec::new());
        for (s, st) in cfg.stages.iter().enumerate() {
            if s > 0 {
                let l = levels - 1 - s;
                lateral.push(Conv2d::new(store, &format!("{name}.lat{s}"), ch(l), top, 1, 1, rng));
                smooth.push(Conv2d::new(store, &format!("{name}.smooth{s}"), top, top, 3, 1, rng));
            }
            out.push(Conv2d::new(store, &format!("{name}.out{s}"), top, st.channels, 1, 1, rng));
        }
        Self { encoder, lateral, smooth, out }
    }

    /// Feature maps `[C_s, H_s, W_s]` for one `[3, H, W]` image, coarsest first.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, image: &Var<'g>) -> Vec<Var<'g>> {
        let mut skips = Vec::new();
        let mut x = *image;
        for [a, b] in &self.encoder {
            x = a.forward(g, store, &x).relu();
            x = b.forward(g, store, &x).relu();
            skips.push(x);
        }
        let levels = skips.len();
        let mut top = skips[levels - 1];
        let mut outs = vec![self.out[0].forward(g, store, &top)];
        for s in 1..self.out.len() {
            let skip = skips[levels - 1 - s];
            let sh = skip.shape();
            let up = top.upsample_nearest(&[sh[1], sh[2]]);
            top = self.smooth[s - 1]
                .forward(g, store, &up.add(&self.lateral[s - 1].forward(g, store, &skip)))
                .relu();
            outs.push(self.out[s].forward(g, store, &top));
        }
        outs
    }
}

/// 3D encoder-decoder with skip connections over `[C, M, H, W]` volumes.
#[derive(Clone, Debug)]
pub struct Regularizer {
    down: Vec<Conv3d>,
    up: Vec<Conv3d>,
    head: Conv3d,
}

impl Regularizer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        base: usize,
        levels: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let ch = |l: usize| base << l;
        let mut down = Vec::new();
        for l in 0..levels {
            let (cin, stride) = if l == 0 { (inputs, 1) } else { (ch(l - 1), 2) };
            down.push(Conv3d::new(store, &format!("{name}.down{l}"), cin, ch(l), 3, stride, rng));
        }
        let mut up = Vec::new();
        for l in (0..levels.saturating_sub(1)).rev() {
            up.push(Conv3d::new(store, &format!("{name}.up{l}"), ch(l + 1), ch(l), 3, 1, rng));
        }
        let head = Conv3d::new(store, &format!("{name}.head"), ch(0), outputs, 3, 1, rng);
        Self { down, up, head }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let mut skips = Vec::new();
        let mut h = *x;
        for conv in &self.down {
            h = conv.forward(g, store, &h).relu();
            skips.push(h);
        }
        skips.pop();
        for conv in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            let sh = skip.shape();
            let upsampled = h.upsample_nearest(&[sh[1], sh[2], sh[3]]);
            h = conv.forward(g, store, &upsampled).relu().add(&skip);
        }
        self.head.forward(g, store, &h)
    }
}

/// Per-pixel depth hypotheses `[M, H, W]`, increasing along `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHypotheses {
    pub values: Tensor,
}

impl DepthHypotheses {
    /// The same `M` values at every pixel of an `h × w` map.
    pub fn global(depths: &[f64], h: usize, w: usize) -> Result<Self> {
        if depths.len() < 2 || depths.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::InvalidInput("hypotheses must be ≥ 2 strictly increasing values".into()));
        }
        let hw = h * w;
        Ok(Self { values: Tensor::from_fn(&[depths.len(), h, w], |i| depths[i / hw]) })
    }

    /// Uniform in depth (or inverse depth) over `[lo, hi]`.
    pub fn spanning(lo: f64, hi: f64, m: usize, inverse: bool, h: usize, w: usize) -> Result<Self> {
        if m < 2 || !(0.0 < lo && lo < hi) {
            return Err(Error::InvalidInput(format!("bad hypothesis span [{lo}, {hi}] with {m} values")));
        }
        let depths: Vec<f64> = (0..m)
            .map(|k| {
                let a = k as f64 / (m - 1) as f64;
                if inverse {
                    1.0 / (1.0 / lo + a * (1.0 / hi - 1.0 / lo))
                } else {
                    lo + a * (hi - lo)
                }
            })
            .collect();
        Self::global(&depths, h, w)
    }

    /// `m` values per pixel with spacing `range/(m−1)`, centred on `center`
    /// where possible and shifted to stay inside `[lo, hi]`.
    pub fn around(center: &Tensor, range: f64, m: usize, lo: f64, hi: f64) -> Result<Self> {
        let (h, w) = (center.dim(0), center.dim(1));
        if m < 2 || !(range > 0.0) {
            return Err(Error::InvalidInput("per-pixel hypotheses need m ≥ 2 and a positive range".into()));
        }
        let range = range.min(hi - lo);
        let step = range / (m - 1) as f64;
        let hw = h * w;
        let starts: Vec<f64> = center
            .data()
            .iter()
            .map(|&c| {
                let c = if c.is_finite() { c } else { 0.5 * (lo + hi) };
                (c - 0.5 * range).clamp(lo, hi - range)
            })
            .collect();
        Ok(Self { values: Tensor::from_fn(&[m, h, w], |i| starts[i % hw] + (i / hw) as f64 * step) })
    }

    pub fn count(&self) -> usize {
        self.values.dim(0)
    }

    pub fn height(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }
}

/// Source-view sampling coordinates `[M·H·W, 2]` of every hypothesis voxel.
fn volume_coords(reference: &Camera, src: &Camera, hyps: &DepthHypotheses) -> Result<Tensor> {
    let (m, h, w) = (hyps.count(), hyps.height(), hyps.width());
    let coef = WarpCoefficients::new(reference, src, h, w)?;
    let hw = h * w;
    let mut out = vec![f64::NAN; 2 * m * hw];
    for (k, pair) in out.chunks_mut(2).enumerate() {
        if let Some((x, y)) = coef.project(k % hw, hyps.values.data()[k]) {
            pair[0] = x;
            pair[1] = y;
        }
    }
    Ok(Tensor::new(&[m * hw, 2], out))
}

/// Warp a `[C, Hs, Ws]` feature map onto the reference hypothesis planes,
/// giving `[C, M, H, W]`. Samples outside the source image are zero.
pub fn warp_feature_volume<'g>(feature: &Var<'g>, reference: &Camera, src: &Camera, hyps: &DepthHypotheses) -> Result<Var<'g>> {
    let coords = feature.graph().constant(volume_coords(reference, src, hyps)?);
    let c = feature.shape()[0];
    Ok(feature.grid_sample_2d(&coords).reshape(&[c, hyps.count(), hyps.height(), hyps.width()]))
}

/// Variance cost volume `[C, M, H, W]`. `features[0]` and `cams[0]` belong
/// to the reference view; with `include_reference = false` only the source
/// volumes take part and the denominator is their count.
pub fn build_cost_volume<'g>(
    features: &[Var<'g>],
    cams: &[Camera],
    hyps: &DepthHypotheses,
    include_reference: bool,
) -> Result<Var<'g>> {
    if features.len() != cams.len() {
        return Err(Error::Shape(format!("{} feature maps for {} cameras", features.len(), cams.len())));
    }
    let participating = if include_reference { features.len() } else { features.len().saturating_sub(1) };
    if participating < 2 {
        return Err(Error::InvalidInput(format!(
            "variance needs at least 2 volumes, got {participating} (include_reference = {include_reference})"
        )));
    }
    let (m, h, w) = (hyps.count(), hyps.height(), hyps.width());
    let rs = features[0].shape();
    if rs[1] != h || rs[2] != w {
        return Err(Error::Shape(format!("reference features {rs:?} do not match hypotheses {h}x{w}")));
    }
    let mut volumes = Vec::with_capacity(participating);
    if include_reference {
        let g = features[0].graph();
        let ones = g.constant(Tensor::ones(&[1, m, 1, 1]));
        volumes.push(features[0].reshape(&[rs[0], 1, h, w]).mul(&ones));
    }
    for (f, cam) in features.iter().zip(cams).skip(1) {
        if f.shape()[0] != rs[0] {
            return Err(Error::Shape("feature channel counts differ across views".into()));
        }
        volumes.push(warp_feature_volume(f, &cams[0], cam, hyps)?);
    }
    Ok(Var::variance(&volumes))
}

/// Per-pixel depth, confidence and probabilities of one stage.
pub struct DepthPrediction<'g> {
    /// `[H, W]`.
    pub depth: Var<'g>,
    /// `[H, W]` in `[0, 1]`.
    pub confidence: Tensor,
    /// `[M, H, W]`, summing to one over `M`.
    pub probability: Var<'g>,
    pub hypotheses: DepthHypotheses,
}

/// Soft-argmax regression from logits `[M, H, W]`.
pub fn regress_from_logits<'g>(logits: &Var<'g>, hyps: &DepthHypotheses) -> DepthPrediction<'g> {
    let g = logits.graph();
    let probability = logits.softmax(0);
    let depth = probability.mul(&g.constant(hyps.values.clone())).sum_axis(0, false);
    let confidence = confidence_map(&probability.value());
    DepthPrediction { depth, confidence, probability, hypotheses: hyps.clone() }
}

/// Probability mass in the [`CONFIDENCE_WINDOW`] hypotheses around the
/// per-pixel argmax; the window is shifted inward at the ends of the range.
pub fn confidence_map(prob: &Tensor) -> Tensor {
    let (m, h, w) = (prob.dim(0), prob.dim(1), prob.dim(2));
    let hw = h * w;
    let win = CONFIDENCE_WINDOW.min(m);
    Tensor::from_fn(&[h, w], |p| {
        let col = |k: usize| prob.data()[k * hw + p];
        let best = (0..m).fold(0, |b, k| if col(k) > col(b) { k } else { b });
        let start = best.saturating_sub((win - 1) / 2).min(m - win);
        (start..start + win).map(col).sum::<f64>().min(1.0)
    })
}

/// Everything the losses and renderer need from one cascade pass.
pub struct CascadeOutput<'g> {
    /// Coarsest first.
    pub stages: Vec<DepthPrediction<'g>>,
    /// Per view, per stage feature maps.
    pub features: Vec<Vec<Var<'g>>>,
    /// Per stage, the cameras rescaled to that stage's resolution.
    pub cameras: Vec<Vec<Camera>>,
}

impl<'g> CascadeOutput<'g> {
    pub fn finest(&self) -> &DepthPrediction<'g> {
        self.stages.last().expect("at least one stage")
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub features: FeatureNet,
    pub regularizers: Vec<Regularizer>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let features = FeatureNet::new(store, "backbone.features", config, rng);
        let regularizers = config
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| {
                Regularizer::new(
                    store,
                    &format!("backbone.reg{s}"),
                    st.channels,
                    config.regularizer_channels,
                    config.regularizer_levels,
                    1,
                    rng,
                )
            })
            .collect();
        Ok(Self { config: config.clone(), features, regularizers })
    }

    /// Per-view feature pyramids (coarsest stage first).
    pub fn extract_features<'g>(&self, g: &'g Graph, store: &ParamStore, images: &[Var<'g>]) -> Result<Vec<Vec<Var<'g>>>> {
        let Some(first) = images.first() else {
            return Err(Error::InvalidInput("no images".into()));
        };
        let shape = first.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("images must be [3, H, W], got {shape:?}")));
        }
        if let Some(bad) = images.iter().find(|im| im.shape() != shape) {
            return Err(Error::Shape(format!("image sizes differ: {:?} vs {shape:?}", bad.shape())));
        }
        Ok(images.iter().map(|im| self.features.forward(g, store, im)).collect())
    }

    /// Coarse-to-fine depth for view 0 of `images` using the others as sources.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, images: &[Var<'g>], cams: &[Camera]) -> Result<CascadeOutput<'g>> {
        if images.len() < 2 || images.len() != cams.len() {
            return Err(Error::InvalidInput(format!(
                "cascade needs ≥ 2 views with one camera each, got {} images and {} cameras",
                images.len(),
                cams.len()
            )));
        }
        let features = self.extract_features(g, store, images)?;
        let (lo, hi) = (cams[0].depth_min, cams[0].depth_max);
        let full = hi - lo;
        let coarse_interval = full / (self.config.stages[0].hypotheses - 1) as f64;
        let mut stages: Vec<DepthPrediction<'g>> = Vec::new();
        let mut cameras = Vec::new();
        for (s, st) in self.config.stages.iter().enumerate() {
            let scale = self.config.stage_scale(s);
            let stage_cams: Vec<Camera> = cams.iter().map(|c| c.scaled(scale)).collect();
            let fs = features[0][s].shape();
            let (h, w) = (fs[1], fs[2]);
            let hyps = match stages.last() {
                None => DepthHypotheses::spanning(lo, hi, st.hypotheses, self.config.inverse_depth, h, w)?,
                Some(prev) => {
                    let pv = prev.depth.value();
                    let factor = self.config.stage_scale(s - 1) / scale;
                    let center = resample_map(&pv, h, w, factor);
                    let mut range = st.range_scale * full;
                    if range < coarse_interval {
                        log::warn!("stage {s}: hypothesis range {range} below one coarse interval, clamped to {coarse_interval}");
                        range = coarse_interval;
                    }
                    DepthHypotheses::around(&center, range, st.hypotheses, lo, hi)?
                }
            };
            let stage_feats: Vec<Var<'g>> = features.iter().map(|v| v[s]).collect();
            let volume = build_cost_volume(&stage_feats, &stage_cams, &hyps, true)?;
            let logits = self.regularizers[s].forward(g, store, &volume);
            let logits = logits.reshape(&[hyps.count(), h, w]);
            stages.push(regress_from_logits(&logits, &hyps));
            cameras.push(stage_cams);
        }
        Ok(CascadeOutput { stages, features, cameras })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use nalgebra::{Matrix3, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn ring_cameras(n: usize, h: usize, w: usize) -> Vec<Camera> {
        let f = 0.9 * w as f64;
        let k = Matrix3::new(f, 0.0, (w as f64 - 1.0) / 2.0, 0.0, f, (h as f64 - 1.0) / 2.0, 0.0, 0.0, 1.0);
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.15;
                let eye = Vector3::new(0.6 * a.sin(), 0.1 * i as f64 % 0.3, 0.6 * (1.0 - a.cos()));
                let (r, t) = look_at(&eye, &Vector3::new(0.0, 0.0, 4.0), &Vector3::new(0.0, -1.0, 0.0));
                Camera::new(k, r, t, 2.0, 6.0).unwrap()
            })
            .collect()
    }

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            stages: vec![
                StageConfig { hypotheses: 8, channels: 4, range_scale: 1.0, loss_weight: 0.5 },
                StageConfig { hypotheses: 4, channels: 4, range_scale: 0.25, loss_weight: 1.0 },
            ],
            encoder_channels: 4,
            regularizer_channels: 4,
            regularizer_levels: 2,
            inverse_depth: false,
        }
    }

    fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_stage_shapes_on_64x80() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = FeatureNet::new(&mut store, "f", &cfg, &mut rng);
        let g = Graph::new();
        let img = g.constant(random_tensor(&[3, 64, 80], &mut rng));
        let outs = net.forward(&g, &store, &img);
        let shapes: Vec<Vec<usize>> = outs.iter().map(|o| o.shape()).collect();
        assert_eq!(shapes, vec![vec![32, 16, 20], vec![16, 32, 40], vec![8, 64, 80]]);
        let hyps: Vec<usize> = cfg.stages.iter().map(|s| s.hypotheses).collect();
        assert_eq!(hyps, vec![48, 32, 8]);
        assert_eq!(cfg.stage_size(0, 64, 80), (16, 20));
    }

    #[test]
    fn shared_encoder_is_view_independent() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        let g = Graph::new();
        let a = random_tensor(&[3, 8, 12], &mut rng);
        let b = random_tensor(&[3, 8, 12], &mut rng);
        let imgs = [g.constant(a.clone()), g.constant(a.clone()), g.constant(b.clone())];
        let feats = bb.extract_features(&g, &store, &imgs).unwrap();
        for s in 0..2 {
            assert_eq!(feats[0][s].value(), feats[1][s].value());
        }
        let swapped = bb.extract_features(&g, &store, &[imgs[2], imgs[0]]).unwrap();
        assert_eq!(swapped[0][1].value(), feats[2][1].value());
        let bad = g.constant(Tensor::zeros(&[3, 8, 10]));
        assert!(bb.extract_features(&g, &store, &[imgs[0], bad]).is_err());
    }

    #[test]
    fn cost_volume_trivial_cases() {
        let g = Graph::new();
        let cams = ring_cameras(3, 6, 8);
        let hyps = DepthHypotheses::spanning(2.0, 6.0, 4, false, 6, 8).unwrap();
        // Identical cameras and features give zero variance.
        let f = g.constant(Tensor::from_fn(&[2, 6, 8], |i| (i as f64 * 0.37).sin()));
        let same = vec![cams[0].clone(); 3];
        let v = build_cost_volume(&[f, f, f], &same, &hyps, true).unwrap();
        assert!(v.value().max_abs() < 1e-12);
        // Too few participants.
        assert!(build_cost_volume(&[f], &same[..1], &hyps, true).is_err());
        assert!(build_cost_volume(&[f, f], &same[..2], &hyps, false).is_err());
        // ±v gives v².
        let a = Var::variance(&[g.constant(Tensor::scalar(1.5)), g.constant(Tensor::scalar(-1.5))]);
        assert_eq!(a.item(), 2.25);
    }

    /// Independent loop: project each voxel by explicit back-projection and
    /// sample bilinearly by hand.
    fn brute_force_volume(feats: &[Tensor], cams: &[Camera], hyps: &DepthHypotheses, include_ref: bool) -> Vec<f64> {
        let (m, h, w) = (hyps.count(), hyps.height(), hyps.width());
        let c = feats[0].dim(0);
        let mut out = vec![0.0; c * m * h * w];
        for ch in 0..c {
            for k in 0..m {
                for y in 0..h {
                    for x in 0..w {
                        let d = hyps.values.at(&[k, y, x]);
                        let mut vals = Vec::new();
                        if include_ref {
                            vals.push(feats[0].at(&[ch, y, x]));
                        }
                        for (f, cam) in feats.iter().zip(cams).skip(1) {
                            let world = crate::geometry::back_project(&nalgebra::Vector2::new(x as f64, y as f64), d, &cams[0]).unwrap();
                            let p = crate::geometry::project_to_view(&world, cam);
                            let (fh, fw) = (f.dim(1), f.dim(2));
                            let mut s = 0.0;
                            if !p.behind_camera() {
                                let (x0, y0) = (p.pixel.x.floor(), p.pixel.y.floor());
                                for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                                    let (cx, cy) = (x0 + dx, y0 + dy);
                                    if cx >= 0.0 && cy >= 0.0 && cx < fw as f64 && cy < fh as f64 {
                                        let wx = 1.0 - (p.pixel.x - cx).abs();
                                        let wy = 1.0 - (p.pixel.y - cy).abs();
                                        s += wx * wy * f.at(&[ch, cy as usize, cx as usize]);
                                    }
                                }
                            }
                            vals.push(s);
                        }
                        let n = vals.len() as f64;
                        let mean = vals.iter().sum::<f64>() / n;
                        out[((ch * m + k) * h + y) * w + x] = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cost_volume_matches_brute_force_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cams = ring_cameras(4, 8, 8);
        let hyps = DepthHypotheses::spanning(2.0, 6.0, 4, false, 8, 8).unwrap();
        let feats: Vec<Tensor> = (0..4).map(|_| random_tensor(&[4, 8, 8], &mut rng)).collect();
        for include in [true, false] {
            let g = Graph::new();
            let vars: Vec<Var> = feats.iter().map(|f| g.constant(f.clone())).collect();
            let got = build_cost_volume(&vars, &cams, &hyps, include).unwrap().value();
            let want = brute_force_volume(&feats, &cams, &hyps, include);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
                assert!(*a >= 0.0);
            }
            let perm = [0, 3, 1, 2];
            let pv: Vec<Var> = perm.iter().map(|&i| vars[i]).collect();
            let pc: Vec<Camera> = perm.iter().map(|&i| cams[i].clone()).collect();
            let again = build_cost_volume(&pv, &pc, &hyps, include).unwrap().value();
            for (a, b) in got.data().iter().zip(again.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_argmax_delta_and_uniform() {
        let g = Graph::new();
        let hyps = DepthHypotheses::spanning(2.0, 9.0, 8, false, 1, 2).unwrap();
        let mut logits = Tensor::zeros(&[8, 1, 2]);
        logits.set(&[5, 0, 0], 200.0);
        let pred = regress_from_logits(&g.constant(logits), &hyps);
        assert!((pred.depth.value().data()[0] - 7.0).abs() < 1e-12);
        assert!((pred.confidence.data()[0] - 1.0).abs() < 1e-12);
        assert!((pred.depth.value().data()[1] - 5.5).abs() < 1e-12);
        assert!((pred.confidence.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_matches_explicit_sum_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hyps = DepthHypotheses::spanning(1.0, 5.0, 6, true, 3, 3).unwrap();
        let logits = Tensor::from_fn(&[6, 3, 3], |_| rng.random_range(-3.0..3.0));
        let g = Graph::new();
        let pred = regress_from_logits(&g.constant(logits.clone()), &hyps);
        for p in 0..9 {
            let col: Vec<f64> = (0..6).map(|k| logits.data()[k * 9 + p]).collect();
            let z: f64 = col.iter().map(|v| v.exp()).sum();
            let want: f64 = (0..6).map(|k| col[k].exp() / z * hyps.values.data()[k * 9 + p]).sum();
            assert!((pred.depth.value().data()[p] - want).abs() < 1e-9);
            let total: f64 = (0..6).map(|k| pred.probability.value().data()[k * 9 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let mut bumped = logits.clone();
        bumped.data_mut()[4 * 9] += 0.5;
        let again = regress_from_logits(&g.constant(bumped), &hyps);
        let (d0, d1) = (pred.depth.value().data()[0], again.depth.value().data()[0]);
        let target = hyps.values.data()[4 * 9];
        assert!((d1 - target).abs() < (d0 - target).abs());
        assert!(again.probability.value().data()[4 * 9] > pred.probability.value().data()[4 * 9]);
    }

    #[test]
    fn hypotheses_around_stay_in_range_and_centre() {
        let center = Tensor::new(&[1, 3], vec![2.05, 4.0, 5.99]);
        let hyps = DepthHypotheses::around(&center, 1.0, 5, 2.0, 6.0).unwrap();
        let col = |p: usize| -> Vec<f64> { (0..5).map(|k| hyps.values.data()[k * 3 + p]).collect() };
        assert_eq!(col(0)[0], 2.0);
        assert!((col(1)[2] - 4.0).abs() < 1e-12);
        assert!((col(2)[4] - 6.0).abs() < 1e-12);
        for p in 0..3 {
            assert!(col(p).windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn cascade_runs_and_refines_window_around_previous_depth() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bb = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        let cams = ring_cameras(3, 8, 12);
        let g = Graph::new();
        let imgs: Vec<Var> = (0..3).map(|_| g.constant(random_tensor(&[3, 8, 12], &mut rng))).collect();
        let out = bb.forward(&g, &store, &imgs, &cams).unwrap();
        assert_eq!(out.stages.len(), 2);
        let d0 = out.stages[0].depth.value();
        let h1 = &out.stages[1].hypotheses;
        assert_eq!(h1.values.shape(), &[4, 8, 12]);
        // Stage-2 pixel (2y, 2x) sits on stage-1 pixel (y, x).
        let step = h1.values.at(&[1, 0, 0]) - h1.values.at(&[0, 0, 0]);
        for (y, x) in [(1, 1), (2, 3)] {
            let c = d0.at(&[y, x]);
            let lo = h1.values.at(&[0, 2 * y, 2 * x]);
            let hi = h1.values.at(&[3, 2 * y, 2 * x]);
            if lo > 2.0 && hi < 6.0 {
                assert!(((lo + hi) / 2.0 - c).abs() <= 0.5 * step + 1e-12);
            }
        }
        for st in &out.stages {
            for &d in st.depth.value().data() {
                assert!((2.0..=6.0).contains(&d));
            }
        }
    }

    #[test]
    fn depth_gradient_wrt_images_matches_finite_differences() {
        let cfg = BackboneConfig {
            stages: vec![StageConfig { hypotheses: 4, channels: 3, range_scale: 1.0, loss_weight: 1.0 }],
            encoder_channels: 3,
            regularizer_channels: 2,
            regularizer_levels: 2,
            inverse_depth: false,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bb = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        let cams = ring_cameras(2, 6, 6);
        let imgs: Vec<Tensor> = (0..2).map(|_| random_tensor(&[3, 6, 6], &mut rng)).collect();
        let eval = |imgs: &[Tensor]| {
            let g = Graph::new();
            let v: Vec<Var> = imgs.iter().map(|t| g.constant(t.clone())).collect();
            bb.forward(&g, &store, &v, &cams).unwrap().finest().depth.value().sum()
        };
        let g = Graph::new();
        let v: Vec<Var> = imgs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = bb.forward(&g, &store, &v, &cams).unwrap();
        let grads = g.backward(out.finest().depth.sum());
        let mut checked = 0;
        for view in 0..2 {
            let an = grads.get(v[view]).unwrap();
            for idx in [7, 40, 77, 100] {
                let step = 1e-6;
                let mut up = imgs.clone();
                up[view].data_mut()[idx] += step;
                let mut dn = imgs.clone();
                dn[view].data_mut()[idx] -= step;
                let num = (eval(&up) - eval(&dn)) / (2.0 * step);
                let a = an.data()[idx];
                let scale = a.abs().max(num.abs());
                if scale < 1e-7 {
                    continue;
                }
                assert!((a - num).abs() / scale < 1e-3, "view {view} idx {idx}: {a} vs {num}");
                checked += 1;
            }
        }
        assert!(checked >= 4);
    }
}
