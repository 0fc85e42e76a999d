//! Rendering-consistency branch: a source-only implicit volume, mixture ray
//! sampling around the backbone depth, a radiance MLP and volume compositing.

pub mod composite;
pub mod mlp;
pub mod sampling;

use mvs_autograd::{Graph, ParamStore, Tensor, Var};
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{warp_feature_volume, BackboneConfig, DepthHypotheses, Regularizer};
use crate::error::{Error, Result};
use crate::geometry::{warp_coordinates, Camera, WarpCoefficients};

pub use composite::{composite, Composite, Transmittance};
pub use mlp::{encoded_width, positional_encoding, RadianceMlp};
pub use sampling::{mixture_sample, prior_spread, sample_rays, MixtureSamples};

/// Ray counts exercised by the configuration checks.
pub const SUPPORTED_RAY_COUNTS: [usize; 4] = [256, 1024, 4096, 8192];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    pub rays: usize,
    pub samples: usize,
    pub pos_bands: usize,
    pub dir_bands: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Channels of the implicit feature volume.
    pub volume_channels: usize,
    /// Length of the last compositing interval.
    pub far_cap: f64,
    /// Use the inclusive transmittance prefix.
    #[serde(default)]
    pub literal_transmittance: bool,
    /// Gaussian-uniform mixture sampling; all-uniform when off.
    pub gaussian_uniform: bool,
    /// Rays with accumulated weight above this enter the depth consistency term.
    pub gate: f64,
    /// Training renders at most this many ray samples per tape; larger ray
    /// batches are split into chunks. 0 disables chunking.
    pub chunk_points: usize,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            rays: 1024,
            samples: 128,
            pos_bands: 10,
            dir_bands: 4,
            hidden: 128,
            layers: 4,
            volume_channels: 8,
            far_cap: 1e10,
            literal_transmittance: false,
            gaussian_uniform: true,
            gate: 0.5,
            chunk_points: 16384,
        }
    }
}

impl RendererConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays == 0 {
            return Err(Error::Config("renderer.rays must be positive".into()));
        }
        if self.samples < 2 || self.samples % 2 != 0 {
            return Err(Error::Config(format!("renderer.samples must be even and ≥ 2, got {}", self.samples)));
        }
        if self.hidden == 0 || self.layers == 0 || self.volume_channels == 0 {
            return Err(Error::Config("renderer network sizes must be positive".into()));
        }
        if !(self.far_cap > 0.0) || !(0.0..=1.0).contains(&self.gate) {
            return Err(Error::Config("renderer.far_cap must be > 0 and gate in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn transmittance(&self) -> Transmittance {
        if self.literal_transmittance {
            Transmittance::Inclusive
        } else {
            Transmittance::Exclusive
        }
    }
}

/// Inputs for rendering reference pixels.
pub struct RenderScene<'a, 'g> {
    /// Full-resolution `[3, H, W]` images, reference first.
    pub images: &'a [Tensor],
    /// Full-resolution cameras, reference first.
    pub cameras: &'a [Camera],
    /// Backbone depth `[H, W]` used as the sampling prior.
    pub prior_depth: Var<'g>,
    /// Implicit volume `[C, M, H_v, W_v]`.
    pub volume: Var<'g>,
    /// Resolution of the volume relative to the images.
    pub volume_scale: f64,
    /// The volume's hypothesis planes are uniform in inverse depth.
    pub inverse_depth: bool,
}

/// Rendered rays and everything the losses need.
pub struct RenderOutput<'g> {
    /// Flat reference pixel indices of the rays.
    pub pixels: Vec<usize>,
    /// `[R, 3]`.
    pub rgb: Var<'g>,
    /// `[R]`.
    pub depth: Var<'g>,
    /// `[R, 3]` reference colours.
    pub target: Tensor,
    /// `[R]` prior depths, differentiable.
    pub prior: Var<'g>,
    /// `[R, K]` sample distances.
    pub t: Var<'g>,
    pub weights: Tensor,
    pub transmittance: Tensor,
    pub opacity: Vec<f64>,
    /// Ray passes the opacity gate.
    pub gate: Vec<bool>,
    pub samples: Vec<MixtureSamples>,
    /// Rays whose prior fell outside the depth range.
    pub fallback_rays: usize,
}

#[derive(Clone, Debug)]
pub struct Renderer {
    pub config: RendererConfig,
    pub num_sources: usize,
    pub volume_net: Regularizer,
    pub mlp: RadianceMlp,
}

/// `R` distinct pixel indices when `R ≤ H·W`, otherwise drawn with replacement.
pub fn select_pixels(h: usize, w: usize, r: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = h * w;
    if r <= n {
        let mut idx = rand::seq::index::sample(rng, n, r).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..r).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Unit direction of the ray through pixel `(x, y)`:
/// `normalize(Rᵀ K⁻¹ (x, y, 1))`.
pub fn ray_direction(cam: &Camera, x: f64, y: f64) -> Result<Vector3<f64>> {
    Ok(cam.pixel_ray(x, y)?.normalize())
}

impl Renderer {
    pub fn new(
        store: &mut ParamStore,
        config: &RendererConfig,
        backbone: &BackboneConfig,
        num_sources: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if num_sources < 2 {
            return Err(Error::Config(format!("renderer needs ≥ 2 source views, got {num_sources}")));
        }
        let volume_net = Regularizer::new(
            store,
            "renderer.volume",
            backbone.stages[0].channels,
            backbone.regularizer_channels,
            backbone.regularizer_levels,
            config.volume_channels,
            rng,
        );
        let point_inputs = encoded_width(3, config.pos_bands) + config.volume_channels;
        let view_inputs = encoded_width(3, config.dir_bands) + 3 * num_sources;
        let mlp = RadianceMlp::new(store, "renderer.mlp", point_inputs, view_inputs, config.hidden, config.layers, rng);
        Ok(Self { config: config.clone(), num_sources, volume_net, mlp })
    }

    /// Variance of the source-view feature volumes only (denominator equals
    /// their count), `[C, M, H, W]`.
    pub fn source_variance<'g>(
        reference: &Camera,
        src_features: &[Var<'g>],
        src_cams: &[Camera],
        hyps: &DepthHypotheses,
    ) -> Result<Var<'g>> {
        if src_features.len() < 2 || src_features.len() != src_cams.len() {
            return Err(Error::InvalidInput(format!(
                "implicit volume needs ≥ 2 source views with cameras, got {} / {}",
                src_features.len(),
                src_cams.len()
            )));
        }
        let vols = src_features
            .iter()
            .zip(src_cams)
            .map(|(f, c)| warp_feature_volume(f, reference, c, hyps))
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::variance(&vols))
    }

    /// `F = U(C′)` on the reference frustum.
    pub fn build_implicit_volume<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        reference: &Camera,
        src_features: &[Var<'g>],
        src_cams: &[Camera],
        hyps: &DepthHypotheses,
    ) -> Result<Var<'g>> {
        let c_prime = Self::source_variance(reference, src_features, src_cams, hyps)?;
        Ok(self.volume_net.forward(g, store, &c_prime))
    }

    /// Render `config.rays` random reference pixels.
    pub fn render<'g>(&self, g: &'g Graph, store: &ParamStore, scene: &RenderScene<'_, 'g>, rng: &mut impl Rng) -> Result<RenderOutput<'g>> {
        let (h, w) = (scene.images[0].dim(1), scene.images[0].dim(2));
        let pixels = select_pixels(h, w, self.config.rays, rng);
        self.render_pixels(g, store, scene, &pixels, rng)
    }

    /// Render the given flat reference pixel indices.
    pub fn render_pixels<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        scene: &RenderScene<'_, 'g>,
        pixels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<RenderOutput<'g>> {
        let cfg = &self.config;
        if scene.images.len() != self.num_sources + 1 || scene.cameras.len() != scene.images.len() {
            return Err(Error::InvalidInput(format!(
                "renderer built for {} sources, got {} images and {} cameras",
                self.num_sources,
                scene.images.len(),
                scene.cameras.len()
            )));
        }
        let reference = &scene.cameras[0];
        let (h, w) = (scene.images[0].dim(1), scene.images[0].dim(2));
        let (t_n, t_f) = (reference.depth_min, reference.depth_max);
        let (r, k) = (pixels.len(), cfg.samples);
        let p = r * k;
        let xy: Vec<(f64, f64)> = pixels.iter().map(|&i| ((i % w) as f64, (i / w) as f64)).collect();

        let prior = scene.prior_depth.reshape(&[h * w, 1]).index_select(pixels).reshape(&[r]);
        let (t, samples) = sample_rays(&prior, t_n, t_f, k, cfg.gaussian_uniform, rng)?;
        let fallback_rays = samples.iter().filter(|s| s.fallback).count();
        if fallback_rays > 0 {
            log::debug!("{fallback_rays} of {r} rays had a prior outside the depth range");
        }
        let t_flat = t.reshape(&[p, 1]);

        // Volume features at (x, y, hypothesis index).
        let vshape = scene.volume.shape();
        let m = vshape[1];
        let idx = if scene.inverse_depth {
            let ones = g.constant(Tensor::ones(&[p, 1]));
            let s = (m - 1) as f64 / (1.0 / t_f - 1.0 / t_n);
            ones.div(&t_flat).add_scalar(-1.0 / t_n).mul_scalar(s)
        } else {
            t_flat.add_scalar(-t_n).mul_scalar((m - 1) as f64 / (t_f - t_n))
        };
        let vxy = Tensor::from_fn(&[p, 2], |i| {
            let (x, y) = xy[i / (2 * k)];
            scene.volume_scale * if i % 2 == 0 { x } else { y }
        });
        let vcoords = Var::concat(&[g.constant(vxy), idx], 1);
        let feat = scene.volume.grid_sample_3d(&vcoords).t();

        // Source colours at the projections of every sample.
        let sample_xy: Vec<(f64, f64)> = xy.iter().flat_map(|&q| std::iter::repeat_n(q, k)).collect();
        let mut colours = Vec::with_capacity(self.num_sources);
        for (img, cam) in scene.images.iter().zip(scene.cameras).skip(1) {
            let coef = WarpCoefficients::for_pixels(reference, cam, &sample_xy)?;
            let (coords, _) = warp_coordinates(&coef, &t_flat, img.dim(1), img.dim(2));
            colours.push(g.constant(img.clone()).grid_sample_2d(&coords));
        }
        let ell = Var::concat(&colours, 0).t();

        // Frustum-normalised position in [-1, 1]³ and encodings.
        let nxy = Tensor::from_fn(&[p, 2], |i| {
            let (x, y) = xy[i / (2 * k)];
            if i % 2 == 0 {
                2.0 * x / (w.max(2) - 1) as f64 - 1.0
            } else {
                2.0 * y / (h.max(2) - 1) as f64 - 1.0
            }
        });
        let nz = t_flat.add_scalar(-t_n).mul_scalar(2.0 / (t_f - t_n)).add_scalar(-1.0);
        let pos = positional_encoding(&Var::concat(&[g.constant(nxy), nz], 1), cfg.pos_bands);
        let mut dirs = Vec::with_capacity(p * 3);
        for &(x, y) in &xy {
            let d = ray_direction(reference, x, y)?;
            for _ in 0..k {
                dirs.extend([d.x, d.y, d.z]);
            }
        }
        let dir_enc = positional_encoding(&g.constant(Tensor::new(&[p, 3], dirs)), cfg.dir_bands);

        let point_in = Var::concat(&[pos, feat], 1);
        let view_in = Var::concat(&[dir_enc, ell], 1);
        let (sigma, color) = self.mlp.forward(g, store, &point_in, &view_in);
        let comp = composite(&sigma.reshape(&[r, k]), &color.reshape(&[r, k, 3]), &t, cfg.far_cap, cfg.transmittance())?;

        let (hw, refimg) = (h * w, &scene.images[0]);
        let target = Tensor::from_fn(&[r, 3], |i| refimg.data()[(i % 3) * hw + pixels[i / 3]]);
        let gate = comp.opacity.iter().map(|&o| o > cfg.gate).collect();
        Ok(RenderOutput {
            pixels: pixels.to_vec(),
            rgb: comp.rgb,
            depth: comp.depth,
            target,
            prior,
            t,
            weights: comp.weights,
            transmittance: comp.transmittance,
            opacity: comp.opacity,
            gate,
            samples,
            fallback_rays,
        })
    }
}
