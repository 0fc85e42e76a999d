//! Joint training of the backbone and the rendering branch, checkpoints,
//! and backbone-only inference.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mvs_autograd::optim::{clip_global_norm, global_norm, Adam};
use mvs_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::pfm::write_pfm;
use crate::data::{load_mvs_scene, MvsScene};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::imgproc::pyramid;
use crate::losses::{
    data_augmentation_loss, depth_rendering_consistency_loss, photometric_consistency_loss, reference_view_synthesis_loss,
    smoothness_loss, ssim_loss, total_loss, warp_sources, LossBreakdown, LossTerms,
};
use crate::renderer::{RenderScene, Renderer};

pub const CHECKPOINT_FORMAT: u32 = 1;
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs from which the rate is multiplied by `decay_factor` once more.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Optimizer steps per epoch; 0 means one pass over all samples.
    pub iters_per_epoch: usize,
    /// Samples whose gradients are averaged per step.
    pub batch_size: usize,
    /// Views per training sample, reference included.
    pub n_views: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Only `"cpu"` is available.
    pub device: String,
    /// Write a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    /// Abort when a larger fraction of an epoch's steps has a non-finite loss.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 1e-4,
            decay_epochs: vec![10, 12, 14],
            decay_factor: 0.5,
            iters_per_epoch: 0,
            batch_size: 1,
            n_views: 3,
            clip_norm: 5.0,
            seed: 0,
            device: "cpu".into(),
            checkpoint_every: 1,
            max_skip_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("train.decay_epochs must be strictly increasing".into()));
        }
        if !(self.learning_rate > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if self.n_views < 3 {
            return Err(Error::Config(format!("train.n_views must be ≥ 3 (two sources for the renderer), got {}", self.n_views)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device '{}'; only \"cpu\" is available", self.device)));
        }
        if !(self.clip_norm >= 0.0) || !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::Config("clip_norm must be ≥ 0 and max_skip_fraction in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.decay_factor.powi(n as i32)
    }
}

/// Scenes prepared for training: images, their per-stage pyramids and the
/// list of `(scene, reference view)` samples.
pub struct TrainingSet {
    pub scenes: Vec<MvsScene>,
    pub samples: Vec<(usize, usize)>,
    n_views: usize,
    pyramids: Vec<Vec<Vec<Tensor>>>,
}

impl TrainingSet {
    /// Every view with at least `n_views − 1` sources becomes a sample.
    pub fn new(scenes: Vec<MvsScene>, n_views: usize, stages: usize) -> Result<Self> {
        let mut samples = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            for v in &s.views {
                if s.pairing.select(v.view_id, n_views).is_ok() {
                    samples.push((si, v.view_id));
                }
            }
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput(format!("no view has the {} sources needed for training", n_views - 1)));
        }
        let pyramids = scenes
            .iter()
            .map(|s| s.views.iter().map(|v| pyramid(&v.image, stages)).collect())
            .collect();
        Ok(Self { scenes, samples, n_views, pyramids })
    }

    /// Load one scene directory, or every scene directory below `root`.
    pub fn load(root: &Path, n_views: usize, stages: usize) -> Result<Self> {
        Self::new(load_scene_dirs(root)?, n_views, stages)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn views(&self, sample: usize) -> Result<SampleViews<'_>> {
        let (si, r) = self.samples[sample];
        let scene = &self.scenes[si];
        let ids = scene.pairing.select(r, self.n_views)?;
        Ok(SampleViews {
            images: ids.iter().map(|&i| &scene.views[i].image).collect(),
            pyramids: ids.iter().map(|&i| self.pyramids[si][i].as_slice()).collect(),
            cams: ids.iter().map(|&i| scene.views[i].camera.clone()).collect(),
        })
    }
}

/// `root` itself if it holds a `pair.txt`, otherwise its scene
/// subdirectories in name order.
pub fn load_scene_dirs(root: &Path) -> Result<Vec<MvsScene>> {
    if root.join("pair.txt").exists() {
        return Ok(vec![load_mvs_scene(root)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("pair.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!("no scenes (directories with pair.txt) under {}", root.display())));
    }
    dirs.iter().map(|d| load_mvs_scene(d)).collect()
}

/// The views of one training sample, reference first.
pub struct SampleViews<'a> {
    pub images: Vec<&'a Tensor>,
    /// Per view, images at every stage resolution (finest first).
    pub pyramids: Vec<&'a [Tensor]>,
    pub cams: Vec<Camera>,
}

/// Both branches and their shared parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub renderer: Option<Renderer>,
    pub store: ParamStore,
}

impl Model {
    /// Fresh parameters from `seed`; the renderer is only built when a
    /// rendering loss is enabled.
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut rng)?;
        let renderer = if cfg.loss.enable.needs_renderer() {
            Some(Renderer::new(&mut store, &cfg.renderer, &cfg.backbone, cfg.train.n_views - 1, &mut rng)?)
        } else {
            None
        };
        Ok(Self { backbone, renderer, store })
    }
}

/// Forward pass of every enabled loss term for one sample.
pub fn sample_loss<'g>(
    g: &'g Graph,
    model: &Model,
    cfg: &RunConfig,
    views: &SampleViews<'_>,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'g>, LossBreakdown)> {
    let flags = &cfg.loss.enable;
    let store = &model.store;
    let images: Vec<Var<'g>> = views.images.iter().map(|im| g.constant((*im).clone())).collect();
    let out = model.backbone.forward(g, store, &images, &views.cams)?;
    let n_stages = out.stages.len();
    let zero = || g.constant(Tensor::scalar(0.0));
    let (mut pc, mut ssim, mut smooth) = (zero(), zero(), zero());
    let mut counts = LossBreakdown::default();
    for (s, pred) in out.stages.iter().enumerate() {
        let weight = cfg.backbone.stages[s].loss_weight;
        let level = n_stages - 1 - s;
        let reference = &views.pyramids[0][level];
        if reference.shape()[1..] != pred.depth.shape()[..] {
            return Err(Error::Shape(format!("stage {s} depth {:?} vs image {:?}", pred.depth.shape(), reference.shape())));
        }
        if flags.pc || flags.ssim {
            let ref_var = g.constant(reference.clone());
            let srcs: Vec<Var<'g>> = views.pyramids[1..].iter().map(|p| g.constant(p[level].clone())).collect();
            let warped = warp_sources(&srcs, &out.cameras[s][1..], &out.cameras[s][0], &pred.depth)?;
            if flags.pc {
                let t = photometric_consistency_loss(&ref_var, &warped)?;
                pc = pc.add(&t.value.mul_scalar(weight));
                if s + 1 == n_stages {
                    counts.pc_pixels = t.count;
                    counts.degenerate_views = t.degenerate;
                }
            }
            if flags.ssim {
                let t = ssim_loss(&ref_var, &warped)?;
                ssim = ssim.add(&t.value.mul_scalar(weight));
                if s + 1 == n_stages {
                    counts.ssim_windows = t.count;
                }
            }
        }
        if flags.smooth {
            smooth = smooth.add(&smoothness_loss(&pred.depth, reference)?.mul_scalar(weight));
        }
    }
    let mut terms = LossTerms { pc: Some(pc), ssim: Some(ssim), smooth: Some(smooth), ..Default::default() };

    if let (Some(renderer), true) = (&model.renderer, flags.needs_renderer()) {
        let finest = out.finest();
        if finest.depth.shape() != [views.images[0].dim(1), views.images[0].dim(2)] {
            return Err(Error::Config("the renderer needs a full-resolution finest stage".into()));
        }
        let coarse = &out.stages[0];
        let src_feats: Vec<Var<'g>> = out.features[1..].iter().map(|f| f[0]).collect();
        let volume = renderer.build_implicit_volume(g, store, &out.cameras[0][0], &src_feats, &out.cameras[0][1..], &coarse.hypotheses)?;
        let full: Vec<Tensor> = views.images.iter().map(|im| (*im).clone()).collect();
        let scene = RenderScene {
            images: &full,
            cameras: &views.cams,
            prior_depth: finest.depth,
            volume,
            volume_scale: cfg.backbone.stage_scale(0),
            inverse_depth: cfg.backbone.inverse_depth,
        };
        let rt = render_terms(g, renderer, store, cfg, &scene, rng)?;
        counts.rc_rays = rt.rays;
        counts.fallback_rays = rt.fallback_rays;
        counts.dc_rays = rt.dc_rays;
        terms.rc = rt.rc;
        terms.dc = rt.dc;
    }
    if flags.da {
        let full: Vec<Tensor> = views.images.iter().map(|im| (*im).clone()).collect();
        terms.da = Some(data_augmentation_loss(&model.backbone, g, store, &full, &views.cams, &out, &cfg.jitter, rng)?);
    }
    let (total, mut b) = total_loss(g, &terms, &cfg.loss, epoch);
    b.pc_pixels = counts.pc_pixels;
    b.degenerate_views = counts.degenerate_views;
    b.ssim_windows = counts.ssim_windows;
    b.rc_rays = counts.rc_rays;
    b.dc_rays = counts.dc_rays;
    b.fallback_rays = counts.fallback_rays;
    Ok((total, b))
}

/// Rendering-branch terms of one sample.
pub struct RenderTerms<'g> {
    pub rc: Option<Var<'g>>,
    pub dc: Option<Var<'g>>,
    pub rays: usize,
    pub dc_rays: usize,
    pub fallback_rays: usize,
}

/// Render `renderer.config.rays` random rays and form the enabled rendering
/// terms. Batches above `chunk_points` samples are rendered chunk by chunk
/// on their own tapes; the summed chunk gradients re-enter `g` through one
/// custom node per term, so values and gradients match a single-tape pass.
pub fn render_terms<'g>(
    g: &'g Graph,
    renderer: &Renderer,
    store: &ParamStore,
    cfg: &RunConfig,
    scene: &RenderScene<'_, 'g>,
    rng: &mut ChaCha8Rng,
) -> Result<RenderTerms<'g>> {
    let flags = &cfg.loss.enable;
    let rc_cfg = &renderer.config;
    let (h, w) = (scene.images[0].dim(1), scene.images[0].dim(2));
    let pixels = crate::renderer::select_pixels(h, w, rc_cfg.rays, rng);
    let total = pixels.len();
    let per_chunk = match rc_cfg.chunk_points {
        0 => total,
        n => (n / rc_cfg.samples).max(1),
    };
    if per_chunk >= total {
        let r = renderer.render_pixels(g, store, scene, &pixels, rng)?;
        let rc = if flags.rc { Some(reference_view_synthesis_loss(&r.rgb, &r.target)?) } else { None };
        let (dc, dc_rays) = if flags.dc {
            let t = depth_rendering_consistency_loss(&r.depth, &r.prior, &r.gate, cfg.loss.dc_beta)?;
            (Some(t.value), t.count)
        } else {
            (None, 0)
        };
        return Ok(RenderTerms { rc, dc, rays: total, dc_rays, fallback_rays: r.fallback_rays });
    }

    let volume = (*scene.volume.value()).clone();
    let prior = (*scene.prior_depth.value()).clone();
    let mut rc_acc = ChunkGrads::default();
    let mut dc_acc = ChunkGrads::default();
    let (mut dc_rays, mut fallback_rays) = (0, 0);
    for chunk in pixels.chunks(per_chunk) {
        let sub = Graph::new();
        let vol_leaf = sub.leaf(volume.clone());
        let prior_leaf = sub.leaf(prior.clone());
        let sub_scene = RenderScene {
            images: scene.images,
            cameras: scene.cameras,
            prior_depth: prior_leaf,
            volume: vol_leaf,
            volume_scale: scene.volume_scale,
            inverse_depth: scene.inverse_depth,
        };
        let r = renderer.render_pixels(&sub, store, &sub_scene, chunk, rng)?;
        fallback_rays += r.fallback_rays;
        if flags.rc {
            let share = reference_view_synthesis_loss(&r.rgb, &r.target)?.mul_scalar(chunk.len() as f64 / total as f64);
            rc_acc.add(&sub, share, vol_leaf, prior_leaf);
        }
        let gated = r.gate.iter().filter(|&&b| b).count();
        if flags.dc && gated > 0 {
            let t = depth_rendering_consistency_loss(&r.depth, &r.prior, &r.gate, cfg.loss.dc_beta)?;
            dc_rays += t.count;
            dc_acc.add(&sub, t.value.mul_scalar(t.count as f64), vol_leaf, prior_leaf);
        }
    }
    let rc = flags.rc.then(|| rc_acc.into_var(g, store, scene, 1.0));
    let dc = if flags.dc {
        if dc_rays == 0 {
            log::warn!("depth consistency loss: no rays pass the opacity gate");
        }
        Some(dc_acc.into_var(g, store, scene, 1.0 / dc_rays.max(1) as f64))
    } else {
        None
    };
    Ok(RenderTerms { rc, dc, rays: total, dc_rays, fallback_rays })
}

/// Value and gradients of one rendering term summed over chunks.
#[derive(Default)]
struct ChunkGrads {
    value: f64,
    volume: Option<Tensor>,
    prior: Option<Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl ChunkGrads {
    fn add(&mut self, sub: &Graph, term: Var<'_>, vol: Var<'_>, prior: Var<'_>) {
        self.value += term.item();
        let grads = sub.backward(term);
        let acc = |slot: &mut Option<Tensor>, v| {
            if let Some(gr) = grads.get(v) {
                match slot {
                    Some(a) => a.add_assign(gr),
                    None => *slot = Some(gr.clone()),
                }
            }
        };
        acc(&mut self.volume, vol);
        acc(&mut self.prior, prior);
        for (id, gr) in grads.param_grads() {
            match self.params.get_mut(&id) {
                Some(a) => a.add_assign(&gr),
                None => {
                    self.params.insert(id, gr);
                }
            }
        }
    }

    fn into_var<'g>(self, g: &'g Graph, store: &ParamStore, scene: &RenderScene<'_, 'g>, scale: f64) -> Var<'g> {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort_unstable();
        let mut inputs = vec![scene.volume, scene.prior_depth];
        inputs.extend(ids.iter().map(|&id| g.param(store, id)));
        let mut grads = vec![self.volume, self.prior];
        let mut params = self.params;
        grads.extend(ids.iter().map(|id| params.remove(id)));
        g.custom(&inputs, Tensor::scalar(self.value * scale), move |up| {
            let k = up.data()[0] * scale;
            grads.iter().map(|gr| gr.as_ref().map(|t| t.scale(k))).collect()
        })
    }
}

/// Serialisable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, as a decimal string (128-bit).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Checkpoint(format!("bad rng position '{}'", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Parameters, optimizer and RNG state after `epoch` completed epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: RunConfig,
    pub epoch: usize,
    pub step: u64,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("{}: unsupported format {}", path.display(), ck.format)));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    /// A copy holding only backbone parameters and no optimizer state.
    pub fn backbone_only(&self) -> Self {
        Self { params: self.params.filtered(|n| n.starts_with("backbone.")), adam: None, rng: None, ..self.clone() }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iteration {
        epoch: usize,
        iteration: usize,
        step: u64,
        lr: f64,
        grad_norm: f64,
        skipped: bool,
        seconds: f64,
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        iterations: usize,
        skipped: usize,
        seconds: f64,
        mean: LossBreakdown,
    },
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub iterations: usize,
    pub skipped: usize,
    pub mean: LossBreakdown,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub data: TrainingSet,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig, data: TrainingSet) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config, config.train.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self { config, model, adam: Adam::default(), data, epoch: 0, step: 0, rng })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint, data: TrainingSet) -> Result<Self> {
        let mut t = Self::new(ck.config.clone(), data)?;
        let n = t.model.store.load_matching(&ck.params).map_err(Error::Checkpoint)?;
        if n != t.model.store.len() {
            return Err(Error::Checkpoint(format!("checkpoint covers {n} of {} parameters", t.model.store.len())));
        }
        t.adam = ck.adam.unwrap_or_default();
        if let Some(r) = &ck.rng {
            t.rng = r.restore()?;
        }
        t.epoch = ck.epoch;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.model.store.clone(),
            adam: Some(self.adam.clone()),
            rng: Some(RngState::capture(&self.rng)),
        }
    }

    pub fn iterations_per_epoch(&self) -> usize {
        match self.config.train.iters_per_epoch {
            0 => self.data.len().div_ceil(self.config.train.batch_size),
            n => n,
        }
    }

    /// Loss and gradients of the given samples, without updating anything.
    pub fn gradients(&mut self, samples: &[usize]) -> Result<(LossBreakdown, HashMap<ParamId, Tensor>)> {
        let mut grads: HashMap<ParamId, Tensor> = HashMap::new();
        let mut mean = LossBreakdown::default();
        let scale = 1.0 / samples.len() as f64;
        for &s in samples {
            let views = self.data.views(s)?;
            let g = Graph::new();
            let (total, b) = sample_loss(&g, &self.model, &self.config, &views, self.epoch, &mut self.rng)?;
            let pg = g.backward(total).param_grads();
            for (id, gr) in pg {
                let gr = gr.scale(scale);
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&gr),
                    None => {
                        grads.insert(id, gr);
                    }
                }
            }
            accumulate(&mut mean, &b, scale);
        }
        Ok((mean, grads))
    }

    /// One optimizer step over `samples`; non-finite losses or gradients
    /// skip the update.
    pub fn train_step(&mut self, samples: &[usize]) -> Result<StepResult> {
        let lr = self.config.train.lr(self.epoch);
        let (loss, mut grads) = match self.gradients(samples) {
            Ok(r) => r,
            Err(Error::NonFinite(msg)) => {
                log::warn!("step {}: {msg}; skipped", self.step);
                let loss = LossBreakdown { total: f64::NAN, ..Default::default() };
                return Ok(StepResult { loss, grad_norm: f64::NAN, skipped: true });
            }
            Err(e) => return Err(e),
        };
        let norm = global_norm(&grads);
        if !loss.total.is_finite() || !norm.is_finite() {
            log::warn!("step {}: non-finite loss ({}) or gradient norm ({norm}); skipped", self.step, loss.total);
            return Ok(StepResult { loss, grad_norm: norm, skipped: true });
        }
        if self.config.train.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.train.clip_norm);
        }
        self.adam.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(StepResult { loss, grad_norm: norm, skipped: false })
    }

    /// Run one epoch, passing every log record to `sink`.
    pub fn run_epoch(&mut self, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<EpochSummary> {
        let start = Instant::now();
        let iters = self.iterations_per_epoch();
        let batch = self.config.train.batch_size;
        let mut order: Vec<usize> = Vec::new();
        let mut next = || {
            if order.is_empty() {
                order = (0..self.data.len()).collect();
                order.shuffle(&mut self.rng);
                order.reverse();
            }
            order.pop().expect("non-empty")
        };
        let picks: Vec<Vec<usize>> = (0..iters).map(|_| (0..batch).map(|_| next()).collect()).collect();
        let (mut mean, mut skipped, mut ok) = (LossBreakdown::default(), 0, 0usize);
        let mut sums = Vec::new();
        for (it, samples) in picks.iter().enumerate() {
            let t0 = Instant::now();
            let r = self.train_step(samples)?;
            if r.skipped {
                skipped += 1;
            } else {
                ok += 1;
                sums.push(r.loss.clone());
            }
            sink(&LogRecord::Iteration {
                epoch: self.epoch,
                iteration: it,
                step: self.step,
                lr: self.config.train.lr(self.epoch),
                grad_norm: r.grad_norm,
                skipped: r.skipped,
                seconds: t0.elapsed().as_secs_f64(),
                loss: r.loss,
            })?;
        }
        for b in &sums {
            accumulate(&mut mean, b, 1.0 / ok.max(1) as f64);
        }
        let summary = EpochSummary { epoch: self.epoch, iterations: iters, skipped, mean: mean.clone() };
        sink(&LogRecord::Epoch { epoch: self.epoch, iterations: iters, skipped, seconds: start.elapsed().as_secs_f64(), mean })?;
        if skipped as f64 > self.config.train.max_skip_fraction * iters as f64 {
            return Err(Error::TrainingAborted(format!(
                "epoch {}: {skipped} of {iters} steps had a non-finite loss (limit {:.1}%); last finite mean {:?}",
                self.epoch,
                self.config.train.max_skip_fraction * 100.0,
                summary.mean
            )));
        }
        self.epoch += 1;
        Ok(summary)
    }
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.pc += w * b.pc;
    acc.rc += w * b.rc;
    acc.dc += w * b.dc;
    acc.ssim += w * b.ssim;
    acc.smooth += w * b.smooth;
    acc.da += w * b.da;
    acc.total += w * b.total;
    acc.da_weight = b.da_weight;
    acc.pc_pixels += b.pc_pixels;
    acc.rc_rays += b.rc_rays;
    acc.dc_rays += b.dc_rays;
    acc.ssim_windows += b.ssim_windows;
    acc.degenerate_views += b.degenerate_views;
    acc.fallback_rays += b.fallback_rays;
    acc.da_dominates |= b.da_dominates;
}

/// Files written by [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
    pub metric_log: PathBuf,
}

/// Train for the configured epochs, writing `metrics.jsonl` and
/// `checkpoints/epoch_XXX.json` under `config.output`.
pub fn run_training(config: RunConfig, data: TrainingSet) -> Result<TrainingReport> {
    let out = config.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut trainer = Trainer::new(config, data)?;
    log::info!(
        "training {} parameters on {} samples, {} steps per epoch",
        trainer.model.store.numel(),
        trainer.data.len(),
        trainer.iterations_per_epoch()
    );
    let mut report = TrainingReport { epochs: Vec::new(), checkpoints: Vec::new(), metric_log: log_path.clone() };
    let epochs = trainer.config.train.epochs;
    let every = trainer.config.train.checkpoint_every;
    while trainer.epoch < epochs {
        let mut sink = |r: &LogRecord| -> Result<()> {
            let line = serde_json::to_string(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
        };
        let summary = trainer.run_epoch(&mut sink)?;
        log::info!(
            "epoch {}: total {:.5} pc {:.5} rc {:.5} dc {:.5} skipped {}",
            summary.epoch,
            summary.mean.total,
            summary.mean.pc,
            summary.mean.rc,
            summary.mean.dc,
            summary.skipped
        );
        report.epochs.push(summary);
        if (every > 0 && trainer.epoch % every == 0) || trainer.epoch == epochs {
            let p = out.join("checkpoints").join(format!("epoch_{:03}.json", trainer.epoch));
            trainer.checkpoint().save(&p)?;
            report.checkpoints.push(p);
        }
        log.flush().map_err(|e| Error::io(&report.metric_log, e))?;
    }
    Ok(report)
}

/// Backbone output for one reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct InferredDepth {
    pub view_id: usize,
    pub depth: Tensor,
    pub confidence: Tensor,
}

/// Build the backbone described by the checkpoint and load its weights.
/// Renderer parameters, if present, are ignored.
pub fn load_backbone(ck: &Checkpoint) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = Backbone::new(&mut store, &ck.config.backbone, &mut rng)?;
    let n = store.load_matching(&ck.params).map_err(Error::Checkpoint)?;
    if n != store.len() {
        return Err(Error::Checkpoint(format!("checkpoint holds {n} of the {} backbone parameters", store.len())));
    }
    Ok((backbone, store))
}

/// Depth and confidence of `reference` from the backbone alone.
pub fn infer_view(backbone: &Backbone, store: &ParamStore, scene: &MvsScene, reference: usize, n_views: usize) -> Result<InferredDepth> {
    let views = scene.select(reference, n_views)?;
    let g = Graph::new();
    let images: Vec<Var> = views.iter().map(|v| g.constant(v.image.clone())).collect();
    let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let out = backbone.forward(&g, store, &images, &cams)?;
    let f = out.finest();
    Ok(InferredDepth { view_id: reference, depth: (*f.depth.value()).clone(), confidence: f.confidence.clone() })
}

/// Backbone-only inference for `views` (all views when `None`), each with
/// its first `n_views − 1` paired sources.
pub fn run_inference(ck: &Checkpoint, scene: &MvsScene, n_views: usize, views: Option<&[usize]>) -> Result<Vec<InferredDepth>> {
    if n_views < 2 {
        return Err(Error::Config("inference needs at least 2 views".into()));
    }
    let (backbone, store) = load_backbone(ck)?;
    let ids: Vec<usize> = match views {
        Some(v) => v.to_vec(),
        None => (0..scene.views.len()).collect(),
    };
    ids.iter().map(|&r| infer_view(&backbone, &store, scene, r, n_views)).collect()
}

/// Write `depths/%08d.pfm` and `confidence/%08d.pfm` under `out`.
pub fn write_inference(out: &Path, results: &[InferredDepth]) -> Result<()> {
    for sub in ["depths", "confidence"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for r in results {
        write_pfm(&out.join("depths").join(format!("{:08}.pfm", r.view_id)), &r.depth)?;
        write_pfm(&out.join("confidence").join(format!("{:08}.pfm", r.view_id)), &r.confidence)?;
    }
    Ok(())
}

/// Full-frame outputs of both branches for one reference view.
#[derive(Clone, Debug)]
pub struct DebugRender {
    /// Synthesised reference image `[3, H, W]`.
    pub rgb: Tensor,
    /// Rendered depth `[H, W]`.
    pub rendered_depth: Tensor,
    /// Finest backbone depth `[H, W]`.
    pub backbone_depth: Tensor,
}

/// Render every pixel of `view` with the checkpoint's renderer, using the
/// backbone depth as the sampling prior.
pub fn render_debug(ck: &Checkpoint, scene: &MvsScene, view: usize, seed: u64) -> Result<DebugRender> {
    let mut cfg = ck.config.clone();
    cfg.loss.enable.rc = true;
    let mut model = Model::new(&cfg, 0)?;
    let n = model.store.load_matching(&ck.params).map_err(Error::Checkpoint)?;
    if n != model.store.len() {
        return Err(Error::Checkpoint(format!("checkpoint holds {n} of {} parameters; render-debug needs the renderer", model.store.len())));
    }
    let renderer = model.renderer.take().expect("renderer enabled");
    let views = scene.select(view, cfg.train.n_views)?;
    let images: Vec<Tensor> = views.iter().map(|v| v.image.clone()).collect();
    let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let (h, w) = (images[0].dim(1), images[0].dim(2));
    let g = Graph::new();
    let vars: Vec<Var> = images.iter().map(|im| g.constant(im.clone())).collect();
    let out = model.backbone.forward(&g, &model.store, &vars, &cams)?;
    let prior = (*out.finest().depth.value()).clone();
    if prior.shape() != [h, w] {
        return Err(Error::Config("render-debug needs a full-resolution finest stage".into()));
    }
    let src_feats: Vec<Var> = out.features[1..].iter().map(|f| f[0]).collect();
    let volume = renderer.build_implicit_volume(&g, &model.store, &out.cameras[0][0], &src_feats, &out.cameras[0][1..], &out.stages[0].hypotheses)?;
    let volume = (*volume.value()).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rgb = Tensor::zeros(&[3, h, w]);
    let mut depth = Tensor::zeros(&[h, w]);
    let per_chunk = (renderer.config.chunk_points.max(renderer.config.samples) / renderer.config.samples).max(1);
    let all: Vec<usize> = (0..h * w).collect();
    for chunk in all.chunks(per_chunk) {
        let sub = Graph::new();
        let scene = RenderScene {
            images: &images,
            cameras: &cams,
            prior_depth: sub.constant(prior.clone()),
            volume: sub.constant(volume.clone()),
            volume_scale: cfg.backbone.stage_scale(0),
            inverse_depth: cfg.backbone.inverse_depth,
        };
        let r = renderer.render_pixels(&sub, &model.store, &scene, chunk, &mut rng)?;
        let (c, d) = (r.rgb.value(), r.depth.value());
        for (i, &px) in chunk.iter().enumerate() {
            for ch in 0..3 {
                rgb.data_mut()[ch * h * w + px] = c.data()[i * 3 + ch];
            }
            depth.data_mut()[px] = d.data()[i];
        }
    }
    Ok(DebugRender { rgb, rendered_depth: depth, backbone_depth: prior })
}
