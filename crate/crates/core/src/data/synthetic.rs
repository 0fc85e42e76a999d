//! Ray-traced synthetic scenes with analytic ground-truth depth.
//!
//! Each scene is a textured back wall with a few spheres and boxes in front
//! of it, seen by a ring of cameras. Shading is Lambertian plus a Phong lobe,
//! so scenes with specular materials break cross-view colour constancy.
//! Rays are parameterised so that the hit parameter equals the camera-space
//! depth.

use std::path::{Path, PathBuf};

use mvs_autograd::Tensor;
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camfile::{PairEntry, ScenePairing};
use super::pfm::write_pfm;
use super::scene::{write_mvs_scene, SceneLayout};
use crate::error::{Error, Result};
use crate::geometry::{back_project, look_at, project_to_view, Camera, CameraView};

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub views: usize,
    pub scenes: usize,
    pub seed: u64,
    /// Fraction of scenes whose objects get a specular lobe.
    pub specular_fraction: f64,
    /// Fraction of scenes that get a thin occluder close to the cameras.
    pub occluder_fraction: f64,
    /// Hypothesis count recorded in the camera files (sets the depth interval).
    pub file_hypotheses: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 80,
            views: 5,
            scenes: 3,
            seed: 0,
            specular_fraction: 1.0 / 3.0,
            occluder_fraction: 0.0,
            file_hypotheses: super::camfile::DEFAULT_FILE_HYPOTHESES,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!("resolution must be at least 32x32, got {}x{}", self.height, self.width)));
        }
        if self.views < 5 {
            return Err(Error::Config(format!("at least 5 views per scene required, got {}", self.views)));
        }
        for (name, f) in [("specular", self.specular_fraction), ("occluder", self.occluder_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} fraction must lie in [0, 1], got {f}")));
            }
        }
        if self.file_hypotheses < 2 {
            return Err(Error::Config("file_hypotheses must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Whether scene `index` is one of the `fraction` flagged scenes; spreads the
/// flagged scenes evenly and flags exactly `round(fraction · n)` of the first
/// `n` (up to rounding of the boundary).
pub fn flagged(index: usize, fraction: f64) -> bool {
    let f = |i: usize| (i as f64 * fraction + 1e-9).floor();
    f(index + 1) > f(index)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Points with `normal · x = offset`; `normal` is unit length.
    Plane { normal: Vector3<f64>, offset: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
}

impl Shape {
    /// Nearest hit with parameter `> HIT_EPS` along `origin + t · dir`, with
    /// the outward unit normal there.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Shape::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                (t > HIT_EPS).then_some((t, *normal))
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > HIT_EPS)?;
                Some((t, (origin + dir * t - center) / *radius))
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vector3::zeros(), Vector3::zeros());
                for ax in 0..3 {
                    if dir[ax].abs() < 1e-15 {
                        if origin[ax] < min[ax] || origin[ax] > max[ax] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((min[ax] - origin[ax]) / dir[ax], (max[ax] - origin[ax]) / dir[ax]);
                    let mut na = Vector3::zeros();
                    na[ax] = -1.0;
                    let mut nb = Vector3::zeros();
                    nb[ax] = 1.0;
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if a > t0 {
                        t0 = a;
                        n0 = na;
                    }
                    if b < t1 {
                        t1 = b;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > HIT_EPS {
                    Some((t0, n0))
                } else if t1 > HIT_EPS {
                    Some((t1, n1))
                } else {
                    None
                }
            }
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Shape::Plane { .. } => false,
            Shape::Sphere { center, radius } => (p - center).norm() <= *radius,
            Shape::Cuboid { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
        }
    }
}

/// Sum-of-sinusoids albedo texture with an optional Phong lobe.
#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    /// `(direction, angular frequency, phase, weight)` per wave.
    pub waves: Vec<(Vector3<f64>, f64, f64, f64)>,
    pub specular: f64,
    pub shininess: f64,
}

impl Material {
    pub fn random(rng: &mut impl Rng, specular: f64) -> Self {
        let mut color = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let base = color();
        let accent = color();
        let waves = (0..6)
            .map(|_| {
                let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let d = if d.norm() < 1e-3 { Vector3::x() } else { d.normalize() };
                (d, rng.random_range(4.0..14.0), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.15..0.35))
            })
            .collect();
        Self { base, accent, waves, specular, shininess: if specular > 0.0 { rng.random_range(12.0..32.0) } else { 1.0 } }
    }

    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let s: f64 = self.waves.iter().map(|(d, f, ph, w)| w * (f * d.dot(p) + ph).sin()).sum();
        let m = (0.5 + s).clamp(0.0, 1.0);
        std::array::from_fn(|c| self.base[c] * (1.0 - m) + self.accent[c] * m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

/// Ray hit: parameter (camera depth for pixel rays), normal, primitive index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

/// Scene geometry plus the rendered views and their exact depth maps.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    /// Unit vector pointing from surfaces towards the light.
    pub light: Vector3<f64>,
    pub views: Vec<CameraView>,
    pub depths: Vec<Tensor>,
    pub pairing: ScenePairing,
    pub specular: bool,
    pub occluder: bool,
}

pub const AMBIENT: f64 = 0.35;
pub const DIFFUSE: f64 = 0.65;

impl SyntheticScene {
    /// Render `cameras` (whose depth ranges are kept) over the given geometry.
    pub fn from_parts(primitives: Vec<Primitive>, light: Vector3<f64>, cameras: Vec<Camera>, height: usize, width: usize) -> Result<Self> {
        let mut scene = Self {
            primitives,
            light: light.normalize(),
            views: Vec::new(),
            depths: Vec::new(),
            pairing: ScenePairing::default(),
            specular: false,
            occluder: false,
        };
        scene.specular = scene.primitives.iter().any(|p| p.material.specular > 0.0);
        for (id, cam) in cameras.into_iter().enumerate() {
            let (img, depth) = scene.render(&cam, height, width)?;
            scene.views.push(CameraView::new(id, img, cam)?);
            scene.depths.push(depth);
        }
        scene.pairing = pairing_by_distance(&scene.views.iter().map(|v| v.camera.clone()).collect::<Vec<_>>());
        Ok(scene)
    }

    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.shape.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, normal, primitive: i });
                }
            }
        }
        best
    }

    /// Colour of the first surface hit, seen from `eye`.
    pub fn shade(&self, hit: &Hit, point: &Vector3<f64>, eye: &Vector3<f64>) -> [f64; 3] {
        let m = &self.primitives[hit.primitive].material;
        let v = (eye - point).normalize();
        // Shade the side facing the viewer.
        let n = if hit.normal.dot(&v) < 0.0 { -hit.normal } else { hit.normal };
        let ndl = n.dot(&self.light);
        let diffuse = ndl.max(0.0);
        let spec = if m.specular > 0.0 && ndl > 0.0 {
            let r = n * (2.0 * ndl) - self.light;
            m.specular * r.dot(&v).max(0.0).powf(m.shininess)
        } else {
            0.0
        };
        let a = m.albedo(point);
        std::array::from_fn(|c| (a[c] * (AMBIENT + DIFFUSE * diffuse) + spec).clamp(0.0, 1.0))
    }

    /// Image `[3, H, W]` and depth `[H, W]` (0 where the ray hits nothing).
    pub fn render(&self, cam: &Camera, height: usize, width: usize) -> Result<(Tensor, Tensor)> {
        let eye = cam.center();
        let mut img = Tensor::zeros(&[3, height, width]);
        let mut depth = Tensor::zeros(&[height, width]);
        let plane = height * width;
        for y in 0..height {
            for x in 0..width {
                let dir = cam.pixel_ray(x as f64, y as f64)?;
                if let Some(hit) = self.cast(&eye, &dir) {
                    let p = eye + dir * hit.t;
                    let c = self.shade(&hit, &p, &eye);
                    let i = y * width + x;
                    depth.data_mut()[i] = hit.t;
                    for (k, v) in c.iter().enumerate() {
                        img.data_mut()[k * plane + i] = *v;
                    }
                }
            }
        }
        Ok((img, depth))
    }

    /// `[H, W]` mask of reference pixels whose surface point is visible
    /// (inside the image and unoccluded) in view `src`.
    pub fn visibility(&self, reference: usize, src: usize) -> Result<Tensor> {
        let rv = &self.views[reference];
        let sc = &self.views[src].camera;
        let (h, w) = (rv.height(), rv.width());
        let depth = &self.depths[reference];
        let eye = sc.center();
        let mut out = Tensor::zeros(&[h, w]);
        for i in 0..h * w {
            let d = depth.data()[i];
            if d <= 0.0 {
                continue;
            }
            let p = back_project(&Vector2::new((i % w) as f64, (i / w) as f64), d, &rv.camera)?;
            let proj = project_to_view(&p, sc);
            let (u, v) = (proj.pixel.x, proj.pixel.y);
            if proj.behind_camera() || u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
                continue;
            }
            let dir = sc.pixel_ray(u, v)?;
            if let Some(hit) = self.cast(&eye, &dir) {
                if (hit.t - proj.depth).abs() <= 1e-6 * proj.depth {
                    out.data_mut()[i] = 1.0;
                }
            }
        }
        Ok(out)
    }

    /// Write images, cameras, pair file and ground-truth depths.
    pub fn write(&self, root: &Path, file_hypotheses: usize) -> Result<()> {
        write_mvs_scene(root, &self.views, &self.pairing, file_hypotheses)?;
        let layout = SceneLayout::new(root);
        let dir = root.join("depths_gt");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (v, d) in self.views.iter().zip(&self.depths) {
            write_pfm(&layout.gt_depth_path(v.view_id), d)?;
        }
        Ok(())
    }
}

/// Sources ordered by camera-centre distance; score `1 / (1 + distance)`.
pub fn pairing_by_distance(cams: &[Camera]) -> ScenePairing {
    let entries = (0..cams.len())
        .map(|i| {
            let mut src: Vec<(usize, f64)> = (0..cams.len())
                .filter(|&j| j != i)
                .map(|j| (j, (cams[i].center() - cams[j].center()).norm()))
                .collect();
            src.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            PairEntry { reference: i, sources: src.into_iter().map(|(j, d)| (j, 1.0 / (1.0 + d))).collect() }
        })
        .collect();
    ScenePairing { entries }
}

const RING_RADIUS: f64 = 5.0;
const WALL_Z: f64 = 2.0;

fn ring_cameras(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let n = cfg.views;
    let spread = 0.25;
    (0..n)
        .map(|i| {
            let theta = -spread + 2.0 * spread * i as f64 / (n - 1) as f64;
            let height = 0.35 * (i as f64 * 2.4).sin() + rng.random_range(-0.05..0.05);
            let eye = Vector3::new(RING_RADIUS * theta.sin(), height, -RING_RADIUS * theta.cos());
            let target = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
            look_at(&eye, &target, &Vector3::new(0.0, -1.0, 0.0))
        })
        .collect()
}

fn random_objects(rng: &mut impl Rng, specular: bool, occluder: bool) -> Vec<Primitive> {
    let spec = |rng: &mut ChaCha8Rng| if specular { rng.random_range(0.5..0.8) } else { 0.0 };
    let mut rng = ChaCha8Rng::from_rng(rng);
    let mut out = vec![Primitive {
        shape: Shape::Plane { normal: Vector3::new(0.0, 0.0, -1.0), offset: -WALL_Z },
        material: Material::random(&mut rng, 0.0),
    }];
    let count = rng.random_range(3..=4);
    for k in 0..count {
        let center = Vector3::new(rng.random_range(-1.6..1.6), rng.random_range(-1.1..1.1), rng.random_range(-1.2..1.2));
        let s = spec(&mut rng);
        let shape = if k % 2 == 0 {
            Shape::Sphere { center, radius: rng.random_range(0.45..0.85) }
        } else {
            let half = Vector3::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
            Shape::Cuboid { min: center - half, max: center + half }
        };
        out.push(Primitive { shape, material: Material::random(&mut rng, s) });
    }
    if occluder {
        let x = rng.random_range(-0.8..0.8);
        out.push(Primitive {
            shape: Shape::Cuboid { min: Vector3::new(x - 0.08, -3.0, -2.6), max: Vector3::new(x + 0.08, 3.0, -2.45) },
            material: Material::random(&mut rng, 0.0),
        });
    }
    out
}

/// Generate scene `index` of the configured dataset.
pub fn generate_scene(cfg: &SyntheticConfig, index: usize) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let specular = flagged(index, cfg.specular_fraction);
    let occluder = flagged(index, cfg.occluder_fraction);
    let (h, w) = (cfg.height, cfg.width);
    let f = 0.9 * w as f64;
    let k = Matrix3::new(f, 0.0, (w - 1) as f64 / 2.0, 0.0, f, (h - 1) as f64 / 2.0, 0.0, 0.0, 1.0);
    let poses = ring_cameras(cfg, &mut rng);
    let primitives = loop {
        let prims = random_objects(&mut rng, specular, occluder);
        let inside = poses.iter().any(|(r, t)| {
            let eye = -(r.transpose() * t);
            prims.iter().any(|p| p.shape.contains(&eye))
        });
        if !inside {
            break prims;
        }
    };
    let light = Vector3::new(-0.3, -0.5, -1.0);
    // Depth range from a first pass with a placeholder range.
    let probe: Vec<Camera> = poses.iter().map(|(r, t)| Camera::new(k, *r, *t, 1.0, 2.0)).collect::<Result<_>>()?;
    let geo = SyntheticScene { primitives: primitives.clone(), light: light.normalize(), views: vec![], depths: vec![], pairing: ScenePairing::default(), specular, occluder };
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for cam in &probe {
        let eye = cam.center();
        for y in 0..h {
            for x in 0..w {
                if let Some(hit) = geo.cast(&eye, &cam.pixel_ray(x as f64, y as f64)?) {
                    lo = lo.min(hit.t);
                    hi = hi.max(hit.t);
                }
            }
        }
    }
    if !(lo.is_finite() && hi > lo) {
        return Err(Error::InvalidInput("synthetic scene produced no depth".into()));
    }
    let (t_n, t_f) = (0.95 * lo, 1.05 * hi);
    let cams = probe.into_iter().map(|c| Camera::new(c.k, c.r, c.t, t_n, t_f)).collect::<Result<Vec<_>>>()?;
    let mut scene = SyntheticScene::from_parts(primitives, light, cams, h, w)?;
    scene.specular = specular;
    scene.occluder = occluder;
    Ok(scene)
}

/// Write `cfg.scenes` scenes to `out/scene_XXX`; returns their directories.
pub fn generate_synthetic_dataset(out: &Path, cfg: &SyntheticConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    (0..cfg.scenes)
        .map(|i| {
            let scene = generate_scene(cfg, i)?;
            let dir = out.join(format!("scene_{i:03}"));
            scene.write(&dir, cfg.file_hypotheses)?;
            log::info!(
                "wrote {} ({} views, specular: {}, occluder: {})",
                dir.display(),
                scene.views.len(),
                scene.specular,
                scene.occluder
            );
            Ok(dir)
        })
        .collect()
}
