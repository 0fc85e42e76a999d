//! Scene directories: `images/%08d.{png,jpg}`, `cams/%08d_cam.txt`,
//! `pair.txt` and (evaluation only) `depths_gt/%08d.pfm`.

use std::path::{Path, PathBuf};

use mvs_autograd::Tensor;

use super::camfile::{read_camera_file, read_pair_file, write_camera_file, write_pair_file, ScenePairing};
use crate::error::{Error, Result};
use crate::geometry::CameraView;

/// File locations inside a scene directory.
#[derive(Clone, Debug)]
pub struct SceneLayout {
    pub root: PathBuf,
}

impl SceneLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Existing image of view `id`, PNG preferred over JPEG.
    pub fn image_path(&self, id: usize) -> PathBuf {
        let dir = self.root.join("images");
        for ext in ["png", "jpg", "jpeg"] {
            let p = dir.join(format!("{id:08}.{ext}"));
            if p.exists() {
                return p;
            }
        }
        dir.join(format!("{id:08}.png"))
    }

    pub fn camera_path(&self, id: usize) -> PathBuf {
        self.root.join("cams").join(format!("{id:08}_cam.txt"))
    }

    pub fn pair_path(&self) -> PathBuf {
        self.root.join("pair.txt")
    }

    pub(crate) fn gt_depth_path(&self, id: usize) -> PathBuf {
        self.root.join("depths_gt").join(format!("{id:08}.pfm"))
    }
}

/// Posed images and pairing of one scene. Ground truth is deliberately not
/// part of this type.
#[derive(Clone, Debug)]
pub struct MvsScene {
    pub root: PathBuf,
    pub views: Vec<CameraView>,
    pub pairing: ScenePairing,
    pub depth_intervals: Vec<f64>,
}

impl MvsScene {
    pub fn view(&self, id: usize) -> Result<&CameraView> {
        self.views
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("view {id} not in scene {}", self.root.display())))
    }

    /// Reference view followed by its first `n_views − 1` sources.
    pub fn select(&self, reference: usize, n_views: usize) -> Result<Vec<&CameraView>> {
        self.pairing.select(reference, n_views)?.into_iter().map(|id| self.view(id)).collect()
    }
}

/// RGB image as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Quantise a `[3, H, W]` or `[1, H, W]` tensor to 8 bits per channel.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let mut buf = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for k in 0..3 {
            let v = img.data()[(k.min(c - 1)) * h * w + p];
            buf[p * 3 + k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_mvs_scene(root: &Path) -> Result<MvsScene> {
    let layout = SceneLayout::new(root);
    let pairing = read_pair_file(&layout.pair_path())?;
    let v = pairing.view_count();
    let mut views = Vec::with_capacity(v);
    let mut depth_intervals = Vec::with_capacity(v);
    for id in 0..v {
        let rec = read_camera_file(&layout.camera_path(id))?;
        let image = load_image(&layout.image_path(id))?;
        views.push(CameraView::new(id, image, rec.camera)?);
        depth_intervals.push(rec.depth_interval);
    }
    if let Some(first) = views.first() {
        let (h, w) = (first.height(), first.width());
        if let Some(bad) = views.iter().find(|cv| cv.height() != h || cv.width() != w) {
            return Err(Error::InvalidInput(format!(
                "view {} is {}x{}, expected {h}x{w}",
                bad.view_id,
                bad.height(),
                bad.width()
            )));
        }
    }
    Ok(MvsScene { root: root.to_path_buf(), views, pairing, depth_intervals })
}

/// Write images, cameras and the pair file. Camera files record
/// `hypotheses` and the exact `depth_max`.
pub fn write_mvs_scene(root: &Path, views: &[CameraView], pairing: &ScenePairing, hypotheses: usize) -> Result<()> {
    let layout = SceneLayout::new(root);
    for dir in ["images", "cams"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for v in views {
        save_image(&root.join("images").join(format!("{:08}.png", v.view_id)), &v.image)?;
        write_camera_file(&layout.camera_path(v.view_id), &v.camera, hypotheses)?;
    }
    write_pair_file(&layout.pair_path(), pairing)
}
