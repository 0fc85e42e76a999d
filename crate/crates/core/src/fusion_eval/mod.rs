//! Depth-map filtering and fusion into point clouds, and reconstruction
//! metrics.

pub mod kdtree;
pub mod ply;

use std::collections::HashSet;
use std::path::Path;

use mvs_autograd::{par, Tensor};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::data::pfm::read_pfm;
use crate::data::{SceneLayout, ScenePairing};
use crate::error::{Error, Result};
use crate::geometry::{back_project, project_to_view, Camera};
use kdtree::KdTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Minimum confidence for a pixel to be considered.
    pub confidence: f64,
    /// Maximum reprojection error in pixels.
    pub reproj_px: f64,
    /// Maximum relative depth difference.
    pub rel_depth: f64,
    /// Minimum number of consistent source views.
    pub min_views: usize,
    /// Edge of the deduplication voxel grid (scene units); 0 disables it.
    pub voxel_size: f64,
    /// Nearest-neighbour distances above this are discarded as outliers.
    pub max_dist: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { confidence: 0.9, reproj_px: 1.0, rel_depth: 0.01, min_views: 3, voxel_size: 1e-3, max_dist: 20.0 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.reproj_px > 0.0 && self.rel_depth > 0.0 && self.min_views > 0 && self.max_dist > 0.0) {
            return Err(Error::Config("fusion thresholds must all be > 0".into()));
        }
        if !(self.voxel_size >= 0.0) {
            return Err(Error::Config("voxel_size must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Points with optional 8-bit colours.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(Error::InvalidInput("colour count differs from point count".into()));
            }
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("point cloud has non-finite coordinates".into()));
        }
        Ok(())
    }
}

/// Per-view filtering outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredView {
    /// 1 where the pixel is kept.
    pub mask: Tensor,
    /// Consistency-averaged depth (input depth where not kept).
    pub depth: Tensor,
    /// Number of consistent source views per pixel.
    pub consistent: Vec<u16>,
}

/// Bilinear sample of inverse depth at `(u, v)`; `None` if any contributing
/// neighbour has no depth. Exact for planar surfaces.
pub fn sample_depth(depth: &Tensor, u: f64, v: f64) -> Option<f64> {
    let (h, w) = (depth.dim(0), depth.dim(1));
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (ax, ay) = (u - x0 as f64, v - y0 as f64);
    let mut inv = 0.0;
    for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
        for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let d = depth.data()[(y0 + dy).min(h - 1) * w + (x0 + dx).min(w - 1)];
            if !(d > 0.0 && d.is_finite()) {
                return None;
            }
            inv += wgt / d;
        }
    }
    Some(1.0 / inv)
}

/// Depth of pixel `(x, y)` of `reference` as re-estimated through `src`:
/// project into `src`, read its depth, back-project and project back.
/// Returns the reprojected pixel and depth.
pub fn reproject_through(x: f64, y: f64, d: f64, reference: &Camera, src: &Camera, src_depth: &Tensor) -> Option<(f64, f64, f64)> {
    let p = back_project(&Vector2::new(x, y), d, reference).ok()?;
    let s = project_to_view(&p, src);
    if s.behind_camera() {
        return None;
    }
    let ds = sample_depth(src_depth, s.pixel.x, s.pixel.y)?;
    let q = back_project(&s.pixel, ds, src).ok()?;
    let r = project_to_view(&q, reference);
    if r.behind_camera() {
        return None;
    }
    Some((r.pixel.x, r.pixel.y, r.depth))
}

/// Keep a pixel iff its confidence reaches the threshold and at least
/// `min_views` sources reproject it within both thresholds; kept depths are
/// replaced by the mean of the own depth and the consistent reprojected ones.
/// Sources are all other views unless `pairing` is given.
pub fn filter_depth_maps(
    depths: &[Tensor],
    confidences: &[Tensor],
    cams: &[Camera],
    pairing: Option<&ScenePairing>,
    cfg: &FusionConfig,
) -> Result<Vec<FilteredView>> {
    cfg.validate()?;
    let n = depths.len();
    if n < 2 || confidences.len() != n || cams.len() != n {
        return Err(Error::InvalidInput(format!(
            "filtering needs ≥ 2 aligned views, got {n} depths, {} confidences, {} cameras",
            confidences.len(),
            cams.len()
        )));
    }
    for (d, c) in depths.iter().zip(confidences) {
        if d.ndim() != 2 || d.shape() != c.shape() {
            return Err(Error::Shape(format!("depth {:?} vs confidence {:?}", d.shape(), c.shape())));
        }
    }
    let sources: Vec<Vec<usize>> = (0..n)
        .map(|r| match pairing {
            Some(p) => p.sources(r).map(|s| s.iter().map(|e| e.0).filter(|&j| j < n).collect()),
            None => Ok((0..n).filter(|&j| j != r).collect()),
        })
        .collect::<Result<_>>()?;
    Ok(par::map_range(n, |r| {
        let (h, w) = (depths[r].dim(0), depths[r].dim(1));
        let mut mask = Tensor::zeros(&[h, w]);
        let mut depth = depths[r].clone();
        let mut consistent = vec![0u16; h * w];
        for i in 0..h * w {
            let d = depths[r].data()[i];
            if !(confidences[r].data()[i] >= cfg.confidence) || !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let (mut count, mut sum) = (0usize, d);
            for &s in &sources[r] {
                if let Some((xr, yr, dr)) = reproject_through(x, y, d, &cams[r], &cams[s], &depths[s]) {
                    if (xr - x).hypot(yr - y) < cfg.reproj_px && (dr - d).abs() / d < cfg.rel_depth {
                        count += 1;
                        sum += dr;
                    }
                }
            }
            consistent[i] = count as u16;
            if count >= cfg.min_views {
                mask.data_mut()[i] = 1.0;
                depth.data_mut()[i] = sum / (count + 1) as f64;
            }
        }
        FilteredView { mask, depth, consistent }
    }))
}

/// Back-project every kept pixel with its averaged depth. With
/// `voxel_size > 0` only the first point in each grid cell is kept.
pub fn fuse_point_cloud(views: &[FilteredView], cams: &[Camera], images: Option<&[Tensor]>, voxel_size: f64) -> Result<PointCloud> {
    if views.len() != cams.len() || images.is_some_and(|im| im.len() != views.len()) {
        return Err(Error::InvalidInput("views, cameras and images must align".into()));
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut seen = HashSet::new();
    for (v, (fv, cam)) in views.iter().zip(cams).enumerate() {
        let (h, w) = (fv.mask.dim(0), fv.mask.dim(1));
        for i in 0..h * w {
            if fv.mask.data()[i] == 0.0 {
                continue;
            }
            let p = back_project(&Vector2::new((i % w) as f64, (i / w) as f64), fv.depth.data()[i], cam)?;
            let p = [p.x, p.y, p.z];
            if voxel_size > 0.0 {
                let key = p.map(|c| (c / voxel_size).floor() as i64);
                if !seen.insert(key) {
                    continue;
                }
            }
            points.push(p);
            if let Some(im) = images {
                let img = &im[v];
                let plane = img.dim(1) * img.dim(2);
                colors.push(std::array::from_fn(|c| (img.data()[c.min(img.dim(0) - 1) * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
    }
    if points.is_empty() {
        log::warn!("fusion produced an empty point cloud");
    }
    Ok(PointCloud { points, colors: images.map(|_| colors) })
}

/// Distance of every point of `from` to its nearest neighbour in `to`.
pub fn nearest_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let tree = KdTree::new(to);
    const CHUNK: usize = 256;
    let chunks = par::map_range(from.len().div_ceil(CHUNK), |c| {
        from[c * CHUNK..((c + 1) * CHUNK).min(from.len())]
            .iter()
            .map(|q| tree.nearest(q).map_or(f64::INFINITY, |(_, d2)| d2.sqrt()))
            .collect::<Vec<_>>()
    });
    chunks.into_iter().flatten().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub overall: f64,
    /// Fractions of distances kept (≤ max_dist) in each direction.
    pub accuracy_inliers: f64,
    pub completeness_inliers: f64,
}

fn inlier_mean(d: &[f64], max_dist: f64) -> (f64, f64) {
    let kept: Vec<f64> = d.iter().copied().filter(|&x| x <= max_dist).collect();
    if kept.is_empty() {
        return (f64::NAN, 0.0);
    }
    (kept.iter().sum::<f64>() / kept.len() as f64, kept.len() as f64 / d.len() as f64)
}

/// Accuracy (prediction to reference), completeness (reference to
/// prediction) and their mean; distances above `max_dist` are discarded.
pub fn evaluate_point_cloud(predicted: &PointCloud, reference: &PointCloud, max_dist: f64) -> Result<CloudMetrics> {
    if predicted.is_empty() || reference.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty point cloud".into()));
    }
    let (accuracy, ai) = inlier_mean(&nearest_distances(&predicted.points, &reference.points), max_dist);
    let (completeness, ci) = inlier_mean(&nearest_distances(&reference.points, &predicted.points), max_dist);
    if ai == 0.0 || ci == 0.0 {
        log::warn!("every nearest-neighbour distance exceeds max_dist {max_dist}");
    }
    Ok(CloudMetrics { accuracy, completeness, overall: (accuracy + completeness) / 2.0, accuracy_inliers: ai, completeness_inliers: ci })
}

fn valid_pixels<'a>(pred: &'a Tensor, gt: &'a Tensor, mask: Option<&'a Tensor>) -> Result<impl Iterator<Item = f64> + 'a> {
    if pred.shape() != gt.shape() || mask.is_some_and(|m| m.shape() != gt.shape()) {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let keep = move |i: usize| mask.is_none_or(|m| m.data()[i] > 0.0) && gt.data()[i] > 0.0 && gt.data()[i].is_finite();
    if !(0..gt.len()).any(keep) {
        return Err(Error::InvalidInput("no valid pixels to evaluate".into()));
    }
    Ok((0..gt.len()).filter(move |&i| keep(i)).map(move |i| (pred.data()[i] - gt.data()[i]).abs()))
}

/// Fraction of valid pixels with `|D − D_gt| < τ` for each threshold. Valid
/// pixels have positive finite ground truth and (if given) a nonzero mask.
pub fn evaluate_depth_accuracy(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>, thresholds: &[f64]) -> Result<Vec<f64>> {
    let errs: Vec<f64> = valid_pixels(pred, gt, mask)?.collect();
    Ok(thresholds.iter().map(|&t| errs.iter().filter(|&&e| e < t).count() as f64 / errs.len() as f64).collect())
}

/// Mean absolute depth error over valid pixels.
pub fn mean_abs_depth_error(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    let errs: Vec<f64> = valid_pixels(pred, gt, mask)?.collect();
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Ground-truth depth of view `id` of the scene at `root`.
pub fn load_gt_depth(root: &Path, id: usize) -> Result<Tensor> {
    read_pfm(&SceneLayout::new(root).gt_depth_path(id))
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud: Option<CloudMetrics>,
    /// `(threshold, fraction)` pairs.
    pub depth_thresholds: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abs_error: Option<f64>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        if let Some(c) = &self.cloud {
            s += &format!("{:<14}{:>12}\n", "metric", "value");
            s += &format!("{:<14}{:>12.6}\n{:<14}{:>12.6}\n{:<14}{:>12.6}\n", "accuracy", c.accuracy, "completeness", c.completeness, "overall", c.overall);
        }
        if let Some(m) = self.mean_abs_error {
            s += &format!("{:<14}{:>12.6}\n", "mean |err|", m);
        }
        for (t, f) in &self.depth_thresholds {
            s += &format!("{:<14}{:>12.4}\n", format!("< {t}"), f);
        }
        s
    }
}
