//! Pinhole cameras, projection, plane-induced homographies and differentiable
//! inverse warping.
//!
//! Pixel centres sit at integer coordinates; `(0, 0)` is the centre of the
//! top-left pixel, `x` runs along the width and `y` down the height. Images are
//! stored channel-first as `[C, H, W]`.

use std::rc::Rc;

use mvs_autograd::{Graph, Tensor, Var};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Intrinsics, world-to-camera pose and depth range of one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Camera {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, depth_min: f64, depth_max: f64) -> Result<Self> {
        let cam = Self { k, r, t, depth_min, depth_max };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidCamera(format!("intrinsics not upper-triangular: {k}")));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        if k[(2, 2)] == 0.0 {
            return Err(Error::SingularIntrinsics(format!("K[2,2] is zero: {k}")));
        }
        let err = (self.r.transpose() * self.r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidCamera(format!("rotation not orthonormal (|RᵀR − I| = {err:e})")));
        }
        if !self.t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max && self.depth_max.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "depth range must satisfy 0 < min < max, got [{}, {}]",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }

    pub fn k_inv(&self) -> Result<Matrix3<f64>> {
        self.k.try_inverse().ok_or_else(|| {
            Error::SingularIntrinsics(format!("cannot invert K (det = {:e}): {}", self.k.determinant(), self.k))
        })
    }

    /// Camera centre in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Principal axis in world coordinates (third row of `R`).
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.r.row(2).transpose()
    }

    /// The same camera observing an image resampled by `scale`; pixel `x'`
    /// of the new image sits at `x'/scale` in the original one.
    pub fn scaled(&self, scale: f64) -> Camera {
        let mut k = self.k;
        for c in 0..3 {
            k[(0, c)] *= scale;
            k[(1, c)] *= scale;
        }
        Camera { k, ..self.clone() }
    }

    /// Unnormalised world-space direction through pixel `(x, y)`, scaled so
    /// that its camera-space depth component is 1.
    pub fn pixel_ray(&self, x: f64, y: f64) -> Result<Vector3<f64>> {
        Ok(self.r.transpose() * (self.k_inv()? * Vector3::new(x, y, 1.0)))
    }
}

/// An image together with its camera.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub view_id: usize,
    /// `[3, H, W]` colours in `[0, 1]`.
    pub image: Tensor,
    pub camera: Camera,
}

impl CameraView {
    pub fn new(view_id: usize, image: Tensor, camera: Camera) -> Result<Self> {
        if image.ndim() != 3 || image.dim(0) != 3 {
            return Err(Error::Shape(format!("image must be [3, H, W], got {:?}", image.shape())));
        }
        camera.validate()?;
        Ok(Self { view_id, image, camera })
    }

    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

impl Projection {
    pub fn behind_camera(&self) -> bool {
        !(self.depth > 0.0)
    }
}

/// Project a world point; `depth ≤ 0` is reported via [`Projection::behind_camera`].
pub fn project_to_view(point: &Vector3<f64>, cam: &Camera) -> Projection {
    let pc = cam.r * point + cam.t;
    let h = cam.k * pc;
    Projection { pixel: Vector2::new(h.x / h.z, h.y / h.z), depth: pc.z }
}

/// World point seen at `pixel` with camera-space depth `depth`.
pub fn back_project(pixel: &Vector2<f64>, depth: f64, cam: &Camera) -> Result<Vector3<f64>> {
    let pc = depth * (cam.k_inv()? * Vector3::new(pixel.x, pixel.y, 1.0));
    Ok(cam.r.transpose() * (pc - cam.t))
}

/// Homography mapping reference pixels on the fronto-parallel plane at depth
/// `d` (reference camera frame) to source pixels. `d = ∞` yields the infinite
/// homography.
///
/// With world-frame translations `t̃ = Rᵀt` and reference principal axis `n₁`:
/// `H = K_s R_s (I − (t̃₁ − t̃_s) n₁ᵀ / d) R₁ᵀ K₁⁻¹`.
pub fn compute_homography(d: f64, src: &Camera, reference: &Camera) -> Result<Matrix3<f64>> {
    if !(d > 0.0) {
        return Err(Error::InvalidInput(format!("homography depth must be positive, got {d}")));
    }
    let k1_inv = reference.k_inv()?;
    src.k_inv()?;
    let mut mid = Matrix3::identity();
    if d.is_finite() {
        let t1 = reference.r.transpose() * reference.t;
        let ts = src.r.transpose() * src.t;
        mid -= (t1 - ts) * reference.principal_axis().transpose() / d;
    }
    Ok(src.k * src.r * mid * reference.r.transpose() * k1_inv)
}

/// Per-pixel affine form of the reference-to-source warp: the homogeneous
/// source pixel of reference pixel `i` at depth `d` is `d·aᵢ + b`.
#[derive(Clone, Debug)]
pub struct WarpCoefficients {
    pub height: usize,
    pub width: usize,
    pub a: Vec<[f64; 3]>,
    pub b: [f64; 3],
}

impl WarpCoefficients {
    pub fn new(reference: &Camera, src: &Camera, height: usize, width: usize) -> Result<Self> {
        let pixels: Vec<(f64, f64)> =
            (0..height).flat_map(|y| (0..width).map(move |x| (x as f64, y as f64))).collect();
        let mut coef = Self::for_pixels(reference, src, &pixels)?;
        coef.height = height;
        coef.width = width;
        Ok(coef)
    }

    /// Coefficients for an arbitrary list of reference pixels, laid out as a
    /// `1 × n` map.
    pub fn for_pixels(reference: &Camera, src: &Camera, pixels: &[(f64, f64)]) -> Result<Self> {
        let k_ref_inv = reference.k_inv()?;
        src.k_inv()?;
        let r_rel = src.r * reference.r.transpose();
        let t_rel = src.t - r_rel * reference.t;
        let m = src.k * r_rel * k_ref_inv;
        let bv = src.k * t_rel;
        let a = pixels
            .iter()
            .map(|&(x, y)| {
                let v = m * Vector3::new(x, y, 1.0);
                [v.x, v.y, v.z]
            })
            .collect();
        Ok(Self { height: 1, width: pixels.len(), a, b: [bv.x, bv.y, bv.z] })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Homogeneous source coordinates of pixel `i` at depth `d`.
    #[inline]
    pub fn homogeneous(&self, i: usize, d: f64) -> [f64; 3] {
        let a = &self.a[i];
        [d * a[0] + self.b[0], d * a[1] + self.b[1], d * a[2] + self.b[2]]
    }

    /// Source pixel of reference pixel `i` at depth `d`, or `None` when the
    /// depth is non-finite or the point lies behind the source camera.
    #[inline]
    pub fn project(&self, i: usize, d: f64) -> Option<(f64, f64)> {
        if !d.is_finite() {
            return None;
        }
        let [u, v, z] = self.homogeneous(i, d);
        (z > 0.0).then(|| (u / z, v / z))
    }
}

/// Output of [`inverse_warp`].
pub struct WarpResult<'g> {
    /// `[C, H, W]`, zero where the mask is zero.
    pub warped: Var<'g>,
    /// `[H, W]` with entries in `{0, 1}`.
    pub mask: Tensor,
}

/// Slack for round-off when testing `p̂ ∈ [0, W−1] × [0, H−1]`.
const BOUNDS_EPS: f64 = 1e-9;

pub(crate) fn in_bounds(x: f64, y: f64, h: usize, w: usize) -> bool {
    x >= -BOUNDS_EPS && y >= -BOUNDS_EPS && x <= (w - 1) as f64 + BOUNDS_EPS && y <= (h - 1) as f64 + BOUNDS_EPS
}

/// Source pixel coordinates `[H·W, 2]` for a reference depth map `[H, W]`,
/// differentiable in the depth. Invalid pixels get NaN coordinates, which
/// sample zero and pass no gradient. Also returns the validity mask.
pub fn warp_coordinates<'g>(coef: &WarpCoefficients, depth: &Var<'g>, src_h: usize, src_w: usize) -> (Var<'g>, Tensor) {
    let dv = depth.value();
    let n = coef.len();
    assert_eq!(dv.len(), n, "depth map size does not match warp coefficients");
    let mut coords = vec![f64::NAN; 2 * n];
    let mut mask = vec![0.0; n];
    for i in 0..n {
        if let Some((x, y)) = coef.project(i, dv.data()[i]) {
            coords[2 * i] = x;
            coords[2 * i + 1] = y;
            if in_bounds(x, y, src_h, src_w) {
                mask[i] = 1.0;
            }
        }
    }
    let coef_rc = Rc::new(coef.clone());
    let coords_t = Tensor::new(&[n, 2], coords);
    let depth_shape = dv.shape().to_vec();
    let out = depth.graph().custom(&[*depth], coords_t, move |g| {
        let mut gd = vec![0.0; n];
        for (i, gdi) in gd.iter_mut().enumerate() {
            let d = dv.data()[i];
            if !d.is_finite() {
                continue;
            }
            let [u, v, z] = coef_rc.homogeneous(i, d);
            if !(z > 0.0) {
                continue;
            }
            let a = &coef_rc.a[i];
            let dx = (a[0] * z - u * a[2]) / (z * z);
            let dy = (a[1] * z - v * a[2]) / (z * z);
            *gdi = g.data()[2 * i] * dx + g.data()[2 * i + 1] * dy;
        }
        vec![Some(Tensor::new(&depth_shape, gd))]
    });
    (out, Tensor::new(&[coef.height, coef.width], mask))
}

/// Resample `image` (`[C, Hs, Ws]`, seen by `src`) into the reference view
/// using the reference depth map `depth` (`[H, W]`). Differentiable in the
/// depth and in the image.
pub fn inverse_warp_image<'g>(image: &Var<'g>, src: &Camera, reference: &Camera, depth: &Var<'g>) -> Result<WarpResult<'g>> {
    let ishape = image.shape();
    let dshape = depth.shape();
    if ishape.len() != 3 || dshape.len() != 2 {
        return Err(Error::Shape(format!("inverse_warp expects [C,H,W] image and [H,W] depth, got {ishape:?} and {dshape:?}")));
    }
    let (h, w) = (dshape[0], dshape[1]);
    let coef = WarpCoefficients::new(reference, src, h, w)?;
    let (coords, mask) = warp_coordinates(&coef, depth, ishape[1], ishape[2]);
    let g = depth.graph();
    let sampled = image.grid_sample_2d(&coords);
    let m = g.constant(mask.clone().reshape(&[1, h * w]));
    let warped = sampled.mul(&m).reshape(&[ishape[0], h, w]);
    Ok(WarpResult { warped, mask })
}

/// [`inverse_warp_image`] with the source image taken from a [`CameraView`].
pub fn inverse_warp<'g>(g: &'g Graph, source: &CameraView, reference: &Camera, depth: &Var<'g>) -> Result<WarpResult<'g>> {
    let img = g.constant(source.image.clone());
    inverse_warp_image(&img, &source.camera, reference, depth)
}

/// Rotation from axis-angle (Rodrigues).
pub fn rotation_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

/// World-to-camera rotation and translation for a camera at `eye` looking at
/// `target`, with image `y` pointing roughly along `−up`.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let z = (target - eye).normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * eye);
    (r, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_camera(rng: &mut impl Rng) -> Camera {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let r = rotation_from_axis_angle(&axis, rng.random_range(-0.4..0.4));
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
        let f = rng.random_range(40.0..120.0);
        let k = Matrix3::new(f, 0.0, rng.random_range(20.0..40.0), 0.0, f * rng.random_range(0.9..1.1), rng.random_range(15.0..30.0), 0.0, 0.0, 1.0);
        Camera::new(k, r, t, 1.0, 10.0).unwrap()
    }

    #[test]
    fn projection_trivial_cases() {
        let cam = Camera::new(Matrix3::identity(), Matrix3::identity(), Vector3::zeros(), 0.5, 10.0).unwrap();
        let p = project_to_view(&Vector3::new(1.0, 2.0, 4.0), &cam);
        assert_eq!(p.pixel, Vector2::new(0.25, 0.5));
        assert_eq!(p.depth, 4.0);
        assert!(project_to_view(&Vector3::new(0.0, 0.0, -1.0), &cam).behind_camera());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = random_camera(&mut rng);
        let on_axis = cam.center() + 3.5 * cam.principal_axis();
        let p = project_to_view(&on_axis, &cam);
        assert!((p.pixel.x - cam.k[(0, 2)]).abs() < 1e-9 && (p.pixel.y - cam.k[(1, 2)]).abs() < 1e-9);
        assert!((p.depth - 3.5).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_homogeneous_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(3.0..6.0));
            // 3x4 projection matrix P = K [R | t] applied to (x, 1).
            let mut p = [[0.0; 4]; 3];
            for i in 0..3 {
                for j in 0..4 {
                    for l in 0..3 {
                        let rt = if j < 3 { cam.r[(l, j)] } else { cam.t[l] };
                        p[i][j] += cam.k[(i, l)] * rt;
                    }
                }
            }
            let xh = [x.x, x.y, x.z, 1.0];
            let h: Vec<f64> = (0..3).map(|i| (0..4).map(|j| p[i][j] * xh[j]).sum()).collect();
            let got = project_to_view(&x, &cam);
            assert!((got.pixel.x - h[0] / h[2]).abs() < 1e-9);
            assert!((got.pixel.y - h[1] / h[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn homography_identity_and_infinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_camera(&mut rng);
        let b = random_camera(&mut rng);
        for d in [0.5, 2.0, 100.0] {
            let h = compute_homography(d, &a, &a).unwrap();
            assert!((h - Matrix3::identity()).abs().max() < 1e-12);
        }
        let h = compute_homography(f64::INFINITY, &b, &a).unwrap();
        let want = b.k * b.r * a.r.transpose() * a.k.try_inverse().unwrap();
        assert!((h - want).abs().max() < 1e-12);
        assert!(compute_homography(0.0, &b, &a).is_err());
    }

    #[test]
    fn homography_matches_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (r, s) = (random_camera(&mut rng), random_camera(&mut rng));
            let d = rng.random_range(1.0..10.0);
            let px = Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..48.0));
            let world = back_project(&px, d, &r).unwrap();
            let want = project_to_view(&world, &s).pixel;
            let hp = compute_homography(d, &s, &r).unwrap() * Vector3::new(px.x, px.y, 1.0);
            assert!((hp.x / hp.z - want.x).abs() < 1e-6 && (hp.y / hp.z - want.y).abs() < 1e-6);
        }
    }

    #[test]
    fn singular_intrinsics_rejected() {
        let mut cam = Camera::new(Matrix3::identity(), Matrix3::identity(), Vector3::zeros(), 1.0, 2.0).unwrap();
        cam.k[(0, 0)] = 0.0;
        assert!(cam.k_inv().is_err());
        let ok = cam.clone();
        assert!(compute_homography(1.0, &ok, &cam).is_err());
    }

    #[test]
    fn invalid_cameras_rejected() {
        let k = Matrix3::new(10.0, 0.0, 5.0, 0.0, 10.0, 5.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(k, Matrix3::identity(), Vector3::zeros(), 2.0, 1.0).is_err());
        assert!(Camera::new(k, Matrix3::identity() * 2.0, Vector3::zeros(), 1.0, 2.0).is_err());
        assert!(Camera::new(-k, Matrix3::identity(), Vector3::zeros(), 1.0, 2.0).is_err());
    }

    fn smooth_image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            0.5 + 0.4 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.25).cos())
        })
    }

    #[test]
    fn warp_with_identical_cameras_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = random_camera(&mut rng);
        let img = smooth_image(12, 16);
        let g = Graph::new();
        let depth = g.constant(Tensor::from_fn(&[12, 16], |i| 2.0 + (i % 7) as f64 * 0.3));
        let view = CameraView::new(0, img.clone(), cam.clone()).unwrap();
        let res = inverse_warp(&g, &view, &cam, &depth).unwrap();
        assert!(res.mask.data().iter().all(|&m| m == 1.0));
        for (a, b) in res.warped.value().data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_out_of_view_masks_everything() {
        let k = Matrix3::new(20.0, 0.0, 8.0, 0.0, 20.0, 6.0, 0.0, 0.0, 1.0);
        let reference = Camera::new(k, Matrix3::identity(), Vector3::zeros(), 0.5, 10.0).unwrap();
        let src = Camera::new(k, Matrix3::identity(), Vector3::new(100.0, 0.0, 0.0), 0.5, 10.0).unwrap();
        let g = Graph::new();
        let depth = g.constant(Tensor::full(&[12, 16], 2.0));
        let res = inverse_warp(&g, &CameraView::new(1, smooth_image(12, 16), src).unwrap(), &reference, &depth).unwrap();
        assert!(res.mask.data().iter().all(|&m| m == 0.0));
        assert!(res.warped.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_depth_is_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = random_camera(&mut rng);
        let g = Graph::new();
        let mut d = Tensor::full(&[4, 5], 3.0);
        d.data_mut()[7] = f64::NAN;
        d.data_mut()[8] = f64::INFINITY;
        d.data_mut()[9] = -1.0;
        let depth = g.leaf(d);
        let view = CameraView::new(0, smooth_image(4, 5), cam.clone()).unwrap();
        let res = inverse_warp(&g, &view, &cam, &depth).unwrap();
        for i in [7, 8, 9] {
            assert_eq!(res.mask.data()[i], 0.0);
        }
        let grads = g.backward(res.warped.sum());
        assert!(grads.get(depth).unwrap().all_finite());
    }

    #[test]
    fn warp_matches_plane_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = Matrix3::new(30.0, 0.0, 15.5, 0.0, 30.0, 11.5, 0.0, 0.0, 1.0);
        let reference = Camera::new(k, Matrix3::identity(), Vector3::zeros(), 1.0, 10.0).unwrap();
        let (r, t) = look_at(&Vector3::new(0.3, -0.1, 0.0), &Vector3::new(0.0, 0.0, 4.0), &Vector3::new(0.0, -1.0, 0.0));
        let src = Camera::new(k, r, t, 1.0, 10.0).unwrap();
        let (h, w) = (24, 32);
        let img = smooth_image(h, w);
        let d_plane = 4.0 + rng.random_range(0.0..0.1);
        let g = Graph::new();
        let depth = g.constant(Tensor::full(&[h, w], d_plane));
        let view = CameraView::new(1, img.clone(), src.clone()).unwrap();
        let res = inverse_warp(&g, &view, &reference, &depth).unwrap();
        let hm = compute_homography(d_plane, &src, &reference).unwrap();
        let mut coords = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let p = hm * Vector3::new(x as f64, y as f64, 1.0);
                coords.extend([p.x / p.z, p.y / p.z]);
            }
        }
        let direct = mvs_autograd::ops::sample::bilinear_sample(&img, &Tensor::new(&[h * w, 2], coords));
        let warped = res.warped.value();
        let mut checked = 0;
        for i in 0..h * w {
            if res.mask.data()[i] == 1.0 {
                checked += 1;
                for c in 0..3 {
                    assert!((warped.data()[c * h * w + i] - direct.data()[c * h * w + i]).abs() < 1e-5);
                }
            }
        }
        assert!(checked > h * w / 2);
    }

    #[test]
    fn plane_sweep_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (r, s) = (random_camera(&mut rng), random_camera(&mut rng));
        let d = 4.0;
        let coef = WarpCoefficients::new(&r, &s, 10, 10).unwrap();
        let (x, y) = coef.project(34, d).unwrap();
        // The plane in the reference frame, seen from the source, maps back
        // with the inverse of the forward homography.
        let hm = compute_homography(d, &s, &r).unwrap().try_inverse().unwrap();
        let back = hm * Vector3::new(x, y, 1.0);
        assert!((back.x / back.z - 4.0).abs() < 1e-6 && (back.y / back.z - 3.0).abs() < 1e-6);
    }

    #[test]
    fn warp_gradient_matches_finite_differences() {
        let k = Matrix3::new(20.0, 0.0, 9.5, 0.0, 20.0, 7.5, 0.0, 0.0, 1.0);
        let reference = Camera::new(k, Matrix3::identity(), Vector3::zeros(), 1.0, 10.0).unwrap();
        let (r, t) = look_at(&Vector3::new(0.4, 0.1, 0.0), &Vector3::new(0.0, 0.0, 4.0), &Vector3::new(0.0, -1.0, 0.0));
        let src = Camera::new(k, r, t, 1.0, 10.0).unwrap();
        let (h, w) = (16, 20);
        let img = smooth_image(h, w);
        let base = Tensor::from_fn(&[h, w], |i| 3.7 + 0.02 * ((i % w) as f64));
        let eval = |d: &Tensor, pix: usize| {
            let g = Graph::new();
            let dv = g.constant(d.clone());
            let res = inverse_warp_image(&g.constant(img.clone()), &src, &reference, &dv).unwrap();
            res.warped.value().data()[pix]
        };
        let g = Graph::new();
        let dv = g.leaf(base.clone());
        let res = inverse_warp_image(&g.constant(img.clone()), &src, &reference, &dv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 20 {
            let (y, x) = (rng.random_range(2..h - 2), rng.random_range(2..w - 2));
            let pix = y * w + x;
            if res.mask.data()[pix] == 0.0 {
                continue;
            }
            let c = rng.random_range(0..3);
            let out = c * h * w + pix;
            let mut seed = Tensor::zeros(&[3, h, w]);
            seed.data_mut()[out] = 1.0;
            let grads = g.backward_with(res.warped, seed);
            let analytic = grads.get(dv).unwrap().data()[pix];
            let step = 1e-3;
            let (mut up, mut dn) = (base.clone(), base.clone());
            up.data_mut()[pix] += step;
            dn.data_mut()[pix] -= step;
            let numeric = (eval(&up, out) - eval(&dn, out)) / (2.0 * step);
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!((analytic - numeric).abs() / scale < 1e-3, "pixel {pix}: {analytic} vs {numeric}");
            checked += 1;
        }
    }
}
