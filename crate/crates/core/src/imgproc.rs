//! Plain (non-differentiable) image operations on `[C, H, W]` tensors.

use mvs_autograd::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Halve the resolution: `[1 2 1]²/16` blur with edge clamping, sampled at
/// even pixels. Output pixel `i` sits at input pixel `2i`, matching a
/// stride-2 convolution with padding 1.
pub fn downsample_half(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let k = [1.0, 2.0, 1.0];
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    Tensor::from_fn(&[c, ho, wo], |i| {
        let (ch, y, x) = (i / (ho * wo), (i / wo) % ho, i % wo);
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        for (dy, ky) in k.iter().enumerate() {
            for (dx, kx) in k.iter().enumerate() {
                let yy = clamp(2 * y as i64 + dy as i64 - 1, h);
                let xx = clamp(2 * x as i64 + dx as i64 - 1, w);
                acc += ky * kx * plane[yy * w + xx];
            }
        }
        acc / 16.0
    })
}

/// `levels` successive halvings; element 0 is the input itself.
pub fn pyramid(img: &Tensor, levels: usize) -> Vec<Tensor> {
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample_half(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Bilinear resampling of an `[H, W]` map to `[out_h, out_w]`, where output
/// pixel `x` reads input position `x · factor` (clamped to the border).
pub fn resample_map(map: &Tensor, out_h: usize, out_w: usize, factor: f64) -> Tensor {
    let (h, w) = (map.dim(0), map.dim(1));
    Tensor::from_fn(&[out_h, out_w], |i| {
        let (y, x) = (i / out_w, i % out_w);
        let fy = (y as f64 * factor).clamp(0.0, (h - 1) as f64);
        let fx = (x as f64 * factor).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ay, ax) = (fy - y0 as f64, fx - x0 as f64);
        let at = |yy: usize, xx: usize| map.data()[yy * w + xx];
        (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1))
    })
}

/// Colour-fluctuation ranges: brightness and contrast offsets are drawn from
/// `±brightness` / `±contrast`, gamma from `[gamma_min, gamma_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { brightness: 0.2, contrast: 0.2, gamma_min: 0.8, gamma_max: 1.25 }
    }
}

impl JitterConfig {
    pub fn identity() -> Self {
        Self { brightness: 0.0, contrast: 0.0, gamma_min: 1.0, gamma_max: 1.0 }
    }
}

/// One draw of jitter parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
}

impl Jitter {
    pub fn sample(cfg: &JitterConfig, rng: &mut impl Rng) -> Self {
        let sym = |r: f64, rng: &mut dyn rand::RngCore| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let brightness = sym(cfg.brightness, rng);
        let contrast = sym(cfg.contrast, rng);
        let gamma = if cfg.gamma_max > cfg.gamma_min {
            rng.random_range(cfg.gamma_min..=cfg.gamma_max)
        } else {
            cfg.gamma_min
        };
        Self { brightness, contrast, gamma }
    }

    /// Gamma, then contrast about the image mean, then brightness; result
    /// clamped to `[0, 1]`.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        if self.brightness == 0.0 && self.contrast == 0.0 && self.gamma == 1.0 {
            return img.clone();
        }
        let g = img.map(|v| v.max(0.0).powf(self.gamma));
        let mean = g.mean();
        g.map(|v| ((v - mean) * (1.0 + self.contrast) + mean + self.brightness).clamp(0.0, 1.0))
    }
}
