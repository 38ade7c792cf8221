//! Weak (geometric) and strong (photometric) augmentation.
//!
//! Images are `[H, W, 3]` arrays in `[0, 1]`; masks are `[H, W]` with values in
//! `{0, 1}`. Every random choice is drawn from the caller's generator in a fixed
//! order, so a pipeline is a pure function of its input and seed.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub resize_scale_range: [f64; 2],
    /// `(height, width)` of the weak view.
    pub crop_size: [usize; 2],
    pub hflip_prob: f64,
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation factor range.
    pub jitter_bcs_range: [f64; 2],
    /// Hue shift range in turns of the hue circle.
    pub jitter_hue_range: [f64; 2],
    pub gray_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: [f64; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            resize_scale_range: [0.75, 1.25],
            crop_size: [64, 64],
            hflip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_bcs_range: [0.5, 1.5],
            jitter_hue_range: [-0.25, 0.25],
            gray_prob: 0.1,
            blur_prob: 0.5,
            blur_sigma_range: [0.1, 2.0],
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("gray_prob", self.gray_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, r) in [
            ("resize_scale_range", self.resize_scale_range),
            ("jitter_bcs_range", self.jitter_bcs_range),
            ("jitter_hue_range", self.jitter_hue_range),
            ("blur_sigma_range", self.blur_sigma_range),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::config(format!("augment.{name} must be an ordered range, got {r:?}")));
            }
        }
        if self.resize_scale_range[0] <= 0.0 || self.jitter_bcs_range[0] < 0.0 || self.blur_sigma_range[0] <= 0.0 {
            return Err(Error::config("augment scale, jitter factor and blur sigma ranges must be positive"));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::config("augment.crop_size must be positive"));
        }
        Ok(())
    }

    /// All stochastic operations off; the weak view is then a centered crop.
    pub fn disabled(crop_size: [usize; 2]) -> Self {
        Self {
            resize_scale_range: [1.0, 1.0],
            crop_size,
            hflip_prob: 0.0,
            jitter_prob: 0.0,
            gray_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Everything needed to replay a weak view's geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub scale: f64,
    /// Size after resizing, before padding.
    pub resized: (usize, usize),
    /// Reflect padding added at the top and left (bottom/right take the rest).
    pub pad: (usize, usize),
    /// Crop origin in the padded image.
    pub origin: (usize, usize),
    pub crop: (usize, usize),
    pub flip: bool,
}

impl Geometry {
    /// Draws a geometry for an `h x w` input. Always consumes the same number
    /// of random values.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let [lo, hi] = cfg.resize_scale_range;
        let u: f64 = rng.random();
        let scale = lo + (hi - lo) * u;
        let rh = ((h as f64 * scale).round() as usize).max(1);
        let rw = ((w as f64 * scale).round() as usize).max(1);
        let (ch, cw) = (cfg.crop_size[0], cfg.crop_size[1]);
        let (ph, pw) = (rh.max(ch), rw.max(cw));
        let pad = ((ph - rh) / 2, (pw - rw) / 2);
        let uy: f64 = rng.random();
        let ux: f64 = rng.random();
        let origin = (
            ((uy * (ph - ch + 1) as f64) as usize).min(ph - ch),
            ((ux * (pw - cw + 1) as f64) as usize).min(pw - cw),
        );
        let flip = rng.random::<f64>() < cfg.hflip_prob;
        Self {
            scale,
            resized: (rh, rw),
            pad,
            origin,
            crop: (ch, cw),
            flip,
        }
    }

    /// Identity-scale geometry with a centered crop.
    pub fn centered(h: usize, w: usize, crop: (usize, usize)) -> Self {
        let (ph, pw) = (h.max(crop.0), w.max(crop.1));
        Self {
            scale: 1.0,
            resized: (h, w),
            pad: ((ph - h) / 2, (pw - w) / 2),
            origin: ((ph - crop.0) / 2, (pw - crop.1) / 2),
            crop,
            flip: false,
        }
    }

    pub fn apply_image(&self, image: &Array3<f64>) -> Array3<f64> {
        let r = resize_bilinear(image, self.resized.0, self.resized.1);
        let p = self.pad_crop(&r.view(), |a, y, x, c| a[[y, x, c]], 3);
        if self.flip {
            hflip3(&p)
        } else {
            p
        }
    }

    pub fn apply_mask(&self, mask: &Array2<u8>) -> Array2<u8> {
        let r = resize_nearest(mask, self.resized.0, self.resized.1);
        let r3 = r.insert_axis(Axis(2));
        let p = self.pad_crop(&r3.view(), |a, y, x, c| a[[y, x, c]], 1);
        let p = p.index_axis(Axis(2), 0).to_owned();
        if self.flip {
            p.slice(ndarray::s![.., ..;-1]).to_owned()
        } else {
            p
        }
    }

    fn pad_crop<T: Copy + Default>(
        &self,
        src: &ndarray::ArrayView3<T>,
        get: impl Fn(&ndarray::ArrayView3<T>, usize, usize, usize) -> T,
        channels: usize,
    ) -> Array3<T> {
        let (rh, rw) = (src.dim().0, src.dim().1);
        let (ch, cw) = self.crop;
        Array3::from_shape_fn((ch, cw, channels), |(y, x, c)| {
            let py = (y + self.origin.0) as isize - self.pad.0 as isize;
            let px = (x + self.origin.1) as isize - self.pad.1 as isize;
            get(src, reflect(py, rh), reflect(px, rw), c)
        })
    }
}

/// Reflect indexing without repeating the edge pixel (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn hflip3(a: &Array3<f64>) -> Array3<f64> {
    a.slice(ndarray::s![.., ..;-1, ..]).to_owned()
}

/// Half-pixel bilinear resize of an `[H, W, C]` image.
pub fn resize_bilinear(image: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = image.dim();
    if (h, w) == (oh, ow) {
        return image.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    Array3::from_shape_fn((oh, ow, c), |(y, x, k)| {
        let (y0, y1, wy) = ty[y];
        let (x0, x1, wx) = tx[x];
        let top = image[[y0, x0, k]] * (1.0 - wx) + image[[y0, x1, k]] * wx;
        let bot = image[[y1, x0, k]] * (1.0 - wx) + image[[y1, x1, k]] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

/// Nearest-neighbour resize (pixel centers) for masks.
pub fn resize_nearest(mask: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (oh, ow) {
        return mask.clone();
    }
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
        mask[[sy, sx]]
    })
}

/// Resize, reflect-pad if needed, crop and optionally flip. The same geometry
/// is applied to the mask.
pub fn weak_augment<R: Rng + ?Sized>(
    image: &Array3<f64>,
    mask: Option<&Array2<u8>>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Array3<f64>, Option<Array2<u8>>, Geometry)> {
    let (h, w, _) = image.dim();
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::invariant(format!(
                "mask {:?} not aligned with image {:?}",
                m.dim(),
                (h, w)
            )));
        }
    }
    let geom = Geometry::sample(cfg, h, w, rng);
    Ok((geom.apply_image(image), mask.map(|m| geom.apply_mask(m)), geom))
}

/// Sampled photometric parameters; `None` means the op is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StrongOps {
    pub jitter: Option<ColorJitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift in turns.
    pub hue: f64,
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

impl StrongOps {
    /// Draws every parameter unconditionally so the stream position is
    /// independent of which ops fire.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> Self {
        let mut uniform = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        let jitter_on = uniform([0.0, 1.0]) < cfg.jitter_prob;
        let jitter = ColorJitter {
            brightness: uniform(cfg.jitter_bcs_range),
            contrast: uniform(cfg.jitter_bcs_range),
            saturation: uniform(cfg.jitter_bcs_range),
            hue: uniform(cfg.jitter_hue_range),
        };
        let grayscale = uniform([0.0, 1.0]) < cfg.gray_prob;
        let blur_on = uniform([0.0, 1.0]) < cfg.blur_prob;
        let sigma = uniform(cfg.blur_sigma_range);
        Self {
            jitter: jitter_on.then_some(jitter),
            grayscale,
            blur_sigma: blur_on.then_some(sigma),
        }
    }

    /// Jitter, then grayscale, then blur.
    pub fn apply(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut x = image.clone();
        if let Some(j) = &self.jitter {
            x = color_jitter(&x, j);
        }
        if self.grayscale {
            x = grayscale(&x);
        }
        if let Some(s) = self.blur_sigma {
            x = gaussian_blur(&x, s);
        }
        x
    }
}

pub fn strong_augment<R: Rng + ?Sized>(image: &Array3<f64>, cfg: &AugmentationConfig, rng: &mut R) -> Array3<f64> {
    StrongOps::sample(cfg, rng).apply(image)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast, saturation and hue in that order, clamping to `[0, 1]`
/// after each.
pub fn color_jitter(image: &Array3<f64>, j: &ColorJitter) -> Array3<f64> {
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let mut x = image.mapv(|v| clamp(v * j.brightness));
    if j.contrast != 1.0 {
        let (h, w, _) = x.dim();
        let n = (h * w).max(1) as f64;
        let mean = x
            .lanes(Axis(2))
            .into_iter()
            .map(|p| luma(p[0], p[1], p[2]))
            .sum::<f64>()
            / n;
        x.mapv_inplace(|v| clamp((v - mean) * j.contrast + mean));
    }
    if j.saturation != 1.0 {
        for mut p in x.lanes_mut(Axis(2)) {
            let l = luma(p[0], p[1], p[2]);
            for c in 0..3 {
                p[c] = clamp((p[c] - l) * j.saturation + l);
            }
        }
    }
    if j.hue != 0.0 {
        for mut p in x.lanes_mut(Axis(2)) {
            let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            let (r, g, b) = hsv_to_rgb((h + j.hue).rem_euclid(1.0), s, v);
            p[0] = clamp(r);
            p[1] = clamp(g);
            p[2] = clamp(b);
        }
    }
    x
}

/// Hue in turns, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn grayscale(image: &Array3<f64>) -> Array3<f64> {
    let mut x = image.clone();
    for mut p in x.lanes_mut(Axis(2)) {
        let l = luma(p[0], p[1], p[2]);
        p.fill(l);
    }
    x
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, reflect borders.
pub fn gaussian_blur(image: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, c) = image.dim();
    let horiz = Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, wt)| wt * image[[y, reflect(x as isize + t as isize - radius, w), k]])
            .sum::<f64>()
    });
    Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, wt)| wt * horiz[[reflect(y as isize + t as isize - radius, h), x, k]])
            .sum::<f64>()
            .clamp(0.0, 1.0)
    })
}
