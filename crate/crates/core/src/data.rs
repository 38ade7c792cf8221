//! Dataset layout, image and mask I/O, epoch sampling and the synthetic toy
//! dataset.
//!
//! Layout under a dataset root:
//!
//! ```text
//! labeled/images/*.png    labeled/masks/*.png     (paired by file stem)
//! unlabeled/images/*.png
//! <split>/images/*.png    <split>/masks/*.png     (evaluation splits, e.g. `val`)
//! ```
//!
//! Masks are 8-bit single-channel PNGs with 0 = background and 255 = water;
//! on load any value >= 128 becomes 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::s2match::engine::{stream, Purpose};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub labeled: Vec<(PathBuf, PathBuf)>,
    pub unlabeled: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Evaluation split directory name.
    pub val_split: String,
    /// Share of the unlabeled images beyond the labeled count that is used:
    /// 0 keeps as many unlabeled images as labeled ones, 1 keeps all.
    pub unlabeled_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            val_split: "val".into(),
            unlabeled_ratio: 1.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.unlabeled_ratio) {
            return Err(Error::config(format!(
                "data.unlabeled_ratio must be in [0, 1], got {}",
                self.unlabeled_ratio
            )));
        }
        Ok(())
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn pair(images_dir: &Path, masks_dir: &Path, problems: &mut Vec<String>) -> Result<Vec<(PathBuf, PathBuf)>> {
    for d in [images_dir, masks_dir] {
        if !d.is_dir() {
            problems.push(format!("missing directory {}", d.display()));
        }
    }
    if !problems.is_empty() {
        return Ok(Vec::new());
    }
    let images = list_images(images_dir)?;
    let masks: BTreeMap<String, PathBuf> = list_images(masks_dir)?.into_iter().map(|p| (stem(&p), p)).collect();
    let mut used = std::collections::BTreeSet::new();
    let mut pairs = Vec::new();
    for img in images {
        let s = stem(&img);
        match masks.get(&s) {
            Some(m) => {
                used.insert(s);
                let di = image::image_dimensions(&img);
                let dm = image::image_dimensions(m);
                match (di, dm) {
                    (Ok(a), Ok(b)) if a == b => pairs.push((img, m.clone())),
                    (Ok(a), Ok(b)) => problems.push(format!(
                        "mask {} is {}x{} but image {} is {}x{}",
                        m.display(),
                        b.0,
                        b.1,
                        img.display(),
                        a.0,
                        a.1
                    )),
                    (Err(e), _) => problems.push(format!("cannot read {}: {e}", img.display())),
                    (_, Err(e)) => problems.push(format!("cannot read {}: {e}", m.display())),
                }
            }
            None => problems.push(format!("image {} has no mask", img.display())),
        }
    }
    for (s, m) in &masks {
        if !used.contains(s) {
            problems.push(format!("orphan mask {}", m.display()));
        }
    }
    Ok(pairs)
}

/// Scans the training split (`labeled/` and `unlabeled/`).
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut problems = Vec::new();
    let labeled = pair(&root.join("labeled/images"), &root.join("labeled/masks"), &mut problems)?;
    let udir = root.join("unlabeled/images");
    let unlabeled = if udir.is_dir() {
        list_images(&udir)?
    } else {
        problems.push(format!("missing directory {}", udir.display()));
        Vec::new()
    };
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    Ok(DatasetManifest {
        split: "train".into(),
        labeled,
        unlabeled,
    })
}

/// Scans an evaluation split `<root>/<split>/{images,masks}`.
pub fn scan_split(root: &Path, split: &str) -> Result<DatasetManifest> {
    let mut problems = Vec::new();
    let base = root.join(split);
    let labeled = pair(&base.join("images"), &base.join("masks"), &mut problems)?;
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    Ok(DatasetManifest {
        split: split.into(),
        labeled,
        unlabeled: Vec::new(),
    })
}

/// RGB image as `[H, W, 3]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
    }))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn to_rgb8(image: &Array3<f64>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_image(image: &Array3<f64>, path: &Path) -> Result<()> {
    to_rgb8(image).save(path).map_err(|e| image_err(path, e))
}

/// PNG bytes of an `[H, W, 3]` image in `[0, 1]`.
pub fn encode_png(image: &Array3<f64>) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb8(image)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Writes `{0, 1}` as `{0, 255}`.
pub fn save_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }]));
    img.save(path).map_err(|e| image_err(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Array3<f64>,
    pub mask: Array2<u8>,
}

/// Decoded training data, with the unlabeled pool already subsampled.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<Array3<f64>>,
}

/// Number of unlabeled images kept for a given ratio.
pub fn unlabeled_pool_size(n_labeled: usize, n_unlabeled: usize, ratio: f64) -> usize {
    if n_unlabeled <= n_labeled {
        return n_unlabeled;
    }
    let extra = (n_unlabeled - n_labeled) as f64;
    n_labeled + (ratio * extra).round() as usize
}

pub fn load_labeled(pairs: &[(PathBuf, PathBuf)]) -> Result<Vec<LabeledSample>> {
    pairs
        .iter()
        .map(|(i, m)| {
            Ok(LabeledSample {
                image: load_image(i)?,
                mask: load_mask(m)?,
            })
        })
        .collect()
}

/// Loads labeled data and a seeded subset of the unlabeled pool.
pub fn load_train_data(manifest: &DatasetManifest, cfg: &DataConfig, seed: u64) -> Result<TrainData> {
    let labeled = load_labeled(&manifest.labeled)?;
    let keep = unlabeled_pool_size(manifest.labeled.len(), manifest.unlabeled.len(), cfg.unlabeled_ratio);
    let mut idx: Vec<usize> = (0..manifest.unlabeled.len()).collect();
    idx.shuffle(&mut stream(seed, 0, Purpose::Init));
    let mut idx: Vec<usize> = idx.into_iter().take(keep).collect();
    idx.sort_unstable();
    let unlabeled = idx.iter().map(|&i| load_image(&manifest.unlabeled[i])).collect::<Result<_>>()?;
    Ok(TrainData { labeled, unlabeled })
}

/// Indices and augmentation seeds for one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub labeled_seeds: Vec<u64>,
    pub unlabeled_seeds: Vec<u64>,
}

/// Materialized mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<Array3<f64>>,
    pub labeled_seeds: Vec<u64>,
    pub unlabeled_seeds: Vec<u64>,
}

impl BatchPlan {
    pub fn materialize(&self, data: &TrainData) -> Batch {
        Batch {
            labeled: self.labeled.iter().map(|&i| data.labeled[i].clone()).collect(),
            unlabeled: self.unlabeled.iter().map(|&i| data.unlabeled[i].clone()).collect(),
            labeled_seeds: self.labeled_seeds.clone(),
            unlabeled_seeds: self.unlabeled_seeds.clone(),
        }
    }
}

pub fn batches_per_epoch(n_labeled: usize, b_l: usize) -> usize {
    n_labeled.div_ceil(b_l).max(1)
}

/// Batch plans for one epoch, a pure function of `(seed, epoch)`. Labeled
/// images are shuffled and the last batch is topped up from the front of the
/// shuffled order; the unlabeled pool is shuffled independently and cycled.
pub fn sample_epoch(n_labeled: usize, n_unlabeled: usize, b_l: usize, b_u: usize, seed: u64, epoch: u64) -> Result<Vec<BatchPlan>> {
    if n_labeled == 0 {
        return Err(Error::Dataset(vec!["no labeled images".into()]));
    }
    let mut rng = stream(seed, epoch, Purpose::Epoch);
    let n_batches = batches_per_epoch(n_labeled, b_l);
    let mut lab: Vec<usize> = (0..n_labeled).collect();
    lab.shuffle(&mut rng);
    let lab_seq: Vec<usize> = if b_l > n_labeled {
        log::warn!("batch_labeled {b_l} exceeds {n_labeled} labeled images; sampling with replacement");
        (0..b_l).map(|_| rng.random_range(0..n_labeled)).collect()
    } else {
        (0..n_batches * b_l).map(|k| lab[k % n_labeled]).collect()
    };
    let mut unl: Vec<usize> = (0..n_unlabeled).collect();
    unl.shuffle(&mut rng);
    let b_u = if n_unlabeled == 0 { 0 } else { b_u };
    let mut plans = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let labeled: Vec<usize> = lab_seq[b * b_l..(b + 1) * b_l].to_vec();
        let unlabeled: Vec<usize> = (0..b_u).map(|k| unl[(b * b_u + k) % n_unlabeled]).collect();
        let labeled_seeds = (0..labeled.len()).map(|_| rng.random()).collect();
        let unlabeled_seeds = (0..unlabeled.len()).map(|_| rng.random()).collect();
        plans.push(BatchPlan {
            labeled,
            unlabeled,
            labeled_seeds,
            unlabeled_seeds,
        });
    }
    Ok(plans)
}

/// Parameters of the synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub image_size: [usize; 2],
    /// Accepted range of the water fraction per mask.
    pub coverage_range: [f64; 2],
    pub max_blobs: usize,
    /// How far water colour moves from the local background (0 = invisible).
    pub water_contrast: f64,
    /// Amplitude of the ripple pattern inside water.
    pub ripple_amplitude: f64,
    /// Std of per-pixel Gaussian noise everywhere.
    pub noise_std: f64,
    /// Number of bright specular streaks per image.
    pub reflections: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            coverage_range: [0.05, 0.40],
            max_blobs: 3,
            water_contrast: 0.35,
            ripple_amplitude: 0.06,
            noise_std: 0.04,
            reflections: 2,
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// One scene: a textured street-like background with low-contrast elliptical
/// water regions carrying ripples and reflections. Returns the image and its
/// exact mask.
pub fn toy_scene<R: Rng + ?Sized>(cfg: &ToyConfig, rng: &mut R) -> (Array3<f64>, Array2<u8>) {
    let [h, w] = cfg.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let mask = loop {
        let n = rng.random_range(1..=cfg.max_blobs.max(1));
        let blobs: Vec<Blob> = (0..n)
            .map(|_| Blob {
                cy: rng.random_range(0.1..0.9) * hf,
                cx: rng.random_range(0.1..0.9) * wf,
                ry: rng.random_range(0.08..0.3) * hf,
                rx: rng.random_range(0.1..0.4) * wf,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let m = Array2::from_shape_fn((h, w), |(y, x)| {
            u8::from(blobs.iter().any(|b| b.contains(y as f64 + 0.5, x as f64 + 0.5)))
        });
        let frac = m.iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64;
        if (cfg.coverage_range[0]..=cfg.coverage_range[1]).contains(&frac) {
            break m;
        }
    };

    // background: base colour, a vertical lighting gradient and a few low
    // frequency waves per channel
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let grad = rng.random_range(-0.15..0.15);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) / hf,
                rng.random_range(0.5..3.0) / wf,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.08),
            )
        })
        .collect();
    let tint = [-0.6, -0.2, 1.0];
    let ripple_f = rng.random_range(0.8..1.6);
    let ripple_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let streaks: Vec<(f64, f64)> = (0..cfg.reflections)
        .map(|_| (rng.random_range(0.0..hf), rng.random_range(1.0..2.5)))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite std");

    let mut img = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let tex: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * yf + fx * xf) + ph).sin())
                .sum();
            let light = grad * (yf / hf - 0.5);
            let wet = mask[[y, x]] == 1;
            let ripple = if wet {
                cfg.ripple_amplitude * (ripple_f * yf + 0.3 * (0.7 * xf).sin() + ripple_phase).sin()
            } else {
                0.0
            };
            let glint = if wet {
                streaks
                    .iter()
                    .map(|&(sy, width)| 0.25 * (-((yf - sy) / width).powi(2)).exp())
                    .sum::<f64>()
            } else {
                0.0
            };
            for c in 0..3 {
                let mut v = base[c] + tex + light;
                if wet {
                    v = v * (1.0 - cfg.water_contrast) + cfg.water_contrast * (0.5 + 0.5 * tint[c] * 0.5) + ripple + glint;
                }
                v += noise.sample(rng);
                img[[y, x, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    (img, mask)
}

/// Writes `n_labeled` labeled, `n_unlabeled` unlabeled and `n_val` validation
/// scenes under `out` in the standard layout and returns the training
/// manifest.
pub fn generate_toy_dataset(
    n_labeled: usize,
    n_unlabeled: usize,
    n_val: usize,
    cfg: &ToyConfig,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    let dirs = ["labeled/images", "labeled/masks", "unlabeled/images", "val/images", "val/masks"];
    for d in dirs {
        let p = out.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = |i: usize| format!("{i:05}.png");
    for i in 0..n_labeled {
        let (img, m) = toy_scene(cfg, &mut rng);
        save_image(&img, &out.join("labeled/images").join(name(i)))?;
        save_mask(&m, &out.join("labeled/masks").join(name(i)))?;
    }
    for i in 0..n_unlabeled {
        let (img, _) = toy_scene(cfg, &mut rng);
        save_image(&img, &out.join("unlabeled/images").join(name(i)))?;
    }
    for i in 0..n_val {
        let (img, m) = toy_scene(cfg, &mut rng);
        save_image(&img, &out.join("val/images").join(name(i)))?;
        save_mask(&m, &out.join("val/masks").join(name(i)))?;
    }
    scan_dataset(out)
}
