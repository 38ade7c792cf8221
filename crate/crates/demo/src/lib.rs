//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations: generate a synthetic scene with its spatial prompt, draw
//! one weak and two strong augmentation views, and score a simulated
//! prediction at a chosen threshold.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use waterseg::augment::{gaussian_blur, strong_augment, weak_augment, AugmentationConfig};
use waterseg::backbone::{BinaryMask, ProbabilityMap};
use waterseg::data::{toy_scene, ToyConfig};
use waterseg::metrics::{Evaluator, MetricReport, PRCurve};
use waterseg::report::prompts::{build_spatial_prompt, mask_visualization, TemplateSet};

const PR_THRESHOLDS: usize = 49;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

type Plain<T> = std::result::Result<T, String>;

/// `[H, W, 3]` in `[0, 1]` to RGBA bytes.
pub fn rgba(image: &Array3<f64>) -> Vec<u8> {
    let (h, w, _) = image.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Images of equal height side by side.
pub fn hstack(images: &[Array3<f64>]) -> Array3<f64> {
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("equal heights")
}

/// A blurred, noisy copy of the mask standing in for a model's probabilities.
pub fn simulated_probability(mask: &Array2<u8>, blur: f64, noise: f64, seed: u64) -> Array2<f64> {
    let (h, w) = mask.dim();
    let m = mask.mapv(f64::from).insert_axis(Axis(2));
    let soft = if blur > 0.0 { gaussian_blur(&m, blur) } else { m };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = 0.15 + 0.7 * soft[[y, x, 0]] + noise * (rng.random::<f64>() - 0.5);
        v.clamp(0.0, 1.0)
    })
}

pub fn score(prob: &Array2<f64>, mask: &Array2<u8>, threshold: f64) -> waterseg::error::Result<(MetricReport, PRCurve)> {
    let p = ProbabilityMap::new(prob.clone().insert_axis(Axis(0)))?;
    let g = BinaryMask::from_single(mask.clone())?;
    let mut ev = Evaluator::new(threshold, PR_THRESHOLDS);
    ev.add(&p, &g)?;
    Ok((ev.report(), ev.pr.curve()?))
}

#[wasm_bindgen]
pub struct Scene {
    image: Array3<f64>,
    mask: Array2<u8>,
}

impl Scene {
    pub fn generate(seed: u64, size: usize, contrast: f64) -> Plain<Scene> {
        if !(16..=256).contains(&size) {
            return Err("size must be between 16 and 256".into());
        }
        let cfg = ToyConfig {
            image_size: [size; 2],
            water_contrast: contrast,
            ..ToyConfig::default()
        };
        let (image, mask) = toy_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Scene { image, mask })
    }

    pub fn prompt(&self, rows: usize, cols: usize) -> Plain<String> {
        if rows == 0 || cols == 0 {
            return Err("grid needs at least one row and column".into());
        }
        Ok(build_spatial_prompt(&self.mask, [rows, cols], &TemplateSet::default()))
    }

    /// Weak view, then two strong views of it, side by side (`3 * size` wide).
    pub fn views(&self, seed: u64) -> Plain<Vec<u8>> {
        let n = self.mask.dim().0;
        let cfg = AugmentationConfig {
            crop_size: [n, n],
            ..AugmentationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (weak, _, _) = weak_augment(&self.image, None, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let s1 = strong_augment(&weak, &cfg, &mut rng);
        let s2 = strong_augment(&weak, &cfg, &mut rng);
        Ok(rgba(&hstack(&[weak, s1, s2])))
    }

    pub fn evaluation(&self, blur: f64, noise: f64, threshold: f64, seed: u64) -> Plain<Evaluation> {
        let prob = simulated_probability(&self.mask, blur, noise, seed);
        let (report, curve) = score(&prob, &self.mask, threshold).map_err(|e| e.to_string())?;
        let gray = prob.insert_axis(Axis(2));
        let views: Vec<_> = (0..3).map(|_| gray.view()).collect();
        let prob_rgb = ndarray::concatenate(Axis(2), &views).expect("same shape");
        Ok(Evaluation {
            metrics: report.named().iter().map(|(_, v)| *v).collect(),
            curve: curve.points.iter().flat_map(|p| [p.threshold, p.precision, p.recall]).collect(),
            bep: vec![curve.break_even.threshold, curve.break_even.value],
            probability: rgba(&prob_rgb),
        })
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, contrast: f64) -> Result<Scene, JsError> {
        Scene::generate(u64::from(seed), size as usize, contrast).map_err(js_err)
    }

    pub fn size(&self) -> u32 {
        self.mask.dim().0 as u32
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.image)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        rgba(&mask_visualization(&self.mask))
    }

    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&v| v > 0).count() as f64 / self.mask.len() as f64
    }

    pub fn spatial_prompt(&self, rows: u32, cols: u32) -> Result<String, JsError> {
        self.prompt(rows as usize, cols as usize).map_err(js_err)
    }

    pub fn views_rgba(&self, seed: u32) -> Result<Vec<u8>, JsError> {
        self.views(u64::from(seed)).map_err(js_err)
    }

    pub fn evaluate(&self, blur: f64, noise: f64, threshold: f64, seed: u32) -> Result<Evaluation, JsError> {
        self.evaluation(blur, noise, threshold, u64::from(seed)).map_err(js_err)
    }
}

#[wasm_bindgen]
pub struct Evaluation {
    metrics: Vec<f64>,
    curve: Vec<f64>,
    bep: Vec<f64>,
    probability: Vec<u8>,
}

#[wasm_bindgen]
impl Evaluation {
    /// Precision, recall, specificity, dice, IoU, G-mean.
    pub fn metrics(&self) -> Vec<f64> {
        self.metrics.clone()
    }

    pub fn metric_names() -> Vec<String> {
        ["precision", "recall", "specificity", "dice", "iou", "g_mean"].map(String::from).to_vec()
    }

    /// Flat `(threshold, precision, recall)` triples.
    pub fn curve(&self) -> Vec<f64> {
        self.curve.clone()
    }

    /// Break-even threshold and value.
    pub fn bep(&self) -> Vec<f64> {
        self.bep.clone()
    }

    pub fn probability_rgba(&self) -> Vec<u8> {
        self.probability.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_buffers_have_rgba_layout() {
        let s = Scene::generate(3, 32, 0.35).unwrap();
        assert_eq!(s.image_rgba().len(), 32 * 32 * 4);
        assert_eq!(s.mask_rgba().len(), 32 * 32 * 4);
        assert_eq!(s.views(1).unwrap().len(), 3 * 32 * 32 * 4);
        assert!(s.image_rgba().chunks(4).all(|px| px[3] == 255));
    }

    #[test]
    fn prompt_reports_scene_coverage() {
        let s = Scene::generate(5, 48, 0.35).unwrap();
        let text = s.prompt(2, 2).unwrap();
        assert!(text.contains(&format!("coverage {:.1}%", s.coverage() * 100.0)));
        assert!(s.prompt(0, 2).is_err());
    }

    #[test]
    fn clean_prediction_scores_perfectly() {
        let s = Scene::generate(7, 32, 0.35).unwrap();
        let e = s.evaluation(0.0, 0.0, 0.5, 0).unwrap();
        assert!(e.metrics().iter().all(|&v| v == 1.0), "{:?}", e.metrics());
        assert_eq!(e.curve().len(), 3 * PR_THRESHOLDS);
    }

    #[test]
    fn noise_lowers_iou() {
        let s = Scene::generate(9, 48, 0.35).unwrap();
        let clean = s.evaluation(1.0, 0.0, 0.5, 0).unwrap().metrics()[4];
        let noisy = s.evaluation(1.0, 0.9, 0.5, 0).unwrap().metrics()[4];
        assert!(noisy < clean);
    }

    #[test]
    fn views_are_deterministic_per_seed() {
        let s = Scene::generate(2, 32, 0.35).unwrap();
        assert_eq!(s.views(4).unwrap(), s.views(4).unwrap());
        assert_ne!(s.views(4).unwrap(), s.views(5).unwrap());
    }
}
