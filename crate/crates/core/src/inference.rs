//! Whole-image prediction and dataset evaluation.

use ndarray::{Array2, Array3, Axis};

use crate::augment::resize_bilinear;
use crate::backbone::{BinaryMask, ProbabilityMap, Segmenter};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::metrics::Evaluator;
use crate::params::ParamStore;
use crate::s2match::engine::stack;

/// Probability maps at each image's own resolution. Images whose size differs
/// from the model input are resized for the forward pass and the map is
/// resized back bilinearly.
pub fn predict_images(model: &Segmenter, params: &ParamStore, images: &[Array3<f64>], batch: usize) -> Result<Vec<Array2<f64>>> {
    let size = model.backbone.input_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let resized: Vec<Array3<f64>> = chunk.iter().map(|im| resize_bilinear(im, size[0], size[1])).collect();
        let x = stack(&resized, size)?;
        let p = model.predict(params, &x, batch)?;
        for (i, im) in chunk.iter().enumerate() {
            let (h, w, _) = im.dim();
            let map = p.data.index_axis(Axis(0), i).to_owned();
            let map = if (h, w) == (size[0], size[1]) {
                map
            } else {
                let r = resize_bilinear(&map.insert_axis(Axis(2)), h, w);
                r.index_axis(Axis(2), 0).mapv(|v| v.clamp(0.0, 1.0))
            };
            out.push(map);
        }
    }
    Ok(out)
}

fn single_prob(map: &Array2<f64>) -> Result<ProbabilityMap> {
    ProbabilityMap::new(map.clone().insert_axis(Axis(0)))
}

/// Evaluates precomputed probability maps against masks.
pub fn evaluate_maps(maps: &[Array2<f64>], masks: &[Array2<u8>], threshold: f64, n_thresholds: usize) -> Result<Evaluator> {
    if maps.len() != masks.len() {
        return Err(Error::invariant("prediction and mask counts differ"));
    }
    let mut ev = Evaluator::new(threshold, n_thresholds);
    for (m, y) in maps.iter().zip(masks) {
        ev.add(&single_prob(m)?, &BinaryMask::from_single(y.clone())?)?;
    }
    Ok(ev)
}

/// Splits the samples into `workers` contiguous shards evaluated on separate
/// threads and merged in order. The result does not depend on `workers`.
pub fn evaluate_model(
    model: &Segmenter,
    params: &ParamStore,
    samples: &[LabeledSample],
    batch: usize,
    workers: usize,
    threshold: f64,
    n_thresholds: usize,
) -> Result<Evaluator> {
    let workers = workers.clamp(1, samples.len().max(1));
    let shard = samples.len().div_ceil(workers).max(1);
    let results: Vec<Result<Evaluator>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(shard)
            .map(|chunk| {
                s.spawn(move || {
                    let images: Vec<Array3<f64>> = chunk.iter().map(|c| c.image.clone()).collect();
                    let masks: Vec<Array2<u8>> = chunk.iter().map(|c| c.mask.clone()).collect();
                    let maps = predict_images(model, params, &images, batch)?;
                    evaluate_maps(&maps, &masks, threshold, n_thresholds)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut total = Evaluator::new(threshold, n_thresholds);
    for r in results {
        total.merge(&r?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::AdaptationConfig;
    use crate::backbone::BackboneConfig;
    use crate::data::{toy_scene, ToyConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Segmenter {
        Segmenter::new(
            BackboneConfig {
                stage_depths: [1, 1, 1, 1],
                stage_channels: [4, 6, 8, 10],
                neck_channels: 4,
                attention_heads: 1,
                patch_stride: 2,
                input_size: [16, 16],
                decoder_hidden: 4,
                ..BackboneConfig::default()
            },
            AdaptationConfig { lora_rank: 2, adapter_hidden: 4, task_dim: 4, ..Default::default() },
        )
        .unwrap()
    }

    fn samples(n: usize) -> Vec<LabeledSample> {
        let toy = ToyConfig { image_size: [16, 16], coverage_range: [0.0, 1.0], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|_| {
                let (image, mask) = toy_scene(&toy, &mut rng);
                LabeledSample { image, mask }
            })
            .collect()
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = model();
        let p = m.init_params(1);
        let s = samples(7);
        let a = evaluate_model(&m, &p, &s, 2, 1, 0.5, 19).unwrap();
        let b = evaluate_model(&m, &p, &s, 2, 4, 0.5, 19).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batched_prediction_equals_single_images() {
        let m = model();
        let p = m.init_params(2);
        let images: Vec<Array3<f64>> = samples(3).into_iter().map(|s| s.image).collect();
        let together = predict_images(&m, &p, &images, 3).unwrap();
        for (i, im) in images.iter().enumerate() {
            let alone = predict_images(&m, &p, std::slice::from_ref(im), 1).unwrap();
            assert_eq!(alone[0], together[i]);
        }
    }

    #[test]
    fn other_sizes_are_mapped_back() {
        let m = model();
        let p = m.init_params(3);
        let im = Array3::from_elem((20, 12, 3), 0.3);
        let out = predict_images(&m, &p, &[im], 1).unwrap();
        assert_eq!(out[0].dim(), (20, 12));
    }
}
