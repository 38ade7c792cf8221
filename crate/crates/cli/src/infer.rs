//! `infer`: one mask PNG and one `.npy` probability map per image.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use waterseg::backbone::ProbabilityMap;
use waterseg::data::{load_image, save_mask};
use waterseg::inference::predict_images;
use waterseg::s2match::binarize;
use waterseg::s2match::trainer::WeightSet;
use waterseg::{Error, Result};

use crate::{create_dir, expand_images, load_model, new_run_dir, stem, RunConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Written {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub probability: PathBuf,
}

pub fn mask_from_probability(p: &Array2<f64>, threshold: f64) -> Result<Array2<u8>> {
    let m = binarize(&ProbabilityMap::new(p.clone().insert_axis(Axis(0)))?, threshold)?;
    Ok(m.data.index_axis(Axis(0), 0).to_owned())
}

pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, student: bool, images: &[PathBuf], out: Option<PathBuf>) -> Result<Vec<Written>> {
    let which = if student { WeightSet::Student } else { WeightSet::Teacher };
    let (model, params) = load_model(cfg, checkpoint, which)?;
    let paths = expand_images(images)?;
    if paths.is_empty() {
        return Err(Error::Dataset(vec!["no input images".into()]));
    }
    let out = match out {
        Some(d) => {
            create_dir(&d)?;
            d
        }
        None => new_run_dir(cfg, Some("infer"))?,
    };
    let mut written = Vec::with_capacity(paths.len());
    for chunk in paths.chunks(cfg.output.eval_batch) {
        let imgs = chunk.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
        let maps = predict_images(&model, &params, &imgs, cfg.output.eval_batch)?;
        for (path, map) in chunk.iter().zip(maps) {
            let name = stem(path);
            let mask_path = out.join(format!("{name}.png"));
            let prob_path = out.join(format!("{name}.npy"));
            save_mask(&mask_from_probability(&map, cfg.s2match.binarize_threshold)?, &mask_path)?;
            ndarray_npy::write_npy(&prob_path, &map).map_err(|e| Error::io(&prob_path, std::io::Error::other(e)))?;
            written.push(Written {
                image: path.clone(),
                mask: mask_path,
                probability: prob_path,
            });
        }
    }
    Ok(written)
}
