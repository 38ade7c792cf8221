//! `evaluate`: metrics JSON, per-image CSV and PR curve CSV.

use std::path::{Path, PathBuf};

use clap::Args;
use ndarray::Array2;
use serde::Serialize;
use waterseg::data::{load_labeled, scan_split, LabeledSample};
use waterseg::inference::{evaluate_maps, evaluate_model};
use waterseg::metrics::{compute_metrics, macro_metrics, Evaluator, MetricReport, PRCurve};
use waterseg::s2match::trainer::WeightSet;
use waterseg::{Error, Result};

use crate::{create_dir, load_model, new_run_dir, stem, write_file, RunConfig};

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    /// Training checkpoint or parameter archive.
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Score saved probability maps (`<stem>.png`, 0..255) instead of running
    /// a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Split directory under `data.root`; defaults to `data.val_split`.
    #[arg(long)]
    pub split: Option<String>,
    /// Evaluate the student instead of the EMA teacher.
    #[arg(long)]
    pub student: bool,
    /// Metric shards; overrides `output.workers`.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub curve: PRCurve,
    pub out_dir: PathBuf,
    pub per_image: Vec<(String, MetricReport)>,
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    config_hash: String,
    source: String,
    weights: Option<&'a str>,
    split: &'a str,
    images: usize,
    threshold: f64,
    metrics: &'a MetricReport,
    macro_metrics: MetricReport,
    break_even: waterseg::metrics::BreakEven,
}

/// Grayscale PNG as probabilities `v / 255`.
pub fn load_probability(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| f64::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0))
}

fn from_predictions(dir: &Path, names: &[String], samples: &[LabeledSample], cfg: &RunConfig, workers: usize) -> Result<Evaluator> {
    let mut missing = Vec::new();
    let mut maps = Vec::with_capacity(names.len());
    for (name, s) in names.iter().zip(samples) {
        let p = dir.join(format!("{name}.png"));
        if !p.is_file() {
            missing.push(format!("missing prediction {}", p.display()));
            continue;
        }
        let m = load_probability(&p)?;
        if m.dim() != s.mask.dim() {
            missing.push(format!("{}: size {:?} differs from mask {:?}", p.display(), m.dim(), s.mask.dim()));
        }
        maps.push(m);
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(missing));
    }
    let masks: Vec<Array2<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
    let shard = samples.len().div_ceil(workers.max(1)).max(1);
    let mut total = Evaluator::new(cfg.s2match.binarize_threshold, cfg.output.pr_thresholds);
    for (m, y) in maps.chunks(shard).zip(masks.chunks(shard)) {
        total.merge(&evaluate_maps(m, y, cfg.s2match.binarize_threshold, cfg.output.pr_thresholds)?)?;
    }
    Ok(total)
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalOutcome> {
    let split = args.split.clone().unwrap_or_else(|| cfg.data.val_split.clone());
    let manifest = scan_split(&cfg.data.root, &split)?;
    if manifest.labeled.is_empty() {
        return Err(Error::Dataset(vec![format!("split `{split}` under {} has no images", cfg.data.root.display())]));
    }
    let names: Vec<String> = manifest.labeled.iter().map(|(img, _)| stem(img)).collect();
    let samples = load_labeled(&manifest.labeled)?;
    let workers = args.workers.unwrap_or(cfg.output.workers);
    if workers == 0 {
        return Err(Error::config("--workers must be at least 1"));
    }
    let which = if args.student { WeightSet::Student } else { WeightSet::Teacher };
    let (ev, source, weights) = match (&args.checkpoint, &args.predictions) {
        (_, Some(dir)) => (from_predictions(dir, &names, &samples, cfg, workers)?, dir.display().to_string(), None),
        (Some(ck), None) => {
            let (model, params) = load_model(cfg, ck, which)?;
            let ev = evaluate_model(
                &model,
                &params,
                &samples,
                cfg.output.eval_batch,
                workers,
                cfg.s2match.binarize_threshold,
                cfg.output.pr_thresholds,
            )?;
            let w = if args.student { "student" } else { "teacher" };
            (ev, ck.display().to_string(), Some(w))
        }
        (None, None) => return Err(Error::config("evaluate needs --checkpoint or --predictions")),
    };

    let report = ev.report();
    let curve = ev.pr.curve()?;
    let per_image: Vec<(String, MetricReport)> = names.iter().cloned().zip(ev.per_image.iter().map(compute_metrics)).collect();
    let out_dir = match &args.out {
        Some(d) => {
            create_dir(d)?;
            d.clone()
        }
        None => new_run_dir(cfg, Some("evaluate"))?,
    };
    let doc = MetricsDoc {
        config_hash: cfg.hash(),
        source,
        weights,
        split: &split,
        images: samples.len(),
        threshold: cfg.s2match.binarize_threshold,
        metrics: &report,
        macro_metrics: macro_metrics(&ev.per_image)?,
        break_even: curve.break_even,
    };
    write_file(&out_dir.join("metrics.json"), serde_json::to_string_pretty(&doc)?)?;
    write_file(&out_dir.join("pr.csv"), curve.to_csv())?;
    let per_path = out_dir.join("per_image.csv");
    let mut w = csv::Writer::from_path(&per_path).map_err(|e| crate::csv_err(&per_path, e))?;
    let mut header = vec!["image"];
    header.extend(report.named().iter().map(|(n, _)| *n));
    w.write_record(&header).map_err(|e| crate::csv_err(&per_path, e))?;
    for (name, r) in &per_image {
        let mut row = vec![name.clone()];
        row.extend(r.named().iter().map(|(_, v)| v.to_string()));
        w.write_record(&row).map_err(|e| crate::csv_err(&per_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&per_path, e))?;
    Ok(EvalOutcome {
        report,
        curve,
        out_dir,
        per_image,
    })
}
