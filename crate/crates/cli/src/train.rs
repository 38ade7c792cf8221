//! `train` and `sweep`.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use waterseg::backbone::Segmenter;
use waterseg::data::{load_labeled, load_train_data, scan_dataset, scan_split, LabeledSample};
use waterseg::inference::evaluate_model;
use waterseg::metrics::MetricReport;
use waterseg::s2match::trainer::Trainer;
use waterseg::{Error, Result};

use crate::{create_dir, new_run_dir, write_file, RunConfig};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const VAL_FILE: &str = "val_metrics.json";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub val: Option<MetricReport>,
}

pub fn checkpoint_path(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:04}.safetensors"))
}

/// Validation samples, or `None` when the split directory does not exist.
pub fn validation_set(cfg: &RunConfig) -> Result<Option<Vec<LabeledSample>>> {
    if !cfg.data.root.join(&cfg.data.val_split).is_dir() {
        return Ok(None);
    }
    let m = scan_split(&cfg.data.root, &cfg.data.val_split)?;
    Ok(Some(load_labeled(&m.labeled)?))
}

/// Keeps the first `n` lines of an existing log so a resumed run appends
/// exactly where the checkpoint left off.
fn truncate_log(path: &Path, n: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in std::io::BufReader::new(f).lines().take(n as usize) {
        kept.push(line.map_err(|e| Error::io(path, e))?);
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_file(path, text)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, run_dir: Option<PathBuf>) -> Result<TrainOutcome> {
    let manifest = scan_dataset(&cfg.data.root)?;
    let val = validation_set(cfg)?;
    let data = load_train_data(&manifest, &cfg.data, cfg.s2match.seed)?;
    let model = Segmenter::new(cfg.backbone.clone(), cfg.adaptation.clone())?;
    let mut trainer = Trainer::new(model.clone(), cfg.s2match.clone(), cfg.augment.clone(), &data, cfg.s2match.seed)?;

    let run_dir = match (run_dir, resume) {
        (Some(d), _) => {
            create_dir(&d)?;
            d
        }
        // checkpoints live in <run>/checkpoints/
        (None, Some(ck)) => ck
            .parent()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .ok_or_else(|| Error::config(format!("cannot derive a run directory from {}", ck.display())))?,
        (None, None) => new_run_dir(cfg, None)?,
    };
    create_dir(&run_dir.join("checkpoints"))?;
    let log_path = run_dir.join(LOG_FILE);
    if let Some(ck) = resume {
        trainer.restore(ck)?;
        truncate_log(&log_path, trainer.state.iter)?;
        log::info!("resumed at epoch {} (iteration {})", trainer.epoch, trainer.state.iter);
    } else {
        write_file(&log_path, "")?;
    }
    write_file(&run_dir.join("config.json"), cfg.to_json())?;
    manifest.save(&run_dir.join("manifest.json"))?;

    let file = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let meta = HashMap::from([("config_hash".to_string(), cfg.hash()), ("config".to_string(), cfg.to_json())]);
    let mut last = None;
    while !trainer.finished() {
        let stats = trainer.run_epoch(&mut log)?;
        let epoch = trainer.epoch;
        if let Some(s) = stats.last() {
            log::info!("epoch {epoch}/{} L={:.4} L_l={:.4} lr={:.2e}", cfg.s2match.epochs, s.loss, s.l_sup, s.lr);
        }
        if epoch % cfg.output.checkpoint_every as u64 == 0 || trainer.finished() {
            let path = checkpoint_path(&run_dir, epoch);
            trainer.save_checkpoint(&path, meta.clone())?;
            last = Some(path);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = match last {
        Some(p) => p,
        None => {
            // resumed from the final epoch: nothing left to train
            let p = checkpoint_path(&run_dir, trainer.epoch);
            trainer.save_checkpoint(&p, meta)?;
            p
        }
    };

    let val_report = match val {
        Some(samples) if !samples.is_empty() => {
            let ev = evaluate_model(
                &model,
                &trainer.state.teacher.params,
                &samples,
                cfg.output.eval_batch,
                cfg.output.workers,
                cfg.s2match.binarize_threshold,
                cfg.output.pr_thresholds,
            )?;
            let report = ev.report();
            let doc = serde_json::json!({
                "config_hash": cfg.hash(),
                "split": cfg.data.val_split,
                "weights": "teacher",
                "images": samples.len(),
                "metrics": report,
            });
            write_file(&run_dir.join(VAL_FILE), serde_json::to_string_pretty(&doc)?)?;
            Some(report)
        }
        _ => {
            log::warn!("no `{}` split under {}; skipping validation", cfg.data.val_split, cfg.data.root.display());
            None
        }
    };
    Ok(TrainOutcome {
        run_dir,
        checkpoint,
        log: log_path,
        val: val_report,
    })
}

/// One training run per `tau_s`, each evaluated on the validation split.
/// Writes `sweep.csv` and returns its path.
pub fn cmd_sweep(cfg: &RunConfig, taus: &[f64], out: Option<PathBuf>) -> Result<PathBuf> {
    if taus.is_empty() {
        return Err(Error::config("sweep needs at least one tau_s value"));
    }
    let out = match out {
        Some(d) => {
            create_dir(&d)?;
            d
        }
        None => new_run_dir(cfg, Some("sweep"))?,
    };
    let csv_path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| crate::csv_err(&csv_path, e))?;
    w.write_record(["tau_s", "precision", "recall", "specificity", "dice", "iou", "g_mean", "run_dir"])
        .map_err(|e| crate::csv_err(&csv_path, e))?;
    for &tau_s in taus {
        let mut c = cfg.clone();
        c.s2match.tau_s = tau_s;
        c.validate()?;
        let dir = out.join(format!("tau_s_{tau_s}"));
        log::info!("sweep: tau_s = {tau_s}");
        let run = cmd_train(&c, None, Some(dir.clone()))?;
        let r = run
            .val
            .ok_or_else(|| Error::config(format!("sweep needs a `{}` split under {}", c.data.val_split, c.data.root.display())))?;
        let mut row = vec![tau_s.to_string()];
        row.extend(r.named().iter().map(|(_, v)| v.to_string()));
        row.push(dir.display().to_string());
        w.write_record(&row).map_err(|e| crate::csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}
