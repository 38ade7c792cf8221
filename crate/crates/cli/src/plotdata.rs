//! `plotdata`: tidy CSVs for radar, PR, box and violin plots.
//!
//! Inputs are given as `PATH[@LABEL]`; the label defaults to the name of the
//! file's parent directory.

use std::path::{Path, PathBuf};

use clap::Args;
use waterseg::metrics::{break_even, quantile, MetricReport, PrPoint};
use waterseg::{Error, Result};

use crate::report::ScoreRecord;
use crate::{create_dir, csv_err};

#[derive(Debug, Clone, Default, Args)]
pub struct PlotArgs {
    /// `metrics.json` / `val_metrics.json` files -> radar.csv
    #[arg(long)]
    pub metrics: Vec<String>,
    /// `pr.csv` files -> pr.csv with a break-even row per method
    #[arg(long)]
    pub pr: Vec<String>,
    /// `per_image.csv` files -> box.csv quartiles per metric
    #[arg(long)]
    pub per_image: Vec<String>,
    /// `scores.jsonl` files -> violin.csv
    #[arg(long)]
    pub scores: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn split_label(spec: &str) -> (PathBuf, String) {
    match spec.rsplit_once('@') {
        Some((p, l)) if !l.is_empty() => (PathBuf::from(p), l.to_string()),
        _ => {
            let p = PathBuf::from(spec);
            let label = p
                .parent()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (p, label)
        }
    }
}

fn read_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let inner = v.get("metrics").cloned().unwrap_or(v);
    Ok(serde_json::from_value(inner)?)
}

pub fn read_pr_csv(path: &Path) -> Result<Vec<PrPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let pts = r.deserialize().collect::<std::result::Result<Vec<PrPoint>, _>>().map_err(|e| csv_err(path, e))?;
    if pts.is_empty() {
        return Err(Error::config(format!("{} has no PR points", path.display())));
    }
    Ok(pts)
}

/// Column name -> values of every numeric column except `image`.
pub fn read_per_image(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let mut cols: Vec<(String, Vec<f64>)> = headers.iter().filter(|h| *h != "image").map(|h| (h.clone(), Vec::new())).collect();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let mut k = 0;
        for (h, field) in headers.iter().zip(rec.iter()) {
            if h == "image" {
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|_| Error::config(format!("{}: `{field}` in column {h} is not a number", path.display())))?;
            cols[k].1.push(v);
            k += 1;
        }
    }
    Ok(cols)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn box_stats(values: &[f64]) -> BoxStats {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    BoxStats {
        n,
        min: s.first().copied().unwrap_or(f64::NAN),
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s.last().copied().unwrap_or(f64::NAN),
        mean: if n == 0 { f64::NAN } else { s.iter().sum::<f64>() / n as f64 },
    }
}

struct Csv {
    path: PathBuf,
    w: csv::Writer<std::fs::File>,
}

impl Csv {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(header).map_err(|e| csv_err(&path, e))?;
        Ok(Self { path, w })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w.write_record(fields).map_err(|e| csv_err(&self.path, e))
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

pub fn cmd_plotdata(args: &PlotArgs) -> Result<Vec<PathBuf>> {
    if args.metrics.is_empty() && args.pr.is_empty() && args.per_image.is_empty() && args.scores.is_empty() {
        return Err(Error::config("plotdata needs at least one of --metrics, --pr, --per-image, --scores"));
    }
    create_dir(&args.out)?;
    let mut written = Vec::new();

    if !args.metrics.is_empty() {
        let mut c = Csv::create(args.out.join("radar.csv"), &["method", "metric", "value"])?;
        for spec in &args.metrics {
            let (path, label) = split_label(spec);
            for (name, v) in read_report(&path)?.named() {
                c.row(&[label.clone(), name.into(), v.to_string()])?;
            }
        }
        written.push(c.finish()?);
    }

    if !args.pr.is_empty() {
        let mut c = Csv::create(args.out.join("pr.csv"), &["method", "kind", "threshold", "precision", "recall"])?;
        for spec in &args.pr {
            let (path, label) = split_label(spec);
            let pts = read_pr_csv(&path)?;
            for p in &pts {
                c.row(&[label.clone(), "curve".into(), p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])?;
            }
            let b = break_even(&pts);
            c.row(&[label.clone(), "bep".into(), b.threshold.to_string(), b.value.to_string(), b.value.to_string()])?;
        }
        written.push(c.finish()?);
    }

    if !args.per_image.is_empty() {
        let mut c = Csv::create(args.out.join("box.csv"), &["method", "metric", "n", "min", "q1", "median", "q3", "max", "mean"])?;
        for spec in &args.per_image {
            let (path, label) = split_label(spec);
            for (metric, values) in read_per_image(&path)? {
                let b = box_stats(&values);
                let mut row = vec![label.clone(), metric, b.n.to_string()];
                row.extend([b.min, b.q1, b.median, b.q3, b.max, b.mean].iter().map(f64::to_string));
                c.row(&row)?;
            }
        }
        written.push(c.finish()?);
    }

    if !args.scores.is_empty() {
        let mut c = Csv::create(args.out.join("violin.csv"), &["method", "image", "score"])?;
        for spec in &args.scores {
            let (path, label) = split_label(spec);
            let records: Vec<ScoreRecord> = waterseg::report::read_jsonl(&path)?;
            for r in records {
                if let Some(s) = r.score {
                    c.row(&[label.clone(), r.image, s.to_string()])?;
                }
            }
        }
        written.push(c.finish()?);
    }
    Ok(written)
}

