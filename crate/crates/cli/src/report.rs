//! `report`, `score` and `corpus`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use clap::Args;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use waterseg::data::{load_image, load_mask};
use waterseg::inference::predict_images;
use waterseg::report::{
    build_client, build_reference_corpus, generate_report, read_jsonl, run_bounded, score_report, summarize_scores, write_jsonl,
    AssessmentReport, ClientConfig, ClientKind, CorpusEntry, RecordingClient, ReportConfig, ScoreSummary, VlmClient,
};
use waterseg::s2match::trainer::WeightSet;
use waterseg::{Error, Result};

use crate::infer::mask_from_probability;
use crate::{create_dir, expand_images, load_model, new_run_dir, stem, write_file, RunConfig};

#[derive(Debug, Clone, Default, Args)]
pub struct ReportArgs {
    /// Model used to segment the images.
    #[arg(long, required_unless_present = "masks")]
    pub checkpoint: Option<PathBuf>,
    /// Use `<dir>/<stem>.png` masks instead of model predictions.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub student: bool,
    /// Send only the image and the bare instruction.
    #[arg(long)]
    pub no_s3cot: bool,
    #[arg(long)]
    pub no_semantic: bool,
    #[arg(long)]
    pub no_spatial: bool,
    #[arg(long)]
    pub no_structural: bool,
    /// Answer from a recorded transcript instead of the configured client.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Record every exchange to this transcript.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Output JSONL; defaults to `reports.jsonl` in a new run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory holding `<image id>.png` when reports lack a `path`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub replay: Option<PathBuf>,
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Output directory for `scores.jsonl` and `summary.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub image: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub path: PathBuf,
    pub reports: usize,
    pub failures: usize,
}

fn client_for(base: &ClientConfig, replay: Option<&Path>, record: Option<&Path>) -> Result<RecordingClient<Box<dyn VlmClient>>> {
    let mut c = base.clone();
    if let Some(t) = replay {
        c.kind = ClientKind::Replay;
        c.transcript = Some(t.to_path_buf());
    }
    if let Some(r) = record {
        c.record = Some(r.to_path_buf());
    }
    Ok(RecordingClient::new(build_client(&c)?))
}

fn save_transcript(client: &RecordingClient<Box<dyn VlmClient>>, base: &ClientConfig, record: Option<&Path>) -> Result<()> {
    if let Some(path) = record.or(base.record.as_deref()) {
        client.save(path)?;
    }
    Ok(())
}

fn report_settings(cfg: &ReportConfig, args: &ReportArgs) -> ReportConfig {
    let mut r = cfg.clone();
    r.s3cot &= !args.no_s3cot;
    r.prompts.semantic &= !args.no_semantic;
    r.prompts.spatial &= !args.no_spatial;
    r.prompts.structural &= !args.no_structural;
    r
}

fn output_dir(cfg: &RunConfig, out: Option<&Path>, label: &str) -> Result<PathBuf> {
    match out {
        Some(d) => {
            create_dir(d)?;
            Ok(d.to_path_buf())
        }
        None => new_run_dir(cfg, Some(label)),
    }
}

pub fn cmd_report(cfg: &RunConfig, args: &ReportArgs) -> Result<ReportOutcome> {
    let settings = report_settings(&cfg.report, args);
    let ctx = settings.context()?;
    let paths = expand_images(&args.images)?;
    let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
    let masks: Vec<Array2<u8>> = match (&args.masks, &args.checkpoint) {
        (Some(dir), _) => paths.iter().map(|p| load_mask(&dir.join(format!("{}.png", stem(p))))).collect::<Result<_>>()?,
        (None, Some(ck)) => {
            let which = if args.student { WeightSet::Student } else { WeightSet::Teacher };
            let (model, params) = load_model(cfg, ck, which)?;
            predict_images(&model, &params, &images, cfg.output.eval_batch)?
                .iter()
                .map(|p| mask_from_probability(p, cfg.s2match.binarize_threshold))
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::config("report needs --checkpoint or --masks")),
    };
    let client = client_for(&settings.client, args.replay.as_deref(), args.record.as_deref())?;
    let items: Vec<_> = paths.iter().zip(images.iter().zip(&masks)).collect();
    let results = run_bounded(&items, ctx.max_in_flight, |(path, (img, mask))| {
        generate_report(&stem(path), img, mask, &client, &ctx).map(|mut r| {
            r.metadata = BTreeMap::from([
                ("path".to_string(), path.display().to_string()),
                ("config_hash".to_string(), cfg.hash()),
                ("s3cot".to_string(), settings.s3cot.to_string()),
                ("prompts".to_string(), format!("{:?}", ctx.flags)),
            ]);
            r
        })
    });
    save_transcript(&client, &settings.client, args.record.as_deref())?;

    let path = match &args.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            p.clone()
        }
        None => new_run_dir(cfg, Some("report"))?.join("reports.jsonl"),
    };
    let mut reports: Vec<AssessmentReport> = Vec::new();
    let mut errors: Vec<ItemError> = Vec::new();
    for ((p, _), r) in items.iter().zip(results) {
        match r {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::error!("{}: {e}", p.display());
                errors.push(ItemError {
                    image: stem(p),
                    error: e.to_string(),
                });
            }
        }
    }
    write_jsonl(&path, &reports)?;
    if !errors.is_empty() {
        write_jsonl(&path.with_extension("errors.jsonl"), &errors)?;
    }
    if reports.is_empty() {
        return Err(Error::Client {
            message: format!("all {} reports failed", errors.len()),
            retriable: false,
        });
    }
    Ok(ReportOutcome {
        path,
        reports: reports.len(),
        failures: errors.len(),
    })
}

fn report_image(r: &AssessmentReport, images: Option<&Path>) -> Result<Array3<f64>> {
    let path = match (r.metadata.get("path"), images) {
        (_, Some(dir)) => dir.join(format!("{}.png", r.image)),
        (Some(p), None) => PathBuf::from(p),
        (None, None) => return Err(Error::config(format!("report {} has no image path; pass --images", r.image))),
    };
    load_image(&path)
}

pub fn cmd_score(cfg: &RunConfig, args: &ScoreArgs) -> Result<ScoreSummary> {
    let ctx = cfg.report.context()?;
    let reports: Vec<AssessmentReport> = read_jsonl(&args.reports)?;
    let corpus: Vec<CorpusEntry> = read_jsonl(&args.corpus)?;
    let refs: HashMap<&str, &CorpusEntry> = corpus.iter().map(|e| (e.image.as_str(), e)).collect();
    let unreviewed = corpus.iter().filter(|e| !e.reviewed).count();
    if unreviewed > 0 {
        log::warn!("{unreviewed} reference reports are not marked reviewed");
    }
    let client = client_for(&cfg.report.evaluator, args.replay.as_deref(), args.record.as_deref())?;
    let records = run_bounded(&reports, ctx.max_in_flight, |r| {
        let outcome = refs
            .get(r.image.as_str())
            .ok_or_else(|| Error::config(format!("no reference report for image `{}`", r.image)))
            .and_then(|reference| {
                let img = report_image(r, args.images.as_deref())?;
                score_report(&r.image, &img, &reference.reference, &r.generated, &client, &ctx)
            });
        match outcome {
            Ok(s) => ScoreRecord {
                image: s.image,
                score: Some(s.score),
                explanation: Some(s.explanation),
                error: None,
            },
            Err(e) => {
                log::error!("{}: {e}", r.image);
                ScoreRecord {
                    image: r.image.clone(),
                    score: None,
                    explanation: None,
                    error: Some(e.to_string()),
                }
            }
        }
    });
    save_transcript(&client, &cfg.report.evaluator, args.record.as_deref())?;
    let out = output_dir(cfg, args.out.as_deref(), "score")?;
    write_jsonl(&out.join("scores.jsonl"), &records)?;
    let scores: Vec<u8> = records.iter().filter_map(|r| r.score).collect();
    let summary = summarize_scores(&scores, records.len() - scores.len());
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn cmd_corpus(cfg: &RunConfig, images: &[PathBuf], out: &Path) -> Result<usize> {
    let ctx = cfg.report.context()?;
    let paths = expand_images(images)?;
    let items = paths.iter().map(|p| Ok((stem(p), load_image(p)?))).collect::<Result<Vec<_>>>()?;
    let client = client_for(&cfg.report.evaluator, None, None)?;
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let entries = build_reference_corpus(&items, &client, &ctx, out)?;
    save_transcript(&client, &cfg.report.evaluator, None)?;
    let failed = entries.iter().filter(|e| e.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} drafts failed", entries.len());
    }
    Ok(entries.len())
}
