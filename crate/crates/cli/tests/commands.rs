use std::path::{Path, PathBuf};

use waterseg::data::{generate_toy_dataset, load_mask};
use waterseg::s2match::trainer::{load_weights, WeightSet};
use waterseg::report::{image_part, read_jsonl, scoring_messages, AssessmentReport, CorpusEntry, Exchange, TemplateSet};
use waterseg_cli::evaluate::{cmd_evaluate, load_probability, EvalArgs};
use waterseg_cli::infer::{cmd_infer, mask_from_probability};
use waterseg_cli::plotdata::{box_stats, cmd_plotdata, PlotArgs};
use waterseg_cli::report::{cmd_report, cmd_score, ReportArgs, ScoreArgs, ScoreRecord};
use waterseg_cli::train::{checkpoint_path, cmd_train, LOG_FILE};
use waterseg_cli::{exit_code, run, RunConfig};

fn tiny(root: &Path, out: &Path, extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "backbone.stage_depths=[1,1,1,1]",
        "backbone.stage_channels=[4,6,8,10]",
        "backbone.neck_channels=4",
        "backbone.attention_heads=1",
        "backbone.patch_stride=2",
        "backbone.input_size=[16,16]",
        "backbone.decoder_hidden=4",
        "adaptation.lora_rank=2",
        "adaptation.adapter_hidden=4",
        "adaptation.task_dim=4",
        "augment.crop_size=[16,16]",
        "toy.image_size=[16,16]",
        "s2match.epochs=2",
        "s2match.lr0=0.01",
        "report.retry.base_delay_ms=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("data.root={}", root.display()));
    o.push(format!("output.dir={}", out.display()));
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::with_overrides(&o).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    out: PathBuf,
    cfg: RunConfig,
}

fn fixture(n_val: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = dir.path().join("runs");
    let cfg = tiny(&root, &out, &[]);
    generate_toy_dataset(4, 6, n_val, &cfg.toy, 3, &root).unwrap();
    Fixture { _dir: dir, root, out, cfg }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn train_writes_log_checkpoints_and_validation() {
    let f = fixture(3);
    let run = cmd_train(&f.cfg, None, None).unwrap();
    assert!(run.run_dir.starts_with(&f.out));
    assert!(run.run_dir.file_name().unwrap().to_string_lossy().contains(&f.cfg.hash()));
    assert!(checkpoint_path(&run.run_dir, 1).is_file());
    assert!(checkpoint_path(&run.run_dir, 2).is_file());
    // 4 labeled images, batch 2, 2 epochs
    assert_eq!(read(&run.log).lines().count(), 4);
    let val = run.val.unwrap();
    assert!(val.iou.is_finite());
    assert!(run.run_dir.join("val_metrics.json").is_file());
    assert!(run.run_dir.join("config.json").is_file());
}

#[test]
fn resume_continues_bit_identically() {
    let f = fixture(0);
    let full = cmd_train(&f.cfg, None, Some(f.out.join("full"))).unwrap();
    let copy = f.out.join("copy");
    std::fs::create_dir_all(copy.join("checkpoints")).unwrap();
    for name in ["config.json", "manifest.json", LOG_FILE] {
        std::fs::copy(full.run_dir.join(name), copy.join(name)).unwrap();
    }
    let ck = checkpoint_path(&copy, 1);
    std::fs::copy(checkpoint_path(&full.run_dir, 1), &ck).unwrap();
    let resumed = cmd_train(&f.cfg, Some(&ck), None).unwrap();
    assert_eq!(resumed.run_dir, copy);
    assert_eq!(read(&resumed.log), read(&full.log));
    for which in [WeightSet::Teacher, WeightSet::Student] {
        let (a, _) = load_weights(&resumed.checkpoint, which).unwrap();
        let (b, _) = load_weights(&full.checkpoint, which).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn missing_mask_dir_is_a_validation_error_naming_the_path() {
    let f = fixture(0);
    std::fs::remove_dir_all(f.root.join("labeled/masks")).unwrap();
    let err = cmd_train(&f.cfg, None, None).unwrap_err();
    assert!(err.to_string().contains("labeled/masks"), "{err}");
    assert_eq!(exit_code(&err), 2);
    let code = run(["waterseg", "train", "--set", &format!("data.root={}", f.root.display())]);
    assert_eq!(code, 2);
}

#[test]
fn bad_config_exits_with_2() {
    assert_eq!(run(["waterseg", "train", "--set", "s2match.tau=2"]), 2);
    assert_eq!(run(["waterseg", "train", "--set", "s2match.nope=1"]), 2);
    assert_eq!(run(["waterseg", "frobnicate"]), 2);
}

#[test]
fn evaluate_perfect_predictions_and_shard_invariance() {
    let f = fixture(5);
    let perfect = cmd_evaluate(
        &f.cfg,
        &EvalArgs {
            predictions: Some(f.root.join("val/masks")),
            out: Some(f.out.join("oracle")),
            ..Default::default()
        },
    )
    .unwrap();
    for (name, v) in perfect.report.named() {
        assert_eq!(v, 1.0, "{name}");
    }

    let run = cmd_train(&f.cfg, None, None).unwrap();
    let eval = |workers, out: &str| {
        cmd_evaluate(
            &f.cfg,
            &EvalArgs {
                checkpoint: Some(run.checkpoint.clone()),
                workers: Some(workers),
                out: Some(f.out.join(out)),
                ..Default::default()
            },
        )
        .unwrap()
    };
    let one = eval(1, "w1");
    let four = eval(4, "w4");
    assert_eq!(one.report, four.report);
    assert_eq!(one.curve, four.curve);
    assert_eq!(read(&one.out_dir.join("pr.csv")), read(&four.out_dir.join("pr.csv")));
    let doc: serde_json::Value = serde_json::from_str(&read(&one.out_dir.join("metrics.json"))).unwrap();
    for k in ["precision", "recall", "specificity", "dice", "iou", "g_mean"] {
        assert!(doc["metrics"][k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert_eq!(doc["weights"], "teacher");
    assert_eq!(read(&one.out_dir.join("per_image.csv")).lines().count(), 6);
}

#[test]
fn evaluate_rejects_a_checkpoint_from_another_architecture() {
    let f = fixture(2);
    let run = cmd_train(&f.cfg, None, None).unwrap();
    let other = tiny(&f.root, &f.out, &["backbone.decoder_hidden=6"]);
    let err = cmd_evaluate(
        &other,
        &EvalArgs {
            checkpoint: Some(run.checkpoint),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert_eq!(exit_code(&err), 2, "{err}");
}

#[test]
fn infer_writes_masks_matching_binarized_probabilities() {
    let f = fixture(3);
    let run = cmd_train(&f.cfg, None, None).unwrap();
    let imgs: Vec<PathBuf> = (0..3).map(|i| f.root.join(format!("val/images/{i:05}.png"))).collect();
    let batch = cmd_infer(&f.cfg, &run.checkpoint, false, &imgs, Some(f.out.join("batch"))).unwrap();
    assert_eq!(batch.len(), 3);
    for (i, w) in batch.iter().enumerate() {
        let single = cmd_infer(&f.cfg, &run.checkpoint, false, &imgs[i..=i], Some(f.out.join(format!("single{i}")))).unwrap();
        assert_eq!(std::fs::read(&w.mask).unwrap(), std::fs::read(&single[0].mask).unwrap());
        assert_eq!(std::fs::read(&w.probability).unwrap(), std::fs::read(&single[0].probability).unwrap());
        let prob: ndarray::Array2<f64> = ndarray_npy::read_npy(&w.probability).unwrap();
        let mask = load_mask(&w.mask).unwrap();
        assert_eq!(mask.dim(), (16, 16));
        assert_eq!(mask_from_probability(&prob, 0.5).unwrap(), mask);
    }
}

fn report_args(f: &Fixture, out: &str) -> ReportArgs {
    ReportArgs {
        masks: Some(f.root.join("val/masks")),
        out: Some(f.out.join(out)),
        images: vec![f.root.join("val/images/00000.png"), f.root.join("val/images/00001.png")],
        ..Default::default()
    }
}

#[test]
fn report_with_mock_record_and_replay() {
    let f = fixture(2);
    let transcript = f.out.join("t.jsonl");
    std::fs::create_dir_all(&f.out).unwrap();
    let first = cmd_report(
        &f.cfg,
        &ReportArgs {
            record: Some(transcript.clone()),
            ..report_args(&f, "a.jsonl")
        },
    )
    .unwrap();
    assert_eq!(first.reports, 2);
    let exchanges: Vec<Exchange> = read_jsonl(&transcript).unwrap();
    assert_eq!(exchanges.len(), 4);

    let replayed = cmd_report(
        &f.cfg,
        &ReportArgs {
            replay: Some(transcript),
            ..report_args(&f, "b.jsonl")
        },
    )
    .unwrap();
    assert_eq!(read(&first.path), read(&replayed.path));
    let reports: Vec<AssessmentReport> = read_jsonl(&first.path).unwrap();
    assert!(reports.iter().all(|r| r.parsed));
}

#[test]
fn no_s3cot_sends_the_bare_instruction() {
    let f = fixture(2);
    let transcript = f.out.join("bare.jsonl");
    std::fs::create_dir_all(&f.out).unwrap();
    cmd_report(
        &f.cfg,
        &ReportArgs {
            no_s3cot: true,
            record: Some(transcript.clone()),
            ..report_args(&f, "bare_reports.jsonl")
        },
    )
    .unwrap();
    let exchanges: Vec<Exchange> = read_jsonl(&transcript).unwrap();
    assert_eq!(exchanges.len(), 2);
    let t = TemplateSet::default();
    for ex in exchanges {
        let text: Vec<String> = ex.request.iter().map(|m| m.text()).collect();
        assert_eq!(text, vec![format!("{}\n{}", t.image_prefix, t.report_instruction)]);
        assert_eq!(ex.request[0].images().count(), 1);
    }
}

/// Writes reports, references and a transcript answering each scoring
/// request with the given reply.
fn scoring_fixture(f: &Fixture, replies: &[(&str, &str)], corpus_ids: &[&str]) -> (PathBuf, PathBuf, PathBuf) {
    std::fs::create_dir_all(&f.out).unwrap();
    let img = waterseg::data::load_image(&f.root.join("val/images/00000.png")).unwrap();
    let reports: Vec<AssessmentReport> = replies
        .iter()
        .map(|(id, _)| AssessmentReport {
            image: id.to_string(),
            generated: format!("generated for {id}"),
            sections: Default::default(),
            parsed: false,
            caption: None,
            metadata: [("path".to_string(), f.root.join("val/images/00000.png").display().to_string())].into(),
        })
        .collect();
    let corpus: Vec<CorpusEntry> = corpus_ids
        .iter()
        .map(|id| CorpusEntry {
            image: id.to_string(),
            reference: format!("reference for {id}"),
            reviewed: true,
            metadata: Default::default(),
            error: None,
        })
        .collect();
    let t = TemplateSet::default();
    let exchanges: Vec<Exchange> = replies
        .iter()
        .map(|(id, reply)| Exchange {
            request: scoring_messages(&image_part(id, &img), &format!("reference for {id}"), &format!("generated for {id}"), &t),
            response: reply.to_string(),
        })
        .collect();
    let (rp, cp, tp) = (f.out.join("reports.jsonl"), f.out.join("corpus.jsonl"), f.out.join("score_t.jsonl"));
    waterseg::report::write_jsonl(&rp, &reports).unwrap();
    waterseg::report::write_jsonl(&cp, &corpus).unwrap();
    waterseg::report::client::write_transcript(&tp, &exchanges).unwrap();
    (rp, cp, tp)
}

#[test]
fn score_summary_and_unmatched_items() {
    let f = fixture(1);
    let (rp, cp, tp) = scoring_fixture(&f, &[("a", "Score: 5. Misses depth."), ("b", "I give it a score of 8."), ("c", "Score: 9")], &["a", "b"]);
    let summary = cmd_score(
        &f.cfg,
        &ScoreArgs {
            reports: rp,
            corpus: cp,
            replay: Some(tp),
            out: Some(f.out.join("scores")),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(summary.mean, 6.5);
    assert_eq!((summary.count, summary.errors), (2, 1));
    let records: Vec<ScoreRecord> = read_jsonl(&f.out.join("scores/scores.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records[2].error.as_deref().unwrap().contains("no reference"));
}

#[test]
fn score_summary_on_ten_items() {
    let f = fixture(1);
    let scores = [7, 3, 9, 9, 4, 6, 8, 10, 2, 6];
    let ids: Vec<String> = (0..10).map(|i| format!("img{i}")).collect();
    let replies: Vec<String> = scores.iter().map(|s| format!("Score: {s}")).collect();
    let pairs: Vec<(&str, &str)> = ids.iter().map(String::as_str).zip(replies.iter().map(String::as_str)).collect();
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let (rp, cp, tp) = scoring_fixture(&f, &pairs, &id_refs);
    let s = cmd_score(
        &f.cfg,
        &ScoreArgs {
            reports: rp,
            corpus: cp,
            replay: Some(tp),
            out: Some(f.out.join("ten")),
            ..Default::default()
        },
    )
    .unwrap();
    // sorted: 2 3 4 6 6 7 8 9 9 10
    assert_eq!(s.mean, 6.4);
    assert_eq!(s.median, 6.5);
    assert_eq!(s.q1, 4.5);
    assert_eq!(s.q3, 8.75);
    let var = scores.iter().map(|&v| (f64::from(v) - 6.4).powi(2)).sum::<f64>() / 10.0;
    assert!((s.std - var.sqrt()).abs() < 1e-12);
    assert_eq!(s.histogram, [0, 1, 1, 1, 0, 2, 1, 1, 2, 1]);
}

#[test]
fn plotdata_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("m.json"),
        r#"{"metrics": {"precision": 0.9, "recall": 0.8, "specificity": 0.95, "dice": 0.85, "iou": 0.74, "g_mean": 0.87, "counts": {"tp": 1, "fp": 0, "tn": 1, "fn": 0}}}"#,
    )
    .unwrap();
    std::fs::write(d.join("pr.csv"), "threshold,precision,recall\n0.25,0.5,0.9\n0.5,0.7,0.7\n0.75,0.9,0.3\n").unwrap();
    std::fs::write(d.join("per.csv"), "image,iou\na,0.1\nb,0.4\nc,0.2\nd,0.9\ne,0.5\n").unwrap();
    let out = cmd_plotdata(&PlotArgs {
        metrics: vec![format!("{}@ours", d.join("m.json").display())],
        pr: vec![format!("{}@ours", d.join("pr.csv").display())],
        per_image: vec![format!("{}@ours", d.join("per.csv").display())],
        scores: vec![],
        out: d.join("plots"),
    })
    .unwrap();
    assert_eq!(out.len(), 3);

    let radar = read(&d.join("plots/radar.csv"));
    assert_eq!(radar.lines().count(), 7);
    assert!(radar.contains("ours,iou,0.74"));

    let pr = read(&d.join("plots/pr.csv"));
    let lines: Vec<&str> = pr.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[1], "ours,curve,0.25,0.5,0.9");
    assert_eq!(lines[4], "ours,bep,0.5,0.7,0.7");

    // sorted 0.1 0.2 0.4 0.5 0.9: positions 1 and 3 are exact order statistics
    let b = box_stats(&[0.1, 0.4, 0.2, 0.9, 0.5]);
    assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (0.1, 0.2, 0.4, 0.5, 0.9));
    let boxes = read(&d.join("plots/box.csv"));
    assert!(boxes.lines().nth(1).unwrap().starts_with("ours,iou,5,0.1,0.2,0.4,0.5,0.9"));
}

#[test]
fn box_quartiles_interpolate_between_order_statistics() {
    // n = 4: q1 at position 0.75, median at 1.5, q3 at 2.25
    let b = box_stats(&[0.8, 0.2, 0.6, 0.4]);
    assert!((b.q1 - 0.35).abs() < 1e-12);
    assert!((b.median - 0.5).abs() < 1e-12);
    assert!((b.q3 - 0.65).abs() < 1e-12);
}

#[test]
fn probability_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = ndarray::Array2::from_shape_fn((3, 4), |(y, x)| u8::from(x > y));
    let p = dir.path().join("m.png");
    waterseg::data::save_mask(&m, &p).unwrap();
    assert_eq!(load_probability(&p).unwrap(), m.mapv(f64::from));
}
