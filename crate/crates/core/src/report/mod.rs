//! Two-step prompted report generation over a pluggable multimodal client,
//! report scoring, and draft reference corpora.
//!
//! Step one asks for a scene caption. Step two sends the image, the mask
//! visualization and the semantic, spatial and structural prompts in one
//! request. Each prompt component can be switched off for ablations.

pub mod client;
pub mod parse;
pub mod prompts;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::encode_png;
use crate::error::{Error, Result};

pub use client::{
    build_client, generate_with_retry, run_bounded, ClientConfig, ClientKind, Exchange, ImageData, Message, MockClient, Part,
    RecordingClient, ReplayClient, RetryPolicy, Role, VlmClient,
};
pub use parse::{parse_score, parse_sections, Sections};
pub use prompts::{
    build_semantic_prompt, build_spatial_prompt, build_structural_prompt, mask_visualization, spatial_summary, SpatialSummary,
    TemplateSet, SECTIONS,
};

/// Which step-two prompt components are sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptFlags {
    pub semantic: bool,
    pub spatial: bool,
    pub structural: bool,
}

impl PromptFlags {
    pub const ALL: Self = Self {
        semantic: true,
        spatial: true,
        structural: true,
    };
    pub const NONE: Self = Self {
        semantic: false,
        spatial: false,
        structural: false,
    };
}

impl Default for PromptFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Report generator.
    pub client: ClientConfig,
    /// Scoring and reference-corpus model.
    pub evaluator: ClientConfig,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    /// When false every prompt component is dropped and step two sends the
    /// image with the bare instruction.
    pub s3cot: bool,
    pub prompts: PromptFlags,
    pub grid: [usize; 2],
    /// JSON file overriding individual template texts.
    pub templates: Option<PathBuf>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            client: ClientConfig::default(),
            evaluator: ClientConfig {
                model: "gpt-4-turbo".into(),
                endpoint: "https://api.openai.com/v1/chat/completions".into(),
                token_env: "OPENAI_API_KEY".into(),
                ..ClientConfig::default()
            },
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            s3cot: true,
            prompts: PromptFlags::ALL,
            grid: [3, 3],
            templates: None,
        }
    }
}

impl ReportConfig {
    pub fn validate(&self) -> Result<()> {
        self.client.validate()?;
        self.evaluator.validate()?;
        if self.max_in_flight == 0 {
            return Err(Error::config("report.max_in_flight must be at least 1"));
        }
        if self.grid.contains(&0) {
            return Err(Error::config("report.grid must be positive"));
        }
        Ok(())
    }

    pub fn flags(&self) -> PromptFlags {
        if self.s3cot {
            self.prompts
        } else {
            PromptFlags::NONE
        }
    }

    pub fn load_templates(&self) -> Result<TemplateSet> {
        match &self.templates {
            Some(p) => TemplateSet::load(p),
            None => Ok(TemplateSet::default()),
        }
    }

    pub fn context(&self) -> Result<ReportContext> {
        Ok(ReportContext {
            templates: self.load_templates()?,
            retry: self.retry.clone(),
            flags: self.flags(),
            grid: self.grid,
            max_in_flight: self.max_in_flight,
        })
    }
}

/// Everything the pipeline needs besides the client.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportContext {
    pub templates: TemplateSet,
    pub retry: RetryPolicy,
    pub flags: PromptFlags,
    pub grid: [usize; 2],
    pub max_in_flight: usize,
}

impl Default for ReportContext {
    fn default() -> Self {
        Self {
            templates: TemplateSet::default(),
            retry: RetryPolicy::default(),
            flags: PromptFlags::ALL,
            grid: [3, 3],
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub image: String,
    pub text: String,
}

/// Step-two inputs. Disabled components are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub image: ImageData,
    pub mask: Option<ImageData>,
    pub semantic: Option<String>,
    pub spatial: Option<String>,
    pub structural: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub image: String,
    pub generated: String,
    pub sections: Sections,
    /// False when the reply could not be split into the four sections;
    /// `generated` still holds the raw text.
    pub parsed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringReport {
    pub image: String,
    pub score: u8,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub image: String,
    pub reference: String,
    pub reviewed: bool,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn image_part(id: &str, image: &Array3<f64>) -> ImageData {
    ImageData::from_png(id, &encode_png(image))
}

fn pipeline_err(item: &str, e: Error) -> Error {
    Error::Pipeline {
        item: item.to_string(),
        source: Box::new(e),
    }
}

pub fn caption_messages(image: &ImageData, t: &TemplateSet) -> Vec<Message> {
    vec![Message::user(vec![
        Part::Image { image: image.clone() },
        Part::text(&t.image_prefix),
        Part::text(&t.caption_instruction),
    ])]
}

pub fn caption_image(image: &ImageData, client: &dyn VlmClient, ctx: &ReportContext) -> Result<Caption> {
    let (text, retries) =
        generate_with_retry(client, &caption_messages(image, &ctx.templates), &ctx.retry).map_err(|e| pipeline_err(&image.id, e))?;
    if retries > 0 {
        log::info!("{}: caption needed {retries} retries", image.id);
    }
    Ok(Caption {
        image: image.id.clone(),
        text,
    })
}

pub fn build_bundle(image: ImageData, mask: &Array2<u8>, caption: Option<&Caption>, ctx: &ReportContext) -> PromptBundle {
    let f = ctx.flags;
    let t = &ctx.templates;
    PromptBundle {
        mask: f.spatial.then(|| image_part(&format!("{}#mask", image.id), &mask_visualization(mask))),
        image,
        semantic: caption.filter(|_| f.semantic).map(|c| build_semantic_prompt(&c.text, t)),
        spatial: f.spatial.then(|| build_spatial_prompt(mask, ctx.grid, t)),
        structural: f.structural.then(|| build_structural_prompt(t)),
    }
}

/// Step-two request: images first, then the image markers, then the prompt
/// texts in semantic, spatial, structural order. Without the structural
/// prompt the bare report instruction is sent instead.
pub fn report_messages(b: &PromptBundle, t: &TemplateSet) -> Vec<Message> {
    let mut parts = vec![Part::Image { image: b.image.clone() }];
    if let Some(m) = &b.mask {
        parts.push(Part::Image { image: m.clone() });
    }
    parts.push(Part::text(&t.image_prefix));
    if b.mask.is_some() {
        parts.push(Part::text(&t.mask_prefix));
    }
    for text in [&b.semantic, &b.spatial].into_iter().flatten() {
        parts.push(Part::text(text));
    }
    parts.push(Part::text(b.structural.as_deref().unwrap_or(&t.report_instruction)));
    vec![Message::user(parts)]
}

/// Caption (when the semantic prompt is on), then one report request.
pub fn generate_report(image_id: &str, image: &Array3<f64>, mask: &Array2<u8>, client: &dyn VlmClient, ctx: &ReportContext) -> Result<AssessmentReport> {
    if image.dim().0 != mask.dim().0 || image.dim().1 != mask.dim().1 {
        return Err(pipeline_err(image_id, Error::invariant("mask and image sizes differ")));
    }
    let img = image_part(image_id, image);
    let caption = if ctx.flags.semantic {
        Some(caption_image(&img, client, ctx)?)
    } else {
        None
    };
    let bundle = build_bundle(img, mask, caption.as_ref(), ctx);
    let (generated, _) =
        generate_with_retry(client, &report_messages(&bundle, &ctx.templates), &ctx.retry).map_err(|e| pipeline_err(image_id, e))?;
    let sections = parse_sections(&generated);
    if sections.is_none() {
        log::warn!("{image_id}: report does not contain the four sections; keeping raw text");
    }
    Ok(AssessmentReport {
        image: image_id.to_string(),
        parsed: sections.is_some(),
        sections: sections.unwrap_or_default(),
        generated,
        caption: caption.map(|c| c.text),
        metadata: BTreeMap::new(),
    })
}

pub fn scoring_messages(image: &ImageData, reference: &str, generated: &str, t: &TemplateSet) -> Vec<Message> {
    vec![
        Message::system(&t.evaluator_system),
        Message::user(vec![Part::Image { image: image.clone() }]),
        Message::user(vec![Part::text(format!(
            "Reference report:\n{reference}\n\nGenerated report:\n{generated}\n\nEvaluation requirements:\n{}",
            t.evaluation_requirements
        ))]),
    ]
}

pub fn score_report(image_id: &str, image: &Array3<f64>, reference: &str, generated: &str, client: &dyn VlmClient, ctx: &ReportContext) -> Result<ScoringReport> {
    if reference.trim().is_empty() || generated.trim().is_empty() {
        return Err(pipeline_err(image_id, Error::invariant("reference and generated reports must be non-empty")));
    }
    let msgs = scoring_messages(&image_part(image_id, image), reference, generated, &ctx.templates);
    let (text, _) = generate_with_retry(client, &msgs, &ctx.retry).map_err(|e| pipeline_err(image_id, e))?;
    let (score, explanation) = parse_score(&text)?;
    Ok(ScoringReport {
        image: image_id.to_string(),
        score,
        explanation,
    })
}

pub fn corpus_messages(image: &ImageData, t: &TemplateSet) -> Vec<Message> {
    vec![Message::system(&t.corpus_system), Message::user(vec![Part::Image { image: image.clone() }])]
}

/// One draft reference per image, all marked unreviewed. Failed items keep
/// an empty reference and the error text.
pub fn build_reference_corpus(images: &[(String, Array3<f64>)], client: &dyn VlmClient, ctx: &ReportContext, out: &Path) -> Result<Vec<CorpusEntry>> {
    let entries = run_bounded(images, ctx.max_in_flight, |(id, img)| {
        let msgs = corpus_messages(&image_part(id, img), &ctx.templates);
        match generate_with_retry(client, &msgs, &ctx.retry) {
            Ok((reference, _)) => CorpusEntry {
                image: id.clone(),
                reference,
                reviewed: false,
                metadata: BTreeMap::new(),
                error: None,
            },
            Err(e) => CorpusEntry {
                image: id.clone(),
                reference: String::new(),
                reviewed: false,
                metadata: BTreeMap::new(),
                error: Some(e.to_string()),
            },
        }
    });
    write_jsonl(out, &entries)?;
    Ok(entries)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for item in items {
        writeln!(f, "{}", serde_json::to_string(item)?).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Mean, spread and 1..=10 histogram of a set of scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub errors: usize,
    pub mean: f64,
    pub std: f64,
    pub min: u8,
    pub max: u8,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub histogram: [usize; 10],
}

pub fn summarize_scores(scores: &[u8], errors: usize) -> ScoreSummary {
    let n = scores.len();
    let vals: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
    let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
    let std = if n == 0 { f64::NAN } else { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt() };
    let mut histogram = [0; 10];
    for &s in scores {
        histogram[usize::from(s.clamp(1, 10)) - 1] += 1;
    }
    let mut sorted = vals.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p| crate::metrics::quantile(&sorted, p);
    ScoreSummary {
        count: n,
        errors,
        mean,
        std,
        min: scores.iter().copied().min().unwrap_or(0),
        max: scores.iter().copied().max().unwrap_or(0),
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        histogram,
    }
}
