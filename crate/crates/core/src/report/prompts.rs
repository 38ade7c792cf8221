//! Prompt templates and the semantic, spatial and structural prompt builders.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECTIONS: [&str; 4] = ["Extent", "Depth", "Risk", "Impact"];

/// Colour of water pixels in the mask visualization; everything else is black.
pub const OVERLAY: [u8; 3] = [0, 160, 255];

/// Editable prompt texts. `{caption}` in `semantic` is replaced by the
/// step-one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSet {
    pub image_token: String,
    pub image_prefix: String,
    pub mask_prefix: String,
    pub caption_instruction: String,
    pub semantic: String,
    pub spatial_header: String,
    pub report_instruction: String,
    pub structural: String,
    pub evaluator_system: String,
    pub evaluation_requirements: String,
    pub corpus_system: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            image_token: "<image>".into(),
            image_prefix: "Image: <image>".into(),
            mask_prefix: "Water mask: <image>".into(),
            caption_instruction: "Describe this street scene in a few sentences. Mention the weather, the lighting, \
                the road condition and the surroundings such as buildings, vehicles, pedestrians and vegetation."
                .into(),
            semantic: "Scene description: {caption}".into(),
            spatial_header: "Spatial information from the water segmentation mask:".into(),
            report_instruction: "Write an assessment report of the urban waterlogging shown in the image.".into(),
            structural: "Organize the report into four sections in this order, each introduced by its header on its own line:\n\
                Extent:\nDepth:\nRisk:\nImpact:\n\
                Under Extent, describe where the water is and how far it spreads. \
                Under Depth, estimate the water depth from reference objects such as curbs, wheels and legs. \
                Under Risk, list hazards to pedestrians, vehicles and infrastructure. \
                Under Impact, summarize the effect on traffic and daily activity.\n\
                Ground every statement in the provided water mask; do not report water outside the masked area."
                .into(),
            evaluator_system: "You are a helpful and precise assistant for checking the quality of urban waterlogging \
                assessment reports."
                .into(),
            evaluation_requirements: "Compare the generated report with the reference report for the image above. \
                Rate the generated report for accuracy, comprehensiveness and details on a scale of 1 to 10, where a \
                higher score means better overall quality. Start your answer with a line of the form \"Score: N\" and \
                then explain your evaluation."
                .into(),
            corpus_system: "You are an expert in urban flood assessment. For the image sent by the user, write a \
                factual assessment report with four sections in this order: Extent, Depth, Risk and Impact. Describe \
                only what is visible in the image."
                .into(),
        }
    }
}

impl TemplateSet {
    pub fn validate(&self) -> Result<()> {
        for name in SECTIONS {
            if !self.structural.contains(&format!("{name}:")) {
                return Err(Error::Template(format!("structural template does not name the `{name}:` section")));
            }
        }
        if !self.semantic.contains("{caption}") {
            return Err(Error::Template("semantic template must contain `{caption}`".into()));
        }
        for (field, text) in [("image_prefix", &self.image_prefix), ("mask_prefix", &self.mask_prefix)] {
            if text.matches(self.image_token.as_str()).count() != 1 {
                return Err(Error::Template(format!("{field} must contain the image token exactly once")));
            }
        }
        Ok(())
    }

    /// Defaults overridden by the keys present in a JSON file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::Template(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }
}

pub fn build_semantic_prompt(caption: &str, t: &TemplateSet) -> String {
    t.semantic.replace("{caption}", &caption.replace(&t.image_token, ""))
}

pub fn build_structural_prompt(t: &TemplateSet) -> String {
    format!("{}\n{}", t.report_instruction, t.structural)
}

/// Summary statistics behind the spatial prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSummary {
    pub coverage: f64,
    /// Row-major cell coverage fractions.
    pub cells: Vec<f64>,
    pub grid: [usize; 2],
    pub components: usize,
    /// Normalized `(x_min, y_min, x_max, y_max)` of the largest component.
    pub largest_bbox: Option<[f64; 4]>,
}

pub fn spatial_summary(mask: &Array2<u8>, grid: [usize; 2]) -> SpatialSummary {
    let (h, w) = mask.dim();
    let n = (h * w).max(1) as f64;
    let coverage = mask.iter().filter(|&&v| v > 0).count() as f64 / n;
    let [gr, gc] = grid;
    let mut cells = Vec::with_capacity(gr * gc);
    for r in 0..gr {
        let (y0, y1) = (r * h / gr, (r + 1) * h / gr);
        for c in 0..gc {
            let (x0, x1) = (c * w / gc, (c + 1) * w / gc);
            let area = (y1 - y0) * (x1 - x0);
            let wet = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).filter(|&p| mask[p] > 0).count();
            cells.push(if area == 0 { 0.0 } else { wet as f64 / area as f64 });
        }
    }
    let (components, largest) = components(mask);
    let largest_bbox = largest.map(|[y0, x0, y1, x1]| [x0 as f64 / w as f64, y0 as f64 / h as f64, (x1 + 1) as f64 / w as f64, (y1 + 1) as f64 / h as f64]);
    SpatialSummary {
        coverage,
        cells,
        grid,
        components,
        largest_bbox,
    }
}

/// 4-connected components; returns the count and the pixel bounding box
/// `[y0, x0, y1, x1]` (inclusive) of the largest one.
fn components(mask: &Array2<u8>) -> (usize, Option<[usize; 4]>) {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut count = 0;
    let mut best: Option<(usize, [usize; 4])> = None;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask[[sy, sx]] == 0 || seen[[sy, sx]] {
                continue;
            }
            count += 1;
            let mut size = 0;
            let mut bb = [sy, sx, sy, sx];
            seen[[sy, sx]] = true;
            stack.push((sy, sx));
            while let Some((y, x)) = stack.pop() {
                size += 1;
                bb = [bb[0].min(y), bb[1].min(x), bb[2].max(y), bb[3].max(x)];
                let nbrs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (ny, nx) in nbrs {
                    if ny < h && nx < w && mask[[ny, nx]] > 0 && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, bb));
            }
        }
    }
    (count, best.map(|(_, bb)| bb))
}

fn cell_label(grid: [usize; 2], r: usize, c: usize) -> String {
    if grid == [3, 3] {
        const ROWS: [&str; 3] = ["top", "middle", "bottom"];
        const COLS: [&str; 3] = ["left", "center", "right"];
        return match (r, c) {
            (1, 1) => "center".into(),
            (_, 1) => format!("{}-center", ROWS[r]),
            _ => format!("{}-{}", ROWS[r], COLS[c]),
        };
    }
    format!("row {} col {}", r + 1, c + 1)
}

pub fn format_percent(frac: f64) -> String {
    format!("{:.1}%", frac * 100.0)
}

pub fn build_spatial_prompt(mask: &Array2<u8>, grid: [usize; 2], t: &TemplateSet) -> String {
    let s = spatial_summary(mask, grid);
    let mut out = format!("{}\n- Water coverage {} of the image.\n", t.spatial_header, format_percent(s.coverage));
    out.push_str(&format!("- Coverage by region ({}x{} grid):", grid[0], grid[1]));
    for r in 0..grid[0] {
        let row: Vec<String> = (0..grid[1])
            .map(|c| format!("{} {}", cell_label(grid, r, c), format_percent(s.cells[r * grid[1] + c])))
            .collect();
        out.push_str(&format!("\n  {}", row.join(", ")));
    }
    out.push_str(&format!("\n- Connected water regions: {}", s.components));
    match s.largest_bbox {
        Some([x0, y0, x1, y1]) => out.push_str(&format!(
            "\n- Largest region bounding box (normalized x_min, y_min, x_max, y_max): ({x0:.2}, {y0:.2}, {x1:.2}, {y1:.2})"
        )),
        None => out.push_str("\n- Largest region bounding box: none"),
    }
    out
}

/// Water pixels in [`OVERLAY`] on black, `[H, W, 3]` in `[0, 1]`.
pub fn mask_visualization(mask: &Array2<u8>) -> Array3<f64> {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| if mask[[y, x]] > 0 { f64::from(OVERLAY[c]) / 255.0 } else { 0.0 })
}
