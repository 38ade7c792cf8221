//! Confusion-matrix metrics, PR curves and break-even points.
//!
//! Counts are accumulated over the whole dataset (micro averaging). Both the
//! confusion counts and the per-threshold PR counts are plain sums, so shards
//! can be evaluated independently and merged in any order.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::backbone::{BinaryMask, ProbabilityMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Adds the per-pixel outcomes of `pred` against `gt` to `counts`.
pub fn accumulate(pred: &BinaryMask, gt: &BinaryMask, counts: ConfusionCounts) -> Result<ConfusionCounts> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::invariant(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    let mut c = counts;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub dice: f64,
    pub iou: f64,
    pub g_mean: f64,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("precision", self.precision),
            ("recall", self.recall),
            ("specificity", self.specificity),
            ("dice", self.dice),
            ("iou", self.iou),
            ("g_mean", self.g_mean),
        ]
    }
}

/// `num / den`, or 1.0 / 0.0 when `den` is zero depending on whether the
/// matching error count is zero.
fn ratio(num: u64, den: u64, errors: u64) -> f64 {
    if den == 0 {
        if errors == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricReport {
    let precision = ratio(c.tp, c.tp + c.fp, c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_, c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp, c.fp);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_, c.fp + c.fn_);
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, c.fp + c.fn_);
    MetricReport {
        precision,
        recall,
        specificity,
        dice,
        iou,
        g_mean: (recall * specificity).sqrt(),
        counts: *c,
    }
}

/// Mean of per-image metrics (macro averaging); counts are the global sums.
pub fn macro_metrics(per_image: &[ConfusionCounts]) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(Error::invariant("no images to average"));
    }
    let n = per_image.len() as f64;
    let reports: Vec<MetricReport> = per_image.iter().map(compute_metrics).collect();
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        specificity: mean(|r| r.specificity),
        dice: mean(|r| r.dice),
        iou: mean(|r| r.iou),
        g_mean: mean(|r| r.g_mean),
        counts: per_image.iter().copied().fold(ConfusionCounts::default(), Add::add),
    })
}

/// Thresholds `i / (n + 1)` for `i = 1..=n`.
/// Quantile of sorted values with linear interpolation between order
/// statistics (position `p·(n−1)`). NaN for an empty slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

pub fn thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

/// Per-threshold positive/negative histograms; mergeable by addition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrCounts {
    /// `pos[k]` / `neg[k]`: ground-truth positive / negative pixels predicted
    /// positive for exactly the first `k` thresholds.
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl PrCounts {
    pub fn new(n_thresholds: usize) -> Self {
        Self {
            pos: vec![0; n_thresholds + 1],
            neg: vec![0; n_thresholds + 1],
        }
    }

    pub fn n_thresholds(&self) -> usize {
        self.pos.len() - 1
    }

    fn level(&self, p: f64, ts: &[f64]) -> usize {
        // number of thresholds t with t <= p
        ts.partition_point(|&t| t <= p)
    }

    pub fn add(&mut self, prob: &ProbabilityMap, gt: &BinaryMask) -> Result<()> {
        if prob.data.dim() != gt.data.dim() {
            return Err(Error::invariant(format!(
                "probability map {:?} and ground truth {:?} differ in shape",
                prob.data.dim(),
                gt.data.dim()
            )));
        }
        let ts = thresholds(self.n_thresholds());
        for (&p, &g) in prob.data.iter().zip(gt.data.iter()) {
            let k = self.level(p, &ts);
            if g == 1 {
                self.pos[k] += 1;
            } else {
                self.neg[k] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PrCounts) -> Result<()> {
        if other.pos.len() != self.pos.len() {
            return Err(Error::invariant("PR histograms use different threshold counts"));
        }
        for i in 0..self.pos.len() {
            self.pos[i] += other.pos[i];
            self.neg[i] += other.neg[i];
        }
        Ok(())
    }

    /// Confusion counts at threshold index `i` (0-based, threshold `(i+1)/(n+1)`).
    pub fn counts_at(&self, i: usize) -> ConfusionCounts {
        let tp: u64 = self.pos[i + 1..].iter().sum();
        let fp: u64 = self.neg[i + 1..].iter().sum();
        let fn_: u64 = self.pos[..=i].iter().sum();
        let tn: u64 = self.neg[..=i].iter().sum();
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn curve(&self) -> Result<PRCurve> {
        let total: u64 = self.pos.iter().chain(self.neg.iter()).sum();
        if total == 0 {
            return Err(Error::invariant("PR curve over an empty set"));
        }
        let points: Vec<PrPoint> = thresholds(self.n_thresholds())
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let m = compute_metrics(&self.counts_at(i));
                PrPoint {
                    threshold: t,
                    precision: m.precision,
                    recall: m.recall,
                }
            })
            .collect();
        let break_even = break_even(&points);
        Ok(PRCurve { points, break_even })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<PrPoint>,
    pub break_even: BreakEven,
}

impl PRCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        s
    }
}

/// First point where `precision - recall` changes sign, linearly interpolated
/// between neighbouring thresholds; the closest point if it never does.
pub fn break_even(points: &[PrPoint]) -> BreakEven {
    let d = |p: &PrPoint| p.precision - p.recall;
    for (i, p) in points.iter().enumerate() {
        if d(p) == 0.0 {
            return BreakEven {
                threshold: p.threshold,
                value: p.precision,
            };
        }
        if let Some(q) = points.get(i + 1) {
            let (d0, d1) = (d(p), d(q));
            if d0.signum() != d1.signum() && d1 != 0.0 {
                let a = d0 / (d0 - d1);
                let prec = p.precision + a * (q.precision - p.precision);
                let rec = p.recall + a * (q.recall - p.recall);
                return BreakEven {
                    threshold: p.threshold + a * (q.threshold - p.threshold),
                    value: 0.5 * (prec + rec),
                };
            }
        }
    }
    let best = points
        .iter()
        .min_by(|a, b| d(a).abs().total_cmp(&d(b).abs()))
        .expect("non-empty curve");
    BreakEven {
        threshold: best.threshold,
        value: 0.5 * (best.precision + best.recall),
    }
}

pub fn pr_curve(probs: &[ProbabilityMap], gts: &[BinaryMask], n_thresholds: usize) -> Result<PRCurve> {
    if probs.is_empty() || probs.len() != gts.len() {
        return Err(Error::invariant(format!(
            "PR curve needs aligned non-empty sets, got {} probability maps and {} masks",
            probs.len(),
            gts.len()
        )));
    }
    if n_thresholds == 0 {
        return Err(Error::config("PR curve needs at least one threshold"));
    }
    let mut acc = PrCounts::new(n_thresholds);
    for (p, g) in probs.iter().zip(gts) {
        acc.add(p, g)?;
    }
    acc.curve()
}

/// Accumulates both confusion counts (at a fixed threshold) and PR counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluator {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub per_image: Vec<ConfusionCounts>,
    pub pr: PrCounts,
}

impl Evaluator {
    pub fn new(threshold: f64, n_thresholds: usize) -> Self {
        Self {
            threshold,
            counts: ConfusionCounts::default(),
            per_image: Vec::new(),
            pr: PrCounts::new(n_thresholds),
        }
    }

    pub fn add(&mut self, prob: &ProbabilityMap, gt: &BinaryMask) -> Result<()> {
        let pred = crate::s2match::binarize(prob, self.threshold)?;
        for i in 0..gt.data.dim().0 {
            let p1 = BinaryMask::from_single(pred.image(i).to_owned())?;
            let g1 = BinaryMask::from_single(gt.image(i).to_owned())?;
            let c = accumulate(&p1, &g1, ConfusionCounts::default())?;
            self.per_image.push(c);
            self.counts += c;
        }
        self.pr.add(prob, gt)
    }

    /// Shards must be merged in image order for the per-image list to match a
    /// single-shard run; the micro report is order-independent.
    pub fn merge(&mut self, other: &Evaluator) -> Result<()> {
        self.counts += other.counts;
        self.per_image.extend_from_slice(&other.per_image);
        self.pr.merge(&other.pr)
    }

    pub fn report(&self) -> MetricReport {
        compute_metrics(&self.counts)
    }
}
