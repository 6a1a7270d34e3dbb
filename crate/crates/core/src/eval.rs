//! Obstacle-segmentation evaluation.
//!
//! Pixel level: precision/recall over every distinct score threshold,
//! step-wise average precision, and the false-positive rate at 95% TPR.
//! Segment level: 8-connected components, per-segment sIoU and PPV, and F1
//! over a grid of binarisation thresholds.
//!
//! Pixels labelled 255 (ignore) never enter any count.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::ScoreMap;
use crate::tensor::{BinaryMask, MaskLabel};

pub const DEFAULT_TPR_TARGET: f64 = 0.95;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// `{0.25, 0.30, ..., 0.75}`
pub fn default_thresholds() -> Vec<f64> {
    (0..=10).map(|i| 0.25 + 0.05 * f64::from(i)).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("score map is {score_w}x{score_h} but ground truth is {gt_w}x{gt_h}")]
    DimensionMismatch {
        score_w: usize,
        score_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("ground truth contains no positive pixels")]
    NoPositives,
    #[error("precision-recall curve is empty")]
    EmptyCurve,
    #[error("target TPR {0} is never reached")]
    TargetUnreachable(f64),
    #[error("no frames to evaluate")]
    NoFrames,
    #[error("threshold list is empty")]
    NoThresholds,
    #[error("score is NaN")]
    NanScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub tp: u64,
    pub fp: u64,
}

/// One point per distinct score, ordered by descending threshold (so recall
/// is non-decreasing along the list).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub positives: u64,
    pub negatives: u64,
}

fn check_dims(scores: &ScoreMap, gt: &BinaryMask) -> Result<(), EvalError> {
    if scores.width() != gt.width() || scores.height() != gt.height() {
        return Err(EvalError::DimensionMismatch {
            score_w: scores.width(),
            score_h: scores.height(),
            gt_w: gt.width(),
            gt_h: gt.height(),
        });
    }
    Ok(())
}

fn labelled_pixels<'a>(scores: &'a ScoreMap, gt: &'a BinaryMask) -> impl Iterator<Item = (f64, bool)> + 'a {
    scores
        .values()
        .iter()
        .zip(gt.values())
        .filter(|(_, &g)| g != MaskLabel::IGNORE)
        .map(|(&s, &g)| (s, g == MaskLabel::OBJECT))
}

pub fn pr_curve(scores: &ScoreMap, gt: &BinaryMask) -> Result<PrCurve, EvalError> {
    check_dims(scores, gt)?;
    pr_curve_from_pairs(labelled_pixels(scores, gt).collect())
}

/// Curve over the pooled pixels of several frames.
pub fn pr_curve_pooled(frames: &[(ScoreMap, BinaryMask)]) -> Result<PrCurve, EvalError> {
    let mut pairs = Vec::new();
    for (scores, gt) in frames {
        check_dims(scores, gt)?;
        pairs.extend(labelled_pixels(scores, gt));
    }
    pr_curve_from_pairs(pairs)
}

/// Curve from `(score, is_positive)` pairs.
pub fn pr_curve_from_pairs(mut pairs: Vec<(f64, bool)>) -> Result<PrCurve, EvalError> {
    if pairs.iter().any(|(s, _)| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    let positives = pairs.iter().filter(|(_, y)| *y).count() as u64;
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let negatives = pairs.len() as u64 - positives;
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
            fpr: if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 },
            tp,
            fp,
        });
    }
    Ok(PrCurve {
        points,
        positives,
        negatives,
    })
}

/// `Σ_k (R_k − R_{k−1}) · P_k` with `R_0 = 0`, no interpolation.
pub fn average_precision(curve: &PrCurve) -> Result<f64, EvalError> {
    if curve.points.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in &curve.points {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Smallest FPR among operating points with recall `>= target`.
pub fn fpr_at_tpr(curve: &PrCurve, target: f64) -> Result<f64, EvalError> {
    if curve.points.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    curve
        .points
        .iter()
        .filter(|p| p.recall >= target)
        .map(|p| p.fpr)
        .reduce(f64::min)
        .ok_or(EvalError::TargetUnreachable(target))
}

/// Maximal 8-connected components of object pixels.
///
/// Ids are `1..=K`, assigned in raster order of each component's first
/// pixel; `0` marks pixels outside every component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSet {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    components: Vec<Vec<usize>>,
}

impl SegmentSet {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Pixel indices of component `id` (1-based), sorted.
    pub fn component(&self, id: u32) -> &[usize] {
        &self.components[id as usize - 1]
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }
}

pub fn connected_components(mask: &BinaryMask) -> SegmentSet {
    components_of(mask.width(), mask.height(), |idx| mask.is_object(idx))
}

fn components_of(width: usize, height: usize, is_fg: impl Fn(usize) -> bool) -> SegmentSet {
    let mut labels = vec![0u32; width * height];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..width * height {
        if labels[start] != 0 || !is_fg(start) {
            continue;
        }
        let id = components.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            pixels.push(idx);
            let (x, y) = ((idx % width) as isize, (idx / width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let n = ny as usize * width + nx as usize;
                    if labels[n] == 0 && is_fg(n) {
                        labels[n] = id;
                        queue.push_back(n);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    SegmentSet {
        width,
        height,
        labels,
        components,
    }
}

/// Segment-level results at one binarisation threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSegments {
    pub threshold: f64,
    /// One entry per ground-truth segment.
    pub siou: Vec<f64>,
    /// One entry per predicted segment.
    pub ppv: Vec<f64>,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
}

impl ThresholdSegments {
    /// `2TP / (2TP + FN + FP)`, undefined with no segments on either side.
    pub fn f1(&self) -> Option<f64> {
        f1_from_counts(self.tp, self.fn_, self.fp)
    }
}

fn f1_from_counts(tp: usize, fn_: usize, fp: usize) -> Option<f64> {
    let denom = 2 * tp + fn_ + fp;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// Per-threshold sIoU / PPV / counts.
///
/// At threshold `t` the prediction is `score >= t` outside ignore pixels.
/// For a ground-truth segment `k`, `sIoU = |k ∩ P| / |k ∪ P|` where `P` is
/// the union of predicted segments touching `k`; it counts as a true
/// positive when `sIoU >= match_threshold`. A predicted segment `p` has
/// `PPV = |p ∩ G| / |p|` with `G` all ground-truth object pixels; it is a
/// false positive when `PPV < match_threshold`.
pub fn segment_metrics(
    scores: &ScoreMap,
    gt_instances: &SegmentSet,
    gt_mask: &BinaryMask,
    thresholds: &[f64],
    match_threshold: f64,
) -> Result<Vec<ThresholdSegments>, EvalError> {
    check_dims(scores, gt_mask)?;
    if thresholds.is_empty() {
        return Err(EvalError::NoThresholds);
    }
    let (w, h) = (scores.width(), scores.height());
    Ok(thresholds
        .iter()
        .map(|&t| {
            let pred = components_of(w, h, |idx| !gt_mask.is_ignore(idx) && scores.values()[idx] >= t);
            let siou: Vec<f64> = gt_instances
                .components()
                .iter()
                .map(|gt| {
                    let mut touching: Vec<u32> = gt.iter().map(|&i| pred.labels[i]).filter(|&l| l != 0).collect();
                    touching.sort_unstable();
                    touching.dedup();
                    let inter = gt.iter().filter(|&&i| pred.labels[i] != 0).count();
                    let pred_size: usize = touching.iter().map(|&l| pred.component(l).len()).sum();
                    let union = gt.len() + pred_size - inter;
                    inter as f64 / union as f64
                })
                .collect();
            let ppv: Vec<f64> = pred
                .components()
                .iter()
                .map(|p| p.iter().filter(|&&i| gt_mask.is_object(i)).count() as f64 / p.len() as f64)
                .collect();
            let tp = siou.iter().filter(|&&s| s >= match_threshold).count();
            ThresholdSegments {
                threshold: t,
                tp,
                fn_: siou.len() - tp,
                fp: ppv.iter().filter(|&&p| p < match_threshold).count(),
                siou,
                ppv,
            }
        })
        .collect())
}

/// How scores are mapped to `[0, 1]` before the segment-level thresholds
/// are applied. Pixel-level metrics always use raw scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    /// Thresholds apply to raw scores.
    None,
    /// `(s − min) / (max − min)` over all non-ignore pixels of all frames.
    #[default]
    MinMax,
    /// Dense rank among the distinct non-ignore scores, scaled to `[0, 1]`.
    /// Invariant under every strictly increasing transform.
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub match_threshold: f64,
    pub tpr_target: f64,
    pub normalization: ScoreNormalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            tpr_target: DEFAULT_TPR_TARGET,
            normalization: ScoreNormalization::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub threshold: f64,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub f1: Option<f64>,
    pub siou_mean: Option<f64>,
    pub ppv_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolInfo {
    pub thresholds: Vec<f64>,
    pub match_threshold: f64,
    pub tpr_target: f64,
    pub normalization: ScoreNormalization,
    pub segment_definitions: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub fpr95: f64,
    pub siou_bar: Option<f64>,
    pub ppv_bar: Option<f64>,
    pub f1_bar: Option<f64>,
    pub per_threshold: Vec<ThresholdSummary>,
    pub frames: usize,
    pub protocol: ProtocolInfo,
}

const SEGMENT_DEFINITIONS: &str = "sIoU(k) = |k & P(k)| / |k | P(k)|, P(k) = predicted segments touching k; \
PPV(p) = |p & G| / |p|; TP: sIoU >= match, FP: PPV < match; ignore pixels removed from predictions; \
local stand-in definitions";

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "frames,ap,fpr95,siou_bar,ppv_bar,f1_bar"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.frames,
            self.ap,
            self.fpr95,
            opt(self.siou_bar),
            opt(self.ppv_bar),
            opt(self.f1_bar)
        )
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Maps every frame's scores to `[0, 1]` with statistics pooled over all
/// non-ignore pixels.
pub fn normalize_scores(frames: &[(ScoreMap, BinaryMask)], mode: ScoreNormalization) -> Vec<ScoreMap> {
    let valid = || {
        frames
            .iter()
            .flat_map(|(s, g)| s.values().iter().zip(g.values()).filter(|(_, &l)| l != MaskLabel::IGNORE).map(|(&v, _)| v))
    };
    let rebuild = |s: &ScoreMap, f: &dyn Fn(f64) -> f64| s.map(f).expect("normalised scores are finite");
    match mode {
        ScoreNormalization::None => frames.iter().map(|(s, _)| s.clone()).collect(),
        ScoreNormalization::MinMax => {
            let (lo, hi) = valid().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            frames
                .iter()
                .map(|(s, _)| rebuild(s, &|v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 }))
                .collect()
        }
        ScoreNormalization::Rank => {
            let mut distinct: Vec<f64> = valid().collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let steps = (distinct.len().max(1) - 1) as f64;
            let rank = |v: f64| {
                // ignore pixels may hold values outside the valid set; they never count
                let r = distinct.partition_point(|&d| d < v).min(distinct.len().saturating_sub(1));
                if steps > 0.0 {
                    r as f64 / steps
                } else {
                    0.0
                }
            };
            frames.iter().map(|(s, _)| rebuild(s, &rank)).collect()
        }
    }
}

/// Full report over one or more frames.
pub fn evaluate(frames: &[(ScoreMap, BinaryMask)], config: &EvalConfig) -> Result<MetricsReport, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::NoFrames);
    }
    if config.thresholds.is_empty() {
        return Err(EvalError::NoThresholds);
    }
    let curve = pr_curve_pooled(frames)?;
    let ap = average_precision(&curve)?;
    let fpr95 = fpr_at_tpr(&curve, config.tpr_target)?;

    let normalized = normalize_scores(frames, config.normalization);
    let per_frame: Vec<Vec<ThresholdSegments>> = frames
        .iter()
        .zip(&normalized)
        .map(|((_, gt), scores)| {
            let instances = connected_components(gt);
            segment_metrics(scores, &instances, gt, &config.thresholds, config.match_threshold)
        })
        .collect::<Result<_, _>>()?;

    let per_threshold: Vec<ThresholdSummary> = config
        .thresholds
        .iter()
        .enumerate()
        .map(|(ti, &threshold)| {
            let at = || per_frame.iter().map(move |f| &f[ti]);
            let tp = at().map(|s| s.tp).sum();
            let fn_ = at().map(|s| s.fn_).sum();
            let fp = at().map(|s| s.fp).sum();
            ThresholdSummary {
                threshold,
                tp,
                fn_,
                fp,
                f1: f1_from_counts(tp, fn_, fp),
                siou_mean: mean(at().flat_map(|s| s.siou.iter().copied())),
                ppv_mean: mean(at().flat_map(|s| s.ppv.iter().copied())),
            }
        })
        .collect();

    Ok(MetricsReport {
        ap,
        fpr95,
        siou_bar: mean(per_threshold.iter().filter_map(|t| t.siou_mean)),
        ppv_bar: mean(per_threshold.iter().filter_map(|t| t.ppv_mean)),
        f1_bar: mean(per_threshold.iter().filter_map(|t| t.f1)),
        per_threshold,
        frames: frames.len(),
        protocol: ProtocolInfo {
            thresholds: config.thresholds.clone(),
            match_threshold: config.match_threshold,
            tpr_target: config.tpr_target,
            normalization: config.normalization,
            segment_definitions: SEGMENT_DEFINITIONS.to_string(),
        },
    })
}
