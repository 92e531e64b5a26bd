//! Box, mask and keypoint AP, and per-class counting error.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecs::{self, CanonicalPointSet, TaskKind};
use crate::geometry::{self, GeometryError};

/// Per-keypoint OKS constant, shared by every category.
pub const DEFAULT_KAPPA: f64 = 0.1;
/// Detections at or above this score are counted.
pub const COUNT_SCORE_THRESHOLD: f64 = 0.5;
/// Recall samples used for AP integration.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no evaluable keypoints")]
    NoEvaluableKeypoints,
    #[error("area must be positive, got {0}")]
    NonPositiveArea(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("expected {expected} point sets, got {found}")]
    TaskMismatch { expected: TaskKind, found: TaskKind },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("mixed categories in a single-category evaluation")]
    MixedCategories,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("record line {line}: {msg}")]
    Record { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// IoU/OKS thresholds `0.50, 0.55, ..., 0.95`, each computed as an integer
/// over 100 so that e.g. `0.6` is exact.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub category_id: u64,
    pub image_id: u64,
    pub score: f64,
    pub points: CanonicalPointSet,
}

impl Detection {
    pub fn new(category_id: u64, image_id: u64, score: f64, points: CanonicalPointSet) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(MetricsError::InvalidScore(score));
        }
        Ok(Self { category_id, image_id, score, points })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub category_id: u64,
    pub image_id: u64,
    pub points: CanonicalPointSet,
    /// Instance area in px², the OKS scale.
    pub area: f64,
}

fn expect_task(set: &CanonicalPointSet, task: TaskKind) -> Result<()> {
    if set.task() == task {
        Ok(())
    } else {
        Err(MetricsError::TaskMismatch { expected: task, found: set.task() })
    }
}

/// Mean over evaluable keypoints of `exp(-d^2 / (2 area kappa^2))`.
pub fn oks(pred: &CanonicalPointSet, gt: &CanonicalPointSet, eval_mask: &[bool], area: f64, kappa: f64) -> Result<f64> {
    expect_task(pred, TaskKind::Pose)?;
    expect_task(gt, TaskKind::Pose)?;
    if pred.len() != gt.len() || eval_mask.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} predicted, {} ground-truth, {} mask entries",
            pred.len(),
            gt.len(),
            eval_mask.len()
        )));
    }
    if !(area > 0.0) {
        return Err(MetricsError::NonPositiveArea(area));
    }
    let denom = 2.0 * area * kappa * kappa;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in eval_mask.iter().enumerate().filter(|(_, &m)| m) {
        let d = pred.points().points()[i].distance(gt.points().points()[i]);
        sum += (-d * d / denom).exp();
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::NoEvaluableKeypoints);
    }
    Ok(sum / n as f64)
}

/// Keypoints visible in at least one support instance and in the query
/// ground truth.
pub fn pose_eval_mask(support_visibility: &[&[bool]], query_gt: &CanonicalPointSet) -> Result<Vec<bool>> {
    expect_task(query_gt, TaskKind::Pose)?;
    let n = query_gt.len();
    if let Some(bad) = support_visibility.iter().find(|v| v.len() != n) {
        return Err(MetricsError::LengthMismatch(format!("support has {} keypoints, query {n}", bad.len())));
    }
    Ok((0..n).map(|i| query_gt.visible(i) && support_visibility.iter().any(|v| v[i])).collect())
}

/// Pairwise similarity used for matching.
pub trait Similarity: Sync {
    fn similarity(&self, det: &Detection, gt: &GroundTruth) -> Result<f64>;
}

impl<F: Fn(&Detection, &GroundTruth) -> Result<f64> + Sync> Similarity for F {
    fn similarity(&self, det: &Detection, gt: &GroundTruth) -> Result<f64> {
        self(det, gt)
    }
}

/// IoU of the boxes decoded from box point sets.
pub struct BoxIou;

impl Similarity for BoxIou {
    fn similarity(&self, det: &Detection, gt: &GroundTruth) -> Result<f64> {
        expect_task(&det.points, TaskKind::Detect)?;
        expect_task(&gt.points, TaskKind::Detect)?;
        Ok(geometry::box_iou(&codecs::decode_box(&det.points), &codecs::decode_box(&gt.points)))
    }
}

/// Exact polygon IoU of mask contours.
pub struct MaskIou;

impl Similarity for MaskIou {
    fn similarity(&self, det: &Detection, gt: &GroundTruth) -> Result<f64> {
        expect_task(&det.points, TaskKind::Segment)?;
        expect_task(&gt.points, TaskKind::Segment)?;
        Ok(geometry::polygon_iou(det.points.points(), gt.points.points())?)
    }
}

/// OKS with keypoints restricted to those visible in some support instance.
pub struct KeypointOks {
    pub kappa: f64,
    /// Union of support visibility, one flag per keypoint.
    pub support_visible: Vec<bool>,
}

impl KeypointOks {
    pub fn eval_mask(&self, gt: &GroundTruth) -> Result<Vec<bool>> {
        pose_eval_mask(&[&self.support_visible], &gt.points)
    }

    /// Ground truths with at least one evaluable keypoint; the rest cannot
    /// be scored and are dropped before matching.
    pub fn evaluable(&self, gts: &[GroundTruth]) -> Result<Vec<GroundTruth>> {
        let mut out = Vec::with_capacity(gts.len());
        for g in gts {
            if self.eval_mask(g)?.iter().any(|&m| m) {
                out.push(g.clone());
            }
        }
        Ok(out)
    }
}

impl Similarity for KeypointOks {
    fn similarity(&self, det: &Detection, gt: &GroundTruth) -> Result<f64> {
        oks(&det.points, &gt.points, &self.eval_mask(gt)?, gt.area, self.kappa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// `(threshold, AP)` pairs in ascending threshold order.
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub mean_ap: f64,
}

impl ApSummary {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.ap_per_threshold.iter().find(|(t, _)| *t == threshold).map(|&(_, ap)| ap)
    }
}

/// Detection indices by descending score, ties in insertion order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching at one threshold; `true` marks a true positive, in
/// `order`.
fn greedy_match(order: &[usize], dets: &[Detection], gts: &[GroundTruth], sim: &[Vec<f64>], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image_id != dets[d].image_id {
                    continue;
                }
                let s = sim[d][g];
                if s >= threshold && best.is_none_or(|(_, b)| s > b) {
                    best = Some((g, s));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from ranked true/false positives.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&v| v < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / RECALL_POINTS as f64
}

/// AP of one category at each threshold.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    similarity: &dyn Similarity,
    thresholds: &[f64],
) -> Result<ApSummary> {
    if thresholds.is_empty() {
        return Err(MetricsError::Empty("thresholds"));
    }
    let mut cats = dets.iter().map(|d| d.category_id).chain(gts.iter().map(|g| g.category_id));
    if let Some(first) = cats.next() {
        if cats.any(|c| c != first) {
            return Err(MetricsError::MixedCategories);
        }
    }
    let mut sim = vec![vec![f64::NEG_INFINITY; gts.len()]; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            if gt.image_id == det.image_id {
                sim[d][g] = similarity.similarity(det, gt)?;
            }
        }
    }
    let order = score_order(dets);
    let ap_per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| (t, interpolated_ap(&greedy_match(&order, dets, gts, &sim, t), gts.len())))
        .collect();
    let mean_ap = ap_per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / thresholds.len() as f64;
    Ok(ApSummary { ap_per_threshold, mean_ap })
}

/// Per class, MSE over its images; unweighted mean over classes.
pub fn counting_mse(per_class_pairs: &BTreeMap<u64, Vec<(f64, f64)>>) -> Result<f64> {
    if per_class_pairs.is_empty() {
        return Err(MetricsError::Empty("class list"));
    }
    let mut total = 0.0;
    for pairs in per_class_pairs.values() {
        if pairs.is_empty() {
            return Err(MetricsError::Empty("class image pairs"));
        }
        total += pairs.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pairs.len() as f64;
    }
    Ok(total / per_class_pairs.len() as f64)
}

/// `(predicted, true)` counts per class over the images holding that class.
/// Predicted counts are detections scoring at least `score_threshold`.
pub fn count_pairs(dets: &[Detection], gts: &[GroundTruth], score_threshold: f64) -> BTreeMap<u64, Vec<(f64, f64)>> {
    let mut truth: BTreeMap<u64, BTreeMap<u64, usize>> = BTreeMap::new();
    for g in gts {
        *truth.entry(g.category_id).or_default().entry(g.image_id).or_default() += 1;
    }
    truth
        .into_iter()
        .map(|(class, images)| {
            let pairs = images
                .into_iter()
                .map(|(image, n)| {
                    let pred = dets
                        .iter()
                        .filter(|d| d.category_id == class && d.image_id == image && d.score >= score_threshold)
                        .count();
                    (pred as f64, n as f64)
                })
                .collect();
            (class, pairs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Class-averaged AP per threshold.
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub mean_ap: f64,
    pub per_class: BTreeMap<u64, ApSummary>,
    pub count_mse: Option<f64>,
}

/// AP for every category present in `gts` or `dets`, evaluated in
/// parallel, plus counting MSE when `count` is set.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    similarity: &dyn Similarity,
    thresholds: &[f64],
    count: bool,
) -> Result<EvalResult> {
    let classes: BTreeSet<u64> = dets.iter().map(|d| d.category_id).chain(gts.iter().map(|g| g.category_id)).collect();
    if classes.is_empty() {
        return Err(MetricsError::Empty("detections and ground truth"));
    }
    let per_class: BTreeMap<u64, ApSummary> = classes
        .into_par_iter()
        .map(|c| {
            let d: Vec<Detection> = dets.iter().filter(|x| x.category_id == c).cloned().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|x| x.category_id == c).cloned().collect();
            average_precision(&d, &g, similarity, thresholds).map(|s| (c, s))
        })
        .collect::<Result<_>>()?;
    let n = per_class.len() as f64;
    let ap_per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, per_class.values().map(|s| s.ap_per_threshold[i].1).sum::<f64>() / n))
        .collect();
    let mean_ap = per_class.values().map(|s| s.mean_ap).sum::<f64>() / n;
    let count_mse = if count { Some(counting_mse(&count_pairs(dets, gts, COUNT_SCORE_THRESHOLD))?) } else { None };
    Ok(EvalResult { ap_per_threshold, mean_ap, per_class, count_mse })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Seen,
    Unseen,
}

/// One line of evaluation output. `class` is absent for class-averaged
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario: Scenario,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_records(out: &mut impl Write, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(input: impl BufRead) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Record { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}
