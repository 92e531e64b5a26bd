//! Entry points over flat `[x1, y1, x2, y2, ...]` buffers for foreign
//! callers. Everything delegates to the point-set API; nothing numeric
//! lives here.

use thiserror::Error;

use crate::codecs::{self, CodecError, TaskKind};
use crate::geometry::{BBox, GeometryError, PointSequence};
use crate::metrics::{self, ApSummary, BoxIou, Detection, GroundTruth, MetricsError};
use crate::sapl::{self, LossError, SaplConfig};

pub const ABI_VERSION: u32 = 1;

pub fn abi_version() -> u32 {
    ABI_VERSION
}

#[derive(Debug, Error)]
pub enum FlatError {
    #[error("buffer of length {0} is not a whole number of points")]
    OddLength(usize),
    #[error("prediction has {pred} values, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("{what}: expected {expected} values, got {got}")]
    Malformed { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, FlatError>;

fn sequence(flat: &[f64], cyclic: bool) -> Result<PointSequence> {
    if flat.len() % 2 != 0 {
        return Err(FlatError::OddLength(flat.len()));
    }
    Ok(PointSequence::from_flat(flat, cyclic)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatLoss {
    pub total: f64,
    pub l1: f64,
    pub sapl: f64,
    /// Gradient of `total`, laid out like the input.
    pub grad: Vec<f64>,
}

pub fn point_loss(pred: &[f64], gt: &[f64], n_hops: usize, cyclic: bool) -> Result<FlatLoss> {
    if pred.len() != gt.len() {
        return Err(FlatError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let l = sapl::point_loss(&sequence(pred, cyclic)?, &sequence(gt, cyclic)?, &SaplConfig::with_hops(n_hops))?;
    Ok(FlatLoss { total: l.total, l1: l.l1_term, sapl: l.sapl_term, grad: l.flat_grad() })
}

pub fn encode_mask(poly: &[f64], m: usize) -> Result<Vec<f64>> {
    Ok(codecs::encode_mask(&sequence(poly, true)?, m)?.points().to_flat())
}

/// OKS between two keypoint buffers; `visible` flags the ground truth.
pub fn oks(pred: &[f64], gt: &[f64], visible: &[bool], eval_mask: &[bool], area: f64, kappa: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(FlatError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let pose = |flat: &[f64], vis: Option<&[bool]>| -> Result<codecs::CanonicalPointSet> {
        let seq = sequence(flat, false)?;
        let vis = vis.map_or_else(|| vec![true; seq.len()], <[bool]>::to_vec);
        Ok(codecs::CanonicalPointSet::new(TaskKind::Pose, seq, Some(vis))?)
    };
    Ok(metrics::oks(&pose(pred, None)?, &pose(gt, Some(visible))?, eval_mask, area, kappa)?)
}

fn boxes(flat: &[f64], what: &'static str, n: usize) -> Result<Vec<BBox>> {
    if flat.len() != 4 * n {
        return Err(FlatError::Malformed { what, expected: 4 * n, got: flat.len() });
    }
    Ok(flat.chunks_exact(4).map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect())
}

/// Box AP of one category. Boxes are `[x, y, w, h]` rows.
pub fn box_ap(
    det_boxes: &[f64],
    det_scores: &[f64],
    det_images: &[u64],
    gt_boxes: &[f64],
    gt_images: &[u64],
    thresholds: &[f64],
) -> Result<ApSummary> {
    if det_scores.len() != det_images.len() {
        return Err(FlatError::Malformed { what: "detection image ids", expected: det_scores.len(), got: det_images.len() });
    }
    let mut dets = Vec::with_capacity(det_scores.len());
    for ((b, &score), &image) in boxes(det_boxes, "detection boxes", det_scores.len())?.iter().zip(det_scores).zip(det_images) {
        dets.push(Detection::new(1, image, score, codecs::encode_box(b, codecs::DEFAULT_BOX_POINTS)?)?);
    }
    let mut gts = Vec::with_capacity(gt_images.len());
    for (b, &image) in boxes(gt_boxes, "ground-truth boxes", gt_images.len())?.iter().zip(gt_images) {
        gts.push(GroundTruth { category_id: 1, image_id: image, points: codecs::encode_box(b, codecs::DEFAULT_BOX_POINTS)?, area: b.area() });
    }
    Ok(metrics::average_precision(&dets, &gts, &BoxIou, thresholds)?)
}
