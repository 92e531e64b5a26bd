//! Conversions between native task annotations and canonical point sets,
//! plus the anchor-relative offset coding used by the point head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, GeometryError, Point2, PointSequence};

pub use crate::geometry::BBox;

pub const DEFAULT_BOX_POINTS: usize = 16;
pub const DEFAULT_MASK_POINTS: usize = 32;
pub const BOX_POINT_CHOICES: [usize; 3] = [4, 8, 16];
pub const MASK_POINT_CHOICES: [usize; 3] = [16, 32, 64];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("box point count {0} must be a positive multiple of 4")]
    BoxPointCount(usize),
    #[error("{task} does not accept {count} points")]
    PointCount { task: TaskKind, count: usize },
    #[error("empty keypoint list")]
    NoKeypoints,
    #[error("mask has no polygons")]
    EmptyMask,
    #[error("visibility mask has {mask} entries for {points} points")]
    VisibilityLength { mask: usize, points: usize },
    #[error("{task} point sets must have cyclic = {expected}")]
    Cyclicity { task: TaskKind, expected: bool },
    #[error("{0} point sets carry no visibility mask")]
    UnexpectedVisibility(TaskKind),
    #[error("anchor must have positive size, got w={w} h={h}")]
    InvalidAnchor { w: f64, h: f64 },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Detect,
    Segment,
    Pose,
    Count,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Detect, TaskKind::Segment, TaskKind::Pose, TaskKind::Count];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Detect => "detect",
            TaskKind::Segment => "segment",
            TaskKind::Pose => "pose",
            TaskKind::Count => "count",
        }
    }

    /// Detection and segmentation outputs are closed contours.
    pub fn is_cyclic(self) -> bool {
        matches!(self, TaskKind::Detect | TaskKind::Segment)
    }

    /// Whether `count` points is a legal output size for this task. Pose
    /// counts are set by the category and are only required to be non-zero.
    pub fn accepts_count(self, count: usize) -> bool {
        match self {
            TaskKind::Detect => BOX_POINT_CHOICES.contains(&count),
            TaskKind::Segment => MASK_POINT_CHOICES.contains(&count),
            TaskKind::Pose => count >= 1,
            TaskKind::Count => count == 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detect" => Ok(TaskKind::Detect),
            "segment" => Ok(TaskKind::Segment),
            "pose" => Ok(TaskKind::Pose),
            "count" => Ok(TaskKind::Count),
            other => Err(CodecError::UnknownTask(other.to_string())),
        }
    }
}

/// The task-independent output of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalPointSet {
    task: TaskKind,
    points: PointSequence,
    visibility: Option<Vec<bool>>,
}

impl CanonicalPointSet {
    pub fn new(task: TaskKind, points: PointSequence, visibility: Option<Vec<bool>>) -> Result<Self> {
        if !task.accepts_count(points.len()) {
            return Err(CodecError::PointCount { task, count: points.len() });
        }
        if points.is_cyclic() != task.is_cyclic() {
            return Err(CodecError::Cyclicity { task, expected: task.is_cyclic() });
        }
        match (&visibility, task) {
            (Some(v), TaskKind::Pose) if v.len() != points.len() => {
                return Err(CodecError::VisibilityLength { mask: v.len(), points: points.len() })
            }
            (Some(_), TaskKind::Pose) | (None, _) => {}
            (Some(_), _) => return Err(CodecError::UnexpectedVisibility(task)),
        }
        Ok(Self { task, points, visibility })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn points(&self) -> &PointSequence {
        &self.points
    }

    pub fn visibility(&self) -> Option<&[bool]> {
        self.visibility.as_deref()
    }

    /// Visibility with absent masks read as all-visible.
    pub fn visible(&self, i: usize) -> bool {
        self.visibility.as_ref().is_none_or(|v| v[i])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies the same point map to every point, keeping task and mask.
    pub fn map_points(&self, f: impl Fn(Point2) -> Point2) -> Result<Self> {
        Ok(Self { task: self.task, points: self.points.map(f)?, visibility: self.visibility.clone() })
    }
}

/// Line-oriented serialized form of a canonical point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub task: TaskKind,
    pub category_id: u64,
    pub points: Vec<Point2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Vec<bool>>,
}

impl PointRecord {
    pub fn from_point_set(category_id: u64, set: &CanonicalPointSet) -> Self {
        Self {
            task: set.task(),
            category_id,
            points: set.points().points().to_vec(),
            visibility: set.visibility().map(<[bool]>::to_vec),
        }
    }

    pub fn to_point_set(&self) -> Result<CanonicalPointSet> {
        let seq = PointSequence::new(self.points.clone(), self.task.is_cyclic())?;
        CanonicalPointSet::new(self.task, seq, self.visibility.clone())
    }
}

/// `m` points equally spaced along the box perimeter, clockwise in image
/// coordinates from the top-left corner.
pub fn encode_box(b: &BBox, m: usize) -> Result<CanonicalPointSet> {
    if m == 0 || m % 4 != 0 {
        return Err(CodecError::BoxPointCount(m));
    }
    if !b.is_valid() || !(b.w > 0.0 && b.h > 0.0) {
        return Err(CodecError::DegenerateBox(*b));
    }
    let (w, h) = (b.w, b.h);
    let perimeter = 2.0 * (w + h);
    let mut pts = Vec::with_capacity(m);
    for k in 0..m {
        let p = if k == 0 {
            Point2::new(b.x, b.y)
        } else if 2 * k == m {
            Point2::new(b.max_x(), b.max_y())
        } else {
            let s = perimeter * k as f64 / m as f64;
            if s < w {
                Point2::new(b.x + s, b.y)
            } else if s < w + h {
                Point2::new(b.max_x(), b.y + (s - w))
            } else if s < 2.0 * w + h {
                Point2::new(b.max_x() - (s - w - h), b.max_y())
            } else {
                Point2::new(b.x, b.max_y() - (s - 2.0 * w - h))
            }
        };
        pts.push(p);
    }
    CanonicalPointSet::new(TaskKind::Detect, PointSequence::closed(pts)?, None)
}

/// Tight axis-aligned bounds of any point set.
pub fn decode_box(pts: &CanonicalPointSet) -> BBox {
    geometry::bbox_of(pts.points())
}

/// Canonical `m`-point contour of a simple polygon: clockwise, equally
/// spaced by arc length, starting at its leftmost point.
pub fn encode_mask(poly: &PointSequence, m: usize) -> Result<CanonicalPointSet> {
    if !TaskKind::Segment.accepts_count(m) {
        return Err(CodecError::PointCount { task: TaskKind::Segment, count: m });
    }
    let poly = if poly.is_cyclic() { poly.clone() } else { poly.clone().with_cyclic(true) };
    let canonical = geometry::canonicalize_contour(&poly)?;
    let resampled = geometry::resample_contour(&canonical, m)?;
    let out = geometry::rotate_to_leftmost(&resampled);
    CanonicalPointSet::new(TaskKind::Segment, out, None)
}

/// The largest-area polygon of a multi-part mask, or `None` if empty.
pub fn largest_polygon(parts: &[PointSequence]) -> Option<&PointSequence> {
    parts
        .iter()
        .max_by(|a, b| geometry::signed_area(a).abs().total_cmp(&geometry::signed_area(b).abs()))
}

/// Counting target: the box midpoint.
pub fn encode_center(b: &BBox) -> Result<CanonicalPointSet> {
    let seq = PointSequence::open(vec![b.center()])?;
    CanonicalPointSet::new(TaskKind::Count, seq, None)
}

/// Keypoints in the category's semantic order, visibility preserved.
pub fn encode_pose(kpts: &[(f64, f64, bool)]) -> Result<CanonicalPointSet> {
    if kpts.is_empty() {
        return Err(CodecError::NoKeypoints);
    }
    let seq = PointSequence::open(kpts.iter().map(|&(x, y, _)| Point2::new(x, y)).collect())?;
    let vis = kpts.iter().map(|k| k.2).collect();
    CanonicalPointSet::new(TaskKind::Pose, seq, Some(vis))
}

pub fn decode_pose(set: &CanonicalPointSet) -> Vec<(f64, f64, bool)> {
    set.points()
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.x, p.y, set.visible(i)))
        .collect()
}

/// Proposal box in centre/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(CodecError::InvalidAnchor { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_bbox(b: &BBox) -> Result<Self> {
        let c = b.center();
        Self::new(c.x, c.y, b.w, b.h)
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn to_bbox(&self) -> BBox {
        BBox::new(self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub dx: f64,
    pub dy: f64,
}

/// Point offsets in anchor-normalised units.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OffsetSet(pub Vec<Offset>);

impl OffsetSet {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        OffsetSet(pairs.iter().map(|&(dx, dy)| Offset { dx, dy }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Points from offsets: `P = A_c + delta * A_size` per axis.
pub fn anchor_decode(off: &OffsetSet, a: &Anchor, cyclic: bool) -> Result<PointSequence> {
    let pts = off
        .0
        .iter()
        .map(|o| Point2::new(a.cx + o.dx * a.w, a.cy + o.dy * a.h))
        .collect();
    Ok(PointSequence::new(pts, cyclic)?)
}

/// Inverse of [`anchor_decode`]; builds regression targets.
pub fn anchor_encode(pts: &PointSequence, a: &Anchor) -> OffsetSet {
    OffsetSet(
        pts.points()
            .iter()
            .map(|p| Offset { dx: (p.x - a.cx) / a.w, dy: (p.y - a.cy) / a.h })
            .collect(),
    )
}
