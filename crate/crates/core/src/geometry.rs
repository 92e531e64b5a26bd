//! Planar point and polygon primitives.
//!
//! Coordinates are image pixels: `+x` points right and `+y` points down.
//! Under that convention [`signed_area`] is positive for contours that run
//! clockwise on screen, and that is the orientation every canonical contour
//! uses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rays shorter than this (in pixels) make a hop angle degenerate.
pub const DEGENERACY_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point sequence is empty")]
    Empty,
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("flat coordinate buffer has odd length {0}")]
    OddFlatLength(usize),
    #[error("index {index} with hop {hop} is out of range for an open sequence of length {len}")]
    IndexOutOfRange { index: usize, hop: usize, len: usize },
    #[error("hop {hop} is invalid for a closed sequence of length {len}")]
    InvalidHop { hop: usize, len: usize },
    #[error("operation requires a closed contour")]
    NotCyclic,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("contour has zero perimeter")]
    ZeroPerimeter,
    #[error("polygon has zero area")]
    ZeroArea,
    #[error("polygon is self-intersecting (edges {0} and {1})")]
    SelfIntersecting(usize, usize),
    #[error("angle {0} outside [0, pi]")]
    AngleOutOfRange(f64),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point2) -> f64 {
        self.sub(o).norm()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl From<(f64, f64)> for Point2 {
    fn from(v: (f64, f64)) -> Self {
        Point2::new(v.0, v.1)
    }
}

/// Ordered points, optionally closed into a contour.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSequence {
    points: Vec<Point2>,
    cyclic: bool,
}

impl PointSequence {
    pub fn new(points: Vec<Point2>, cyclic: bool) -> Result<Self> {
        if points.is_empty() {
            return Err(GeometryError::Empty);
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self { points, cyclic })
    }

    pub fn closed(points: Vec<Point2>) -> Result<Self> {
        Self::new(points, true)
    }

    pub fn open(points: Vec<Point2>) -> Result<Self> {
        Self::new(points, false)
    }

    pub fn from_xy(xy: &[(f64, f64)], cyclic: bool) -> Result<Self> {
        Self::new(xy.iter().map(|&p| p.into()).collect(), cyclic)
    }

    /// Builds a sequence from `[x1, y1, x2, y2, ...]`.
    pub fn from_flat(flat: &[f64], cyclic: bool) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(GeometryError::OddFlatLength(flat.len()));
        }
        let pts = flat.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect();
        Self::new(pts, cyclic)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point2> {
        self.points
    }

    pub fn is_cyclic(&self) -> bool {
        self.cyclic
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_cyclic(mut self, cyclic: bool) -> Self {
        self.cyclic = cyclic;
        self
    }

    /// Applies `f` to every point. Fails if the result is non-finite.
    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Result<Self> {
        Self::new(self.points.iter().map(|&p| f(p)).collect(), self.cyclic)
    }

    /// Indices of the `n`-hop neighbours `(i - n, i + n)` of vertex `i`.
    pub fn hop_neighbors(&self, i: usize, n: usize) -> Result<(usize, usize)> {
        let len = self.points.len();
        if self.cyclic {
            if n == 0 || n >= len || len < 3 || i >= len {
                return Err(GeometryError::InvalidHop { hop: n, len });
            }
            Ok(((i + len - n) % len, (i + n) % len))
        } else {
            if n == 0 || i < n || i + n >= len {
                return Err(GeometryError::IndexOutOfRange { index: i, hop: n, len });
            }
            Ok((i - n, i + n))
        }
    }

    /// Sum of edge lengths, including the closing edge for contours.
    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        let open: f64 = self.points.windows(2).map(|w| w[0].distance(w[1])).sum();
        if self.cyclic && n > 1 {
            open + self.points[n - 1].distance(self.points[0])
        } else {
            open
        }
    }

    fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }
}

/// Unsigned angle in `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Angle(f64);

impl Angle {
    pub fn new(radians: f64) -> Result<Self> {
        if (0.0..=std::f64::consts::PI).contains(&radians) {
            Ok(Angle(radians))
        } else {
            Err(GeometryError::AngleOutOfRange(radians))
        }
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    /// `sin(theta / 2)`, the quantity the structure-aware loss supervises.
    pub fn half_sine(self) -> f64 {
        (self.0 * 0.5).sin()
    }
}

/// Angle at `center` between the rays towards `prev` and `next`.
///
/// Collapsed rays (shorter than `eps`) count as a straight angle.
pub(crate) fn vertex_angle(prev: Point2, center: Point2, next: Point2, eps: f64) -> f64 {
    let u = prev.sub(center);
    let v = next.sub(center);
    if u.norm() < eps || v.norm() < eps {
        return std::f64::consts::PI;
    }
    u.cross(v).abs().atan2(u.dot(v))
}

/// Unsigned angle at vertex `i` formed with its `n`-hop neighbours.
pub fn hop_angle(seq: &PointSequence, i: usize, n: usize) -> Result<Angle> {
    let (a, b) = seq.hop_neighbors(i, n)?;
    let p = seq.points();
    Ok(Angle(vertex_angle(p[a], p[i], p[b], DEGENERACY_EPS)))
}

/// Shoelace area, `0.5 * sum(x_i * y_{i+1} - x_{i+1} * y_i)`.
///
/// Positive for clockwise traversal in image coordinates (counter-clockwise
/// in the usual y-up frame). Sequences shorter than three points have zero
/// area.
pub fn signed_area(seq: &PointSequence) -> f64 {
    if seq.len() < 3 {
        return 0.0;
    }
    0.5 * seq.edges().map(|(a, b)| a.cross(b)).sum::<f64>()
}

fn coordinate_scale(points: &[Point2]) -> f64 {
    points
        .iter()
        .fold(1.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()))
}

fn require_contour(seq: &PointSequence) -> Result<()> {
    if !seq.is_cyclic() {
        return Err(GeometryError::NotCyclic);
    }
    if seq.len() < 3 {
        return Err(GeometryError::TooFewPoints { needed: 3, got: seq.len() });
    }
    Ok(())
}

fn has_area(seq: &PointSequence, area: f64) -> bool {
    let scale = coordinate_scale(seq.points());
    area.abs() > 16.0 * f64::EPSILON * scale * scale
}

/// Resamples a closed contour to `m` points equally spaced by arc length.
///
/// The first input vertex is the arc-length origin and traversal direction
/// is preserved.
pub fn resample_contour(seq: &PointSequence, m: usize) -> Result<PointSequence> {
    if !seq.is_cyclic() {
        return Err(GeometryError::NotCyclic);
    }
    if m < 3 {
        return Err(GeometryError::TooFewPoints { needed: 3, got: m });
    }
    let pts = seq.points();
    let n = pts.len();
    let lengths: Vec<f64> = seq.edges().map(|(a, b)| a.distance(b)).collect();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for l in &lengths {
        cum.push(cum.last().unwrap() + l);
    }
    let perimeter = cum[n];
    if !(perimeter > 0.0) {
        return Err(GeometryError::ZeroPerimeter);
    }

    let mut out = Vec::with_capacity(m);
    let mut edge = 0;
    for k in 0..m {
        let s = perimeter * k as f64 / m as f64;
        while edge + 1 < n && cum[edge + 1] <= s {
            edge += 1;
        }
        let a = pts[edge];
        let b = pts[(edge + 1) % n];
        let len = lengths[edge];
        let t = if len > 0.0 { ((s - cum[edge]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(a.add(b.sub(a).scale(t)));
    }
    PointSequence::new(out, true)
}

/// Index of the leftmost point, ties broken by smallest `y`.
pub fn leftmost_index(points: &[Point2]) -> usize {
    points
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Rotates a contour so its leftmost (then topmost) point comes first.
pub fn rotate_to_leftmost(seq: &PointSequence) -> PointSequence {
    let mut pts = seq.points().to_vec();
    let start = leftmost_index(&pts);
    pts.rotate_left(start);
    PointSequence { points: pts, cyclic: seq.is_cyclic() }
}

/// Puts a contour in canonical form: clockwise in image coordinates and
/// starting at its leftmost point.
pub fn canonicalize_contour(seq: &PointSequence) -> Result<PointSequence> {
    require_contour(seq)?;
    let area = signed_area(seq);
    if !has_area(seq, area) {
        return Err(GeometryError::ZeroArea);
    }
    let mut pts = seq.points().to_vec();
    if area < 0.0 {
        pts.reverse();
    }
    Ok(rotate_to_leftmost(&PointSequence { points: pts, cyclic: true }))
}

pub fn is_canonical(seq: &PointSequence) -> bool {
    seq.is_cyclic()
        && seq.len() >= 3
        && signed_area(seq) > 0.0
        && leftmost_index(seq.points()) == 0
}

/// Axis-aligned box given by its top-left corner and size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn max_x(&self) -> f64 {
        self.x + self.w
    }

    pub fn max_y(&self) -> f64 {
        self.y + self.h
    }

    /// The four corners, clockwise from the top-left.
    pub fn to_polygon(&self) -> Result<PointSequence> {
        PointSequence::closed(vec![
            Point2::new(self.x, self.y),
            Point2::new(self.max_x(), self.y),
            Point2::new(self.max_x(), self.max_y()),
            Point2::new(self.x, self.max_y()),
        ])
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

pub fn bbox_of(seq: &PointSequence) -> BBox {
    let pts = seq.points();
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.max_x().min(b.max_x()) - a.x.max(b.x)).max(0.0);
    let ih = (a.max_y().min(b.max_y()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn segments_intersect(p1: Point2, p2: Point2, q1: Point2, q2: Point2, eps: f64) -> bool {
    let d1 = p2.sub(p1);
    let d2 = q2.sub(q1);
    let o1 = d1.cross(q1.sub(p1));
    let o2 = d1.cross(q2.sub(p1));
    let o3 = d2.cross(p1.sub(q1));
    let o4 = d2.cross(p2.sub(q1));
    let tol1 = eps * d1.norm().max(1.0);
    let tol2 = eps * d2.norm().max(1.0);
    let s = |v: f64, tol: f64| if v > tol { 1 } else if v < -tol { -1 } else { 0 };
    let (s1, s2, s3, s4) = (s(o1, tol1), s(o2, tol1), s(o3, tol2), s(o4, tol2));
    if s1 * s2 < 0 && s3 * s4 < 0 {
        return true;
    }
    let on_segment = |a: Point2, b: Point2, p: Point2| {
        p.x >= a.x.min(b.x) - eps
            && p.x <= a.x.max(b.x) + eps
            && p.y >= a.y.min(b.y) - eps
            && p.y <= a.y.max(b.y) + eps
    };
    (s1 == 0 && on_segment(p1, p2, q1))
        || (s2 == 0 && on_segment(p1, p2, q2))
        || (s3 == 0 && on_segment(q1, q2, p1))
        || (s4 == 0 && on_segment(q1, q2, p2))
}

/// Rejects contours whose edges cross or touch anywhere except at shared
/// vertices of consecutive edges.
pub fn check_simple(seq: &PointSequence) -> Result<()> {
    require_contour(seq)?;
    let pts = seq.points();
    let n = pts.len();
    let eps = 1e-12 * coordinate_scale(pts);
    for i in 0..n {
        if pts[i].distance(pts[(i + 1) % n]) <= eps {
            return Err(GeometryError::SelfIntersecting(i, (i + 1) % n));
        }
    }
    for i in 0..n {
        let (a1, a2) = (pts[i], pts[(i + 1) % n]);
        for j in (i + 1)..n {
            let (b1, b2) = (pts[j], pts[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // consecutive edges may only share their common vertex; a
                // collinear fold-back is a degenerate spike
                let (shared, other_a, other_b) = if j == i + 1 { (a2, a1, b2) } else { (a1, a2, b1) };
                let u = other_a.sub(shared);
                let v = other_b.sub(shared);
                if u.cross(v).abs() <= eps * u.norm().max(1.0) * v.norm().max(1.0) && u.dot(v) > 0.0 {
                    return Err(GeometryError::SelfIntersecting(i, j));
                }
                continue;
            }
            if segments_intersect(a1, a2, b1, b2, eps) {
                return Err(GeometryError::SelfIntersecting(i, j));
            }
        }
    }
    Ok(())
}

fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let d = b.sub(a);
    let len2 = d.dot(d);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (p.sub(a).dot(d) / len2).clamp(0.0, 1.0);
    p.distance(a.add(d.scale(t)))
}

/// Even-odd point-in-polygon test. Boundary points are not handled here.
fn contains(poly: &[Point2], p: Point2) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Contribution to `∮ x dy`-style shoelace area of the part of `subject`'s
/// boundary that lies inside `clip`. Both polygons must be positively
/// oriented. Boundary pieces shared with `clip` are counted only when
/// `keep_shared` is set and both edges run in the same direction.
fn boundary_inside_area(subject: &[Point2], clip: &[Point2], keep_shared: bool, eps: f64) -> f64 {
    let n = subject.len();
    let m = clip.len();
    let mut total = 0.0;
    let mut ts: Vec<f64> = Vec::new();
    for i in 0..n {
        let p = subject[i];
        let q = subject[(i + 1) % n];
        let d = q.sub(p);
        let len2 = d.dot(d);
        if len2 == 0.0 {
            continue;
        }
        let len = len2.sqrt();
        ts.clear();
        ts.push(0.0);
        ts.push(1.0);
        for j in 0..m {
            let r = clip[j];
            let s = clip[(j + 1) % m];
            let e = s.sub(r);
            let denom = d.cross(e);
            let rp = r.sub(p);
            if denom.abs() > 1e-14 * len * e.norm() {
                let t = rp.cross(e) / denom;
                let u = rp.cross(d) / denom;
                let tol_t = eps / len;
                let tol_u = eps / e.norm().max(f64::MIN_POSITIVE);
                if t > -tol_t && t < 1.0 + tol_t && u > -tol_u && u < 1.0 + tol_u {
                    ts.push(t.clamp(0.0, 1.0));
                }
            } else {
                // parallel: split at the clip edge's endpoints if collinear
                for v in [r, s] {
                    if point_segment_distance(v, p, q) <= eps {
                        ts.push((v.sub(p).dot(d) / len2).clamp(0.0, 1.0));
                    }
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() * len <= eps);
        for w in ts.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            if (t1 - t0) * len <= eps {
                continue;
            }
            let a0 = p.add(d.scale(t0));
            let a1 = p.add(d.scale(t1));
            let mid = a0.add(a1).scale(0.5);
            let shared = (0..m).find(|&j| point_segment_distance(mid, clip[j], clip[(j + 1) % m]) <= eps);
            let include = match shared {
                Some(j) => keep_shared && clip[(j + 1) % m].sub(clip[j]).dot(d) > 0.0,
                None => contains(clip, mid),
            };
            if include {
                total += 0.5 * a0.cross(a1);
            }
        }
    }
    total
}

fn oriented_points(seq: &PointSequence) -> Vec<Point2> {
    let mut pts = seq.points().to_vec();
    if signed_area(seq) < 0.0 {
        pts.reverse();
    }
    pts
}

/// Area of the intersection of two simple polygons.
pub fn intersection_area(a: &PointSequence, b: &PointSequence) -> Result<f64> {
    for s in [a, b] {
        check_simple(s)?;
        if !has_area(s, signed_area(s)) {
            return Err(GeometryError::ZeroArea);
        }
    }
    let pa = oriented_points(a);
    let pb = oriented_points(b);
    let scale = coordinate_scale(&pa).max(coordinate_scale(&pb));
    let eps = 1e-10 * scale;
    let inter = boundary_inside_area(&pa, &pb, true, eps) + boundary_inside_area(&pb, &pa, false, eps);
    let max_inter = signed_area(a).abs().min(signed_area(b).abs());
    Ok(inter.clamp(0.0, max_inter))
}

/// Intersection over union of two simple polygons, computed exactly from
/// their boundaries.
pub fn polygon_iou(a: &PointSequence, b: &PointSequence) -> Result<f64> {
    let inter = intersection_area(a, b)?;
    let union = signed_area(a).abs() + signed_area(b).abs() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
