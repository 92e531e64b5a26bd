//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::TAU;

use pointperc::codecs::{self, CanonicalPointSet};
use pointperc::geometry::{BBox, Point2, PointSequence};
use pointperc::metrics::{Detection, GroundTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Star-shaped simple polygon: stratified angles with every gap below pi,
/// radii in `[0.4, 1] * radius`. Orientation and start vertex are random.
pub fn random_simple_polygon(rng: &mut impl Rng, n: usize, center: Point2, radius: f64) -> PointSequence {
    let n = n.max(3);
    let phase = rng.random_range(0.0..TAU);
    let angles: Vec<f64> = (0..n).map(|i| phase + TAU * (i as f64 + rng.random_range(0.0..0.4)) / n as f64).collect();
    let mut pts: Vec<Point2> = angles
        .iter()
        .map(|&a| {
            let r = radius * rng.random_range(0.4..1.0);
            Point2::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect();
    if rng.random_bool(0.5) {
        pts.reverse();
    }
    let shift = rng.random_range(0..pts.len());
    pts.rotate_left(shift);
    PointSequence::closed(pts).unwrap()
}

/// Densely sampled smooth closed curve `r(t) = R (1 + sum a_k sin(k t + p_k))`
/// with small low-order harmonics, so curvature stays bounded.
pub fn smooth_polygon(rng: &mut impl Rng, vertices: usize, center: Point2, radius: f64) -> PointSequence {
    let harmonics: Vec<(f64, f64, f64)> =
        (2..=4).map(|k| (k as f64, rng.random_range(0.0..0.06), rng.random_range(0.0..TAU))).collect();
    let pts = (0..vertices)
        .map(|i| {
            let t = TAU * i as f64 / vertices as f64;
            let r = radius * (1.0 + harmonics.iter().map(|(k, a, p)| a * (k * t + p).sin()).sum::<f64>());
            Point2::new(center.x + r * t.cos(), center.y + r * t.sin())
        })
        .collect();
    PointSequence::closed(pts).unwrap()
}

pub fn regular_polygon(n: usize, center: Point2, radius: f64, phase: f64) -> PointSequence {
    let pts = (0..n)
        .map(|i| {
            let t = phase + TAU * i as f64 / n as f64;
            Point2::new(center.x + radius * t.cos(), center.y + radius * t.sin())
        })
        .collect();
    PointSequence::closed(pts).unwrap()
}

/// Angle at `b` measured after moving `b` to the origin and rotating so
/// that the ray to `a` lies on the positive x axis.
pub fn canonical_frame_angle(a: Point2, b: Point2, c: Point2) -> f64 {
    let (ux, uy) = (a.x - b.x, a.y - b.y);
    let (vx, vy) = (c.x - b.x, c.y - b.y);
    let phi = uy.atan2(ux);
    let (s, co) = phi.sin_cos();
    // rotate v by -phi
    let rx = co * vx + s * vy;
    let ry = -s * vx + co * vy;
    ry.atan2(rx).abs()
}

/// x coordinates where the horizontal line at `y` crosses the boundary.
fn crossings(poly: &[Point2], y: f64) -> Vec<f64> {
    let n = poly.len();
    let mut xs = Vec::new();
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        if (p.y <= y) != (q.y <= y) {
            xs.push(p.x + (y - p.y) / (q.y - p.y) * (q.x - p.x));
        }
    }
    xs.sort_by(f64::total_cmp);
    xs
}

fn inside_runs(poly: &[Point2], y: f64, x0: f64, cell: f64, res: usize) -> Vec<bool> {
    let mut row = vec![false; res];
    for pair in crossings(poly, y).chunks(2) {
        if let [lo, hi] = *pair {
            let first = ((lo - x0) / cell - 0.5).ceil().max(0.0) as usize;
            let last = ((hi - x0) / cell - 0.5).floor();
            if last < 0.0 {
                continue;
            }
            for cell_in in row.iter_mut().take((last as usize + 1).min(res)).skip(first) {
                *cell_in = true;
            }
        }
    }
    row
}

/// IoU by even-odd scanline fill of pixel centres on a `res x res` grid
/// over the joint bounding box.
pub fn raster_iou(a: &PointSequence, b: &PointSequence, res: usize) -> f64 {
    let all: Vec<Point2> = a.points().iter().chain(b.points()).copied().collect();
    let x0 = all.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let y0 = all.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let x1 = all.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let y1 = all.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let cell = (x1 - x0).max(y1 - y0) / res as f64;
    let (mut inter, mut union) = (0u64, 0u64);
    for j in 0..res {
        let y = y0 + (j as f64 + 0.5) * cell;
        let ra = inside_runs(a.points(), y, x0, cell, res);
        let rb = inside_runs(b.points(), y, x0, cell, res);
        for (p, q) in ra.iter().zip(&rb) {
            inter += (*p && *q) as u64;
            union += (*p || *q) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Raster area in the polygon's own units.
pub fn raster_area(a: &PointSequence, res: usize) -> f64 {
    let x0 = a.points().iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let y0 = a.points().iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let x1 = a.points().iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let y1 = a.points().iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let cell = (x1 - x0).max(y1 - y0) / res as f64;
    let mut count = 0u64;
    for j in 0..res {
        let y = y0 + (j as f64 + 0.5) * cell;
        count += inside_runs(a.points(), y, x0, cell, res).iter().filter(|&&v| v).count() as u64;
    }
    count as f64 * cell * cell
}

/// Arc-length position of each point of `samples` along the closed polygon
/// `source`, walking forward from the first vertex.
pub fn arc_positions(source: &PointSequence, samples: &PointSequence) -> Vec<f64> {
    let p = source.points();
    let n = p.len();
    let mut out = Vec::with_capacity(samples.len());
    let mut edge = 0usize;
    let mut start = 0.0;
    for q in samples.points() {
        loop {
            let (a, b) = (p[edge % n], p[(edge + 1) % n]);
            let len = a.distance(b);
            let t = if len > 0.0 { (q.sub(a)).dot(b.sub(a)) / (len * len) } else { 0.0 };
            let foot = a.add(b.sub(a).scale(t.clamp(0.0, 1.0)));
            if (-1e-9..=1.0 + 1e-9).contains(&t) && foot.distance(*q) < 1e-7 {
                out.push(start + t.clamp(0.0, 1.0) * len);
                break;
            }
            start += len;
            edge += 1;
            assert!(edge <= n, "sample {q:?} not on the source boundary");
        }
    }
    out
}

pub fn box_set(x: f64, y: f64, w: f64, h: f64) -> CanonicalPointSet {
    codecs::encode_box(&BBox::new(x, y, w, h), 16).unwrap()
}

/// AP by exhaustive definition: detections ranked by descending score with
/// ties in input order, each matched to the most similar unmatched GT in
/// its image at or above the threshold, precision at each of 101 recall
/// levels taken as the best precision at any rank reaching that recall.
pub fn brute_force_ap(sim: &[Vec<f64>], det_meta: &[(u64, f64)], gt_images: &[u64], thresholds: &[f64]) -> f64 {
    let n = det_meta.len();
    let mut rank: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if used[i] {
                continue;
            }
            if best.is_none_or(|b| det_meta[i].1 > det_meta[b].1) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        rank.push(b);
    }
    let mut total = 0.0;
    for &t in thresholds {
        let mut taken = vec![false; gt_images.len()];
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        let mut hits = 0usize;
        for (pos, &d) in rank.iter().enumerate() {
            let mut choice: Option<usize> = None;
            for g in 0..gt_images.len() {
                if taken[g] || gt_images[g] != det_meta[d].0 || sim[d][g] < t {
                    continue;
                }
                if choice.is_none_or(|c| sim[d][g] > sim[d][c]) {
                    choice = Some(g);
                }
            }
            if let Some(g) = choice {
                taken[g] = true;
                hits += 1;
            }
            precision.push(hits as f64 / (pos + 1) as f64);
            recall.push(if gt_images.is_empty() { 0.0 } else { hits as f64 / gt_images.len() as f64 });
        }
        let ap = if gt_images.is_empty() {
            0.0
        } else {
            let mut s = 0.0;
            for k in 0..101 {
                let r = k as f64 / 100.0;
                let mut best: f64 = 0.0;
                for j in 0..precision.len() {
                    if recall[j] >= r {
                        best = best.max(precision[j]);
                    }
                }
                s += best;
            }
            s / 101.0
        };
        total += ap;
    }
    total / thresholds.len() as f64
}

/// Random small detection problem over two images with box point sets.
pub fn random_ap_case(rng: &mut impl Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let n_gt = rng.random_range(0..=5);
    let n_det = rng.random_range(0..=10);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            let (w, h) = (rng.random_range(5.0..20.0), rng.random_range(5.0..20.0));
            GroundTruth { category_id: 1, image_id: rng.random_range(1..=2), points: box_set(x, y, w, h), area: w * h }
        })
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            let (image_id, points) = match gts.get(rng.random_range(0..gts.len().max(1) * 2)) {
                // jitter a GT so IoUs spread over the threshold range
                Some(g) => {
                    let b = codecs::decode_box(&g.points);
                    let mut j = || rng.random_range(-3.0..3.0);
                    let (dx, dy, dw, dh) = (j(), j(), j(), j());
                    (g.image_id, box_set(b.x + dx, b.y + dy, (b.w + dw).max(1.0), (b.h + dh).max(1.0)))
                }
                None => (rng.random_range(1..=2), box_set(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), 10.0, 10.0)),
            };
            // coarse scores so ties occur
            let score = rng.random_range(1..=5) as f64 / 5.0;
            Detection::new(1, image_id, score, points).unwrap()
        })
        .collect();
    (dets, gts)
}
