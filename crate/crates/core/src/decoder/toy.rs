//! Synthetic single-episode data for desk-scale training runs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecoderConfig, DecoderParams, FeatureGrid, Result, TrainBatch};
use crate::sapl::SaplConfig;
use crate::codecs::{self, Anchor};
use crate::geometry::{self, Point2, PointSequence};

/// Projection seed shared by support and query features (one extractor).
pub const FEATURE_SEED: u64 = 0x5EED;

pub const TOY_SEED: u64 = 1;
pub const TOY_POINTS: usize = 16;
pub const TOY_STEPS: usize = 200;
pub const TOY_LR: f64 = 3e-4;

/// Star polygon with `spikes` outer vertices, clockwise in image coordinates.
pub fn star_polygon(center: Point2, outer: f64, inner: f64, spikes: usize, rotation: f64) -> PointSequence {
    let n = 2 * spikes;
    let pts = (0..n)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let a = rotation + std::f64::consts::TAU * i as f64 / n as f64;
            Point2::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect();
    PointSequence::closed(pts).expect("finite star")
}

/// Binary image with ones at pixel centres inside the polygon.
pub fn rasterize(poly: &PointSequence, height: usize, width: usize) -> Array2<f64> {
    let pts = poly.points();
    let n = pts.len();
    let mut img = Array2::zeros((height, width));
    let mut xs = Vec::new();
    for r in 0..height {
        let y = r as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            if (a.y > y) != (b.y > y) {
                xs.push(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            for c in 0..width {
                let x = c as f64 + 0.5;
                if x >= span[0] && x < span[1] {
                    img[[r, c]] = 1.0;
                }
            }
        }
    }
    img
}

/// A support crop and a query scene holding two jittered instances of the
/// same star class; ground truth is the query instance's contour.
pub fn toy_batch(config: &DecoderConfig, points: usize, seed: u64) -> Result<TrainBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spikes = 5;
    let support_poly = star_polygon(
        Point2::new(12.0, 12.0),
        rng.random_range(7.5..9.0),
        rng.random_range(3.5..4.5),
        spikes,
        rng.random_range(-0.2..0.2),
    );
    let query_poly = star_polygon(
        Point2::new(16.0 + rng.random_range(-3.0..3.0), 16.0 + rng.random_range(-3.0..3.0)),
        rng.random_range(9.0..11.0),
        rng.random_range(4.0..5.5),
        spikes,
        rng.random_range(-0.2..0.2),
    );
    let support_grid = FeatureGrid::from_image(&rasterize(&support_poly, 24, 24), config.d_model, FEATURE_SEED)?;
    let query_grid = FeatureGrid::from_image(&rasterize(&query_poly, 32, 32), config.d_model, FEATURE_SEED)?;
    let support_pts = codecs::encode_mask(&support_poly, points)?.points().clone();
    let gt_pts = codecs::encode_mask(&query_poly, points)?.points().clone();
    let b = geometry::bbox_of(&query_poly);
    let anchor = Anchor::new(
        b.center().x + rng.random_range(-1.0..1.0),
        b.center().y + rng.random_range(-1.0..1.0),
        b.w * 1.1,
        b.h * 1.1,
    )?;
    Ok(TrainBatch { support_grid, support_pts, query_grid, anchor, gt_pts })
}

/// Runs `steps` SGD updates in place. The returned curve holds the total
/// loss before each step followed by the final loss.
pub fn train(params: &mut DecoderParams, batch: &TrainBatch, cfg: &SaplConfig, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        curve.push(super::train_step(params, batch, cfg, lr)?.total);
    }
    curve.push(super::batch_loss(params, batch, cfg)?.total);
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasterized_area_tracks_polygon_area() {
        let star = star_polygon(Point2::new(16.0, 16.0), 10.0, 5.0, 5, 0.1);
        let img = rasterize(&star, 32, 32);
        let area = geometry::signed_area(&star).abs();
        assert!((img.sum() - area).abs() / area < 0.05);
        assert!(geometry::signed_area(&star) > 0.0);
    }

    #[test]
    fn batch_is_deterministic_and_consistent() {
        let cfg = DecoderConfig::default();
        let a = toy_batch(&cfg, 16, 9).unwrap();
        assert_eq!(a, toy_batch(&cfg, 16, 9).unwrap());
        assert_eq!(a.support_pts.len(), 16);
        assert_eq!(a.gt_pts.len(), 16);
        assert_eq!(a.query_grid.channels(), cfg.d_model);
    }
}
