//! Synthetic shapes dataset with boxes, contours, keypoints and centres,
//! so the whole pipeline runs without external data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{CategoryInfo, Dataset, DatasetFile, ImageInfo, RawAnnotation};
use crate::geometry::{self, Point2, PointSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub max_instances: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { images: 24, width: 64, height: 64, max_instances: 3 }
    }
}

/// `(id, name, corners, star)`; keypoints are the outer corners.
const SHAPES: [(u64, &str, usize, bool); 5] = [
    (1, "square", 4, false),
    (2, "triangle", 3, false),
    (3, "pentagon", 5, false),
    (4, "star", 5, true),
    (5, "hexagon", 6, false),
];

fn categories() -> Vec<CategoryInfo> {
    SHAPES
        .iter()
        .map(|&(id, name, corners, _)| CategoryInfo {
            id,
            name: name.into(),
            keypoint_names: Some((0..corners).map(|i| format!("corner{i}")).collect()),
            symmetry_pairs: None,
        })
        .collect()
}

/// Clockwise polygon (image coordinates) and its outer corners.
fn shape(corners: usize, star: bool, center: Point2, radius: f64, rotation: f64) -> (Vec<Point2>, Vec<Point2>) {
    let n = if star { 2 * corners } else { corners };
    let poly: Vec<Point2> = (0..n)
        .map(|i| {
            let r = if star && i % 2 == 1 { 0.45 * radius } else { radius };
            let a = rotation + std::f64::consts::TAU * i as f64 / n as f64;
            Point2::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect();
    let outer = if star { poly.iter().step_by(2).copied().collect() } else { poly.clone() };
    (poly, outer)
}

/// Every image holds 1 to `max_instances` shapes; classes cycle so each
/// class gets a similar instance count.
pub fn toy_dataset(cfg: &ToyConfig, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut images = Vec::with_capacity(cfg.images);
    let mut annotations = Vec::new();
    let mut next_class = 0usize;
    for i in 0..cfg.images {
        let image_id = i as u64 + 1;
        images.push(ImageInfo { id: image_id, width: cfg.width, height: cfg.height, file_name: None });
        for _ in 0..rng.random_range(1..=cfg.max_instances) {
            let (category_id, _, corners, star) = SHAPES[next_class % SHAPES.len()];
            next_class += 1;
            let radius = rng.random_range(5.0..w.min(h) / 5.0);
            let center = Point2::new(rng.random_range(radius + 1.0..w - radius - 1.0), rng.random_range(radius + 1.0..h - radius - 1.0));
            let (poly, outer) = shape(corners, star, center, radius, rng.random_range(0.0..std::f64::consts::TAU));
            let seq = PointSequence::closed(poly).expect("finite shape");
            let b = geometry::bbox_of(&seq);
            let keypoints = outer
                .iter()
                .flat_map(|p| match rng.random_range(0..10) {
                    0 => [0.0, 0.0, 0.0],
                    1 => [p.x, p.y, 1.0],
                    _ => [p.x, p.y, 2.0],
                })
                .collect();
            annotations.push(RawAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id,
                bbox: [b.x, b.y, b.w, b.h],
                segmentation: Some(vec![seq.to_flat()]),
                keypoints: Some(keypoints),
                area: Some(geometry::signed_area(&seq).abs()),
            });
        }
    }
    Dataset::from_file(DatasetFile { images, annotations, categories: categories() }).expect("toy dataset is valid")
}
