//! Direct point-fitting demos: plain L1 against L1 plus the structure
//! term, and the L1-diamond ambiguity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codecs;
use crate::decoder::toy::star_polygon;
use crate::geometry::{BBox, Point2, PointSequence};
use crate::sapl::{self, LossError, SaplConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoShape {
    Square,
    Star,
    DiamondAmbiguity,
}

impl FromStr for DemoShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "square" => Ok(Self::Square),
            "star" => Ok(Self::Star),
            "diamond-ambiguity" => Ok(Self::DiamondAmbiguity),
            other => Err(format!("unknown shape `{other}` (expected square, star or diamond-ambiguity)")),
        }
    }
}

impl fmt::Display for DemoShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Square => "square",
            Self::Star => "star",
            Self::DiamondAmbiguity => "diamond-ambiguity",
        })
    }
}

pub const FIT_NOISE: f64 = 3.0;
pub const DEFAULT_FIT_STEPS: usize = 150;
pub const DEFAULT_FIT_LR: f64 = 0.5;

/// 16-point square contour of side 20.
pub fn square_target() -> PointSequence {
    codecs::encode_box(&BBox::new(10.0, 10.0, 20.0, 20.0), 16).expect("valid box").points().clone()
}

/// 32-point canonical contour of a five-pointed star.
pub fn star_target() -> PointSequence {
    let star = star_polygon(Point2::new(30.0, 30.0), 20.0, 9.0, 5, 0.3);
    codecs::encode_mask(&star, 32).expect("simple star").points().clone()
}

/// The target with every coordinate displaced uniformly in `±amplitude`.
pub fn noisy_copy(target: &PointSequence, amplitude: f64, seed: u64) -> PointSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = target
        .points()
        .iter()
        .map(|p| p.add(Point2::new(rng.random_range(-amplitude..amplitude), rng.random_range(-amplitude..amplitude))))
        .collect();
    PointSequence::new(pts, target.is_cyclic()).expect("finite points")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitArm {
    pub name: String,
    pub trace: Vec<f64>,
    pub final_points: Vec<Point2>,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub shape: DemoShape,
    pub hops: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub target: Vec<Point2>,
    pub init: Vec<Point2>,
    pub arms: Vec<FitArm>,
}

/// Fits the same noisy start under L1 only and under L1 plus the structure
/// term with `hops`.
pub fn fit_demo(shape: DemoShape, target: &PointSequence, hops: usize, steps: usize, lr: f64, seed: u64) -> Result<FitReport, LossError> {
    let init = noisy_copy(target, FIT_NOISE, seed);
    let mut arms = Vec::with_capacity(2);
    for (name, cfg) in [("l1", SaplConfig::l1_only()), ("l1+sapl", SaplConfig::with_hops(hops))] {
        let fit = sapl::fit_points(&init, target, &cfg, steps, lr)?;
        arms.push(FitArm {
            name: name.into(),
            mean_error: sapl::mean_point_error(&fit.points, target),
            final_points: fit.points.points().to_vec(),
            trace: fit.trace,
        });
    }
    Ok(FitReport {
        shape,
        hops,
        steps,
        lr,
        seed,
        target: target.points().to_vec(),
        init: init.points().to_vec(),
        arms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiamondCandidate {
    /// Displacement of the perturbed point from its target.
    pub offset: Point2,
    pub points: Vec<Point2>,
    pub l1_term: f64,
    pub sapl_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiamondReport {
    pub hops: usize,
    pub radius: f64,
    pub target: Vec<Point2>,
    pub target_total: f64,
    pub candidates: Vec<DiamondCandidate>,
}

/// One point of a square contour moved to two places on its L1 diamond of
/// `radius`: straight out along the edge normal, and diagonally. Both give
/// the same L1 term.
pub fn diamond_ambiguity(hops: usize, radius: f64) -> Result<DiamondReport, LossError> {
    let target = square_target();
    let cfg = SaplConfig::with_hops(hops);
    // point 2 sits mid-way along the top edge; the outward normal is -y
    let moved = 2;
    let offsets = [Point2::new(0.0, -radius), Point2::new(0.5 * radius, -0.5 * radius)];
    let mut candidates = Vec::with_capacity(offsets.len());
    for offset in offsets {
        let mut pts = target.points().to_vec();
        pts[moved] = pts[moved].add(offset);
        let seq = PointSequence::closed(pts).expect("finite points");
        let loss = sapl::point_loss(&seq, &target, &cfg)?;
        candidates.push(DiamondCandidate {
            offset,
            points: seq.points().to_vec(),
            l1_term: loss.l1_term,
            sapl_term: loss.sapl_term,
            total: loss.total,
        });
    }
    let target_total = sapl::point_loss(&target, &target, &cfg)?.total;
    Ok(DiamondReport { hops, radius, target: target.points().to_vec(), target_total, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_names_round_trip() {
        for s in [DemoShape::Square, DemoShape::Star, DemoShape::DiamondAmbiguity] {
            assert_eq!(s.to_string().parse::<DemoShape>().unwrap(), s);
        }
        assert!("circle".parse::<DemoShape>().is_err());
    }

    #[test]
    fn diamond_candidates_tie_on_l1_only() {
        for hops in 1..=4 {
            let r = diamond_ambiguity(hops, 2.0).unwrap();
            let (a, b) = (&r.candidates[0], &r.candidates[1]);
            assert!((a.l1_term - b.l1_term).abs() < 1e-12);
            assert!((a.total - b.total).abs() > 1e-6, "hops {hops}");
            assert_eq!(r.target_total, 0.0);
        }
    }

    #[test]
    fn zero_steps_returns_the_start() {
        let target = square_target();
        let r = fit_demo(DemoShape::Square, &target, 2, 0, 1.0, 4).unwrap();
        for arm in &r.arms {
            assert_eq!(arm.final_points, r.init);
            assert_eq!(arm.trace.len(), 1);
        }
        assert_eq!(r.shape, DemoShape::Square);
    }

    #[test]
    fn star_fit_with_structure_term_is_no_worse() {
        let r = fit_demo(DemoShape::Star, &star_target(), 2, DEFAULT_FIT_STEPS, DEFAULT_FIT_LR, 1).unwrap();
        assert!(r.arms[1].mean_error <= r.arms[0].mean_error, "{} vs {}", r.arms[1].mean_error, r.arms[0].mean_error);
    }
}
