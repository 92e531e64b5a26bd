//! Central finite-difference checks for the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codecs::Anchor;
use crate::decoder::{self, DecoderConfig, DecoderParams, FeatureGrid, TrainBatch};
use crate::geometry::{Point2, PointSequence};
use crate::sapl::{self, SaplConfig};

/// Step used by every central difference in this crate.
pub const FD_STEP: f64 = 1e-6;
/// Pass threshold on the maximum relative error.
pub const MAX_REL_ERR: f64 = 1e-6;
/// Denominator floor for [`relative_error`]; components whose magnitude is
/// below this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Fourth-order central stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` for every coordinate.
pub fn central_differences_4(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |d: f64| {
                probe[i] = orig + d;
                f(&probe)
            };
            let g = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            probe[i] = orig;
            g
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Margins that keep random loss inputs away from non-differentiable points.
#[derive(Debug, Clone, Copy)]
pub struct KinkMargins {
    /// Minimum `|pred - gt|` per coordinate (L1 kink).
    pub coord: f64,
    /// Minimum `|sin(theta_pred/2) - sin(theta_gt/2)|` (absolute-value kink).
    pub half_sine: f64,
    /// Minimum `|sin(theta)|` for predicted angles (straight or folded vertex).
    pub straightness: f64,
}

impl Default for KinkMargins {
    fn default() -> Self {
        Self { coord: 1e-3, half_sine: 1e-4, straightness: 1e-3 }
    }
}

fn sine_of_angle(prev: Point2, center: Point2, next: Point2) -> f64 {
    let u = prev.sub(center);
    let v = next.sub(center);
    u.cross(v).abs() / (u.norm() * v.norm())
}

/// True if no coordinate or angle of the pair sits within the margins of a
/// kink for any hop up to `max_hops`.
pub fn clear_of_kinks(pred: &[Point2], gt: &[Point2], cyclic: bool, max_hops: usize, m: &KinkMargins) -> bool {
    let len = pred.len();
    if pred.iter().zip(gt).any(|(p, g)| (p.x - g.x).abs() < m.coord || (p.y - g.y).abs() < m.coord) {
        return false;
    }
    for n in 1..=max_hops {
        if 2 * n >= len {
            break;
        }
        let idx: Vec<usize> = if cyclic { (0..len).collect() } else { (n..len - n).collect() };
        for i in idx {
            let (a, b) = ((i + len - n) % len, (i + n) % len);
            let sp = sine_of_angle(pred[a], pred[i], pred[b]);
            if sp < m.straightness {
                return false;
            }
            let tp = crate::geometry::vertex_angle(pred[a], pred[i], pred[b], 0.0);
            let tg = crate::geometry::vertex_angle(gt[a], gt[i], gt[b], 0.0);
            if ((0.5 * tp).sin() - (0.5 * tg).sin()).abs() < m.half_sine {
                return false;
            }
        }
    }
    true
}

/// A star-shaped closed contour (cyclic) or a random walk (open), plus a
/// noisy copy, regenerated until it clears every kink margin.
pub fn random_pair(rng: &mut impl Rng, len: usize, cyclic: bool, max_hops: usize) -> (PointSequence, PointSequence) {
    let margins = KinkMargins::default();
    loop {
        let gt: Vec<Point2> = if cyclic {
            let (cx, cy) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            (0..len)
                .map(|i| {
                    let a = std::f64::consts::TAU * (i as f64 + rng.random_range(-0.3..0.3)) / len as f64;
                    let r = rng.random_range(10.0..30.0);
                    Point2::new(cx + r * a.cos(), cy + r * a.sin())
                })
                .collect()
        } else {
            let mut p = Point2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            (0..len)
                .map(|_| {
                    p = p.add(Point2::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)));
                    p
                })
                .collect()
        };
        let pred: Vec<Point2> = gt
            .iter()
            .map(|g| g.add(Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))))
            .collect();
        if clear_of_kinks(&pred, &gt, cyclic, max_hops, &margins) {
            return (PointSequence::new(pred, cyclic).unwrap(), PointSequence::new(gt, cyclic).unwrap());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// How the analytic side of a check is produced. `Perturbed` scales the
/// gradient slightly and exists to prove the check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    #[default]
    Analytic,
    Perturbed,
}

fn analytic_point_grad(pred: &PointSequence, gt: &PointSequence, cfg: &SaplConfig, mode: GradientMode) -> Vec<f64> {
    let mut g = sapl::point_loss(pred, gt, cfg).expect("valid loss inputs").flat_grad();
    if mode == GradientMode::Perturbed {
        g.iter_mut().for_each(|v| *v *= 1.0 + 1e-3);
    }
    g
}

/// Max relative gradient error of the point loss over `cases` random pairs.
pub fn check_point_loss(seed: u64, cases: usize, len: usize, cyclic: bool, hops: usize, mode: GradientMode) -> CheckLine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SaplConfig::with_hops(hops);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (pred, gt) = random_pair(&mut rng, len, cyclic, hops);
        let analytic = analytic_point_grad(&pred, &gt, &cfg, mode);
        let numeric = central_differences(&pred.to_flat(), FD_STEP, |x| {
            let p = PointSequence::from_flat(x, cyclic).unwrap();
            sapl::point_loss(&p, &gt, &cfg).unwrap().total
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    CheckLine {
        name: format!("point_loss {} K={len} N={hops}", if cyclic { "closed" } else { "open" }),
        cases,
        max_rel_err: worst,
        passed: worst < MAX_REL_ERR,
    }
}

/// The full structure-loss suite: 32-point closed and 8-point open pairs
/// for hops 1 through 4.
pub fn point_loss_suite(seed: u64, cases: usize, mode: GradientMode) -> Vec<CheckLine> {
    let mut out = Vec::new();
    for hops in 1..=4 {
        out.push(check_point_loss(seed.wrapping_add(hops as u64), cases, 32, true, hops, mode));
        out.push(check_point_loss(seed.wrapping_add(100 + hops as u64), cases, 8, false, hops, mode));
    }
    out
}

/// Step for the decoder check. A full network in double precision carries
/// roughly one ulp of loss noise per evaluation, so `h = 1e-6` cannot resolve
/// 1e-6 relative error; the fourth-order stencil at this step can.
pub const DECODER_FD_STEP: f64 = 1e-4;

/// Minimum pairwise distance between predicted points in the tiny problem.
pub const MIN_PRED_SEPARATION: f64 = 1e-2;
/// Minimum `|z|` at every ReLU input in the tiny problem.
pub const MIN_RELU_MARGIN: f64 = 1e-2;

/// Gain on the attention query/key maps and the head output in the tiny
/// problem; at plain init the four predictions nearly coincide.
const TINY_ATTN_GAIN: f64 = 3.0;
const TINY_HEAD_GAIN: f64 = 10.0;

fn sharpen(params: &mut DecoderParams) {
    for t in params.tensors_mut() {
        let gain = if t.name.ends_with("attn.wq") || t.name.ends_with("attn.wk") {
            TINY_ATTN_GAIN
        } else if t.name.starts_with("head.out") {
            TINY_HEAD_GAIN
        } else {
            continue;
        };
        t.data.iter_mut().for_each(|v| *v *= gain);
    }
}

fn well_separated(params: &DecoderParams, batch: &TrainBatch) -> bool {
    let Ok(pred) = decoder::predict(params, batch) else { return false };
    let pts = pred.points();
    let separated = (0..pts.len()).all(|i| (0..i).all(|j| pts[i].distance(pts[j]) >= MIN_PRED_SEPARATION));
    let smooth = decoder::relu_margin(params, batch).is_ok_and(|m| m >= MIN_RELU_MARGIN);
    separated && smooth && clear_of_kinks(pts, batch.gt_pts.points(), true, SaplConfig::default().n_hops, &KinkMargins::default())
}

/// Tiny decoder problem (`d=8, K=4, G=9, L=1`) with random features.
/// Parameter draws are repeated until the prediction is clear of collapsed
/// points, ReLU kinks, and loss kinks.
pub fn tiny_decoder_problem(seed: u64, residual: bool) -> (DecoderParams, TrainBatch) {
    let cfg = DecoderConfig { residual, ..DecoderConfig::tiny() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut grid = |h: usize, w: usize| {
        let values = ndarray::Array3::from_shape_fn((h, w, d), |_| rng.random_range(-1.0..1.0));
        FeatureGrid::new(values, 1.0).unwrap()
    };
    let support_grid = grid(6, 6);
    let query_grid = grid(8, 8);
    let support_pts = PointSequence::from_xy(&[(1.2, 1.1), (4.7, 1.4), (4.9, 4.6), (1.3, 4.8)], true).unwrap();
    let gt_pts = PointSequence::from_xy(&[(2.1, 2.3), (6.2, 1.8), (6.6, 6.1), (1.7, 5.9)], true).unwrap();
    let anchor = Anchor::new(4.0, 4.0, 5.0, 5.0).unwrap();
    let batch = TrainBatch { support_grid, support_pts, query_grid, anchor, gt_pts };
    for attempt in 0u64.. {
        let mut params = DecoderParams::init(cfg, (seed ^ 0xA5A5).wrapping_add(attempt << 32)).unwrap();
        sharpen(&mut params);
        if well_separated(&params, &batch) {
            return (params, batch);
        }
    }
    unreachable!()
}

/// Full-parameter gradient check of the decoder, head, and point loss.
pub fn check_decoder(seed: u64, residual: bool, mode: GradientMode) -> CheckLine {
    let (params, batch) = tiny_decoder_problem(seed, residual);
    let cfg = SaplConfig::default();
    let (_, grads) = decoder::loss_and_grad(&params, &batch, &cfg).expect("tiny problem is valid");
    let mut analytic = grads.to_flat();
    if mode == GradientMode::Perturbed {
        analytic.iter_mut().for_each(|v| *v *= 1.0 + 1e-3);
    }
    let mut probe = params.clone();
    let numeric = central_differences_4(&params.to_flat(), DECODER_FD_STEP, |x| {
        probe.set_flat(x).unwrap();
        decoder::batch_loss(&probe, &batch, &cfg).unwrap().total
    });
    let worst = max_relative_error(&analytic, &numeric);
    CheckLine {
        name: format!(
            "decoder d=8 K=4 G=9 L=1{} ({} params)",
            if residual { " residual" } else { "" },
            params.num_params()
        ),
        cases: 1,
        max_rel_err: worst,
        passed: worst < MAX_REL_ERR,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_differences_of_quadratic() {
        let g = central_differences(&[1.0, -2.0], 1e-4, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn fourth_order_stencil_of_quartic() {
        let g = central_differences_4(&[0.7], 1e-2, |x| x[0].powi(4));
        assert!((g[0] - 4.0 * 0.7f64.powi(3)).abs() < 1e-10);
    }

    #[test]
    fn tiny_problem_is_well_separated() {
        for seed in 0..3 {
            let (params, batch) = tiny_decoder_problem(seed, seed == 1);
            assert!(well_separated(&params, &batch));
        }
    }

    #[test]
    fn decoder_gradients_pass_with_and_without_skips() {
        for residual in [false, true] {
            let line = check_decoder(2, residual, GradientMode::Analytic);
            assert!(line.passed, "{line:?}");
        }
        assert!(!check_decoder(2, false, GradientMode::Perturbed).passed);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn perturbed_mode_fails() {
        let line = check_point_loss(3, 3, 16, true, 2, GradientMode::Perturbed);
        assert!(!line.passed, "{line:?}");
    }
}
