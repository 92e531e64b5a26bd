//! Structure-aware point loss.
//!
//! Besides per-point L1, predicted and ground-truth sequences are compared
//! through `sin(theta / 2)` of every `n`-hop vertex angle, for hops
//! `1..=N`. Gradients are derived by hand and checked against finite
//! differences in [`crate::gradcheck`].

use thiserror::Error;

use crate::geometry::{self, Point2, PointSequence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction has {pred} points but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("prediction and ground truth disagree on cyclicity")]
    CyclicMismatch,
    #[error("closed sequences need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("hop count must be at least 1")]
    ZeroHops,
    #[error("non-finite {term} term")]
    NonFinite { term: &'static str },
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaplConfig {
    /// Largest hop `N`; hops `1..=N` are averaged.
    pub n_hops: usize,
    /// Overrides the sequences' own cyclic flag when set.
    pub cyclic: Option<bool>,
    pub degeneracy_eps: f64,
    /// With `false` the loss reduces to plain L1.
    pub enabled: bool,
}

impl Default for SaplConfig {
    fn default() -> Self {
        Self { n_hops: 2, cyclic: None, degeneracy_eps: geometry::DEGENERACY_EPS, enabled: true }
    }
}

impl SaplConfig {
    pub fn with_hops(n_hops: usize) -> Self {
        Self { n_hops, ..Self::default() }
    }

    pub fn l1_only() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l1_term: f64,
    pub sapl_term: f64,
    pub total: f64,
    /// `(d total / dx, d total / dy)` for every predicted point.
    pub per_point_grad: Vec<Point2>,
}

impl LossBreakdown {
    pub fn flat_grad(&self) -> Vec<f64> {
        self.per_point_grad.iter().flat_map(|g| [g.x, g.y]).collect()
    }
}

fn validate(pred: &PointSequence, gt: &PointSequence, cfg: &SaplConfig) -> Result<bool> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if pred.is_cyclic() != gt.is_cyclic() {
        return Err(LossError::CyclicMismatch);
    }
    if cfg.n_hops == 0 {
        return Err(LossError::ZeroHops);
    }
    let cyclic = cfg.cyclic.unwrap_or(pred.is_cyclic());
    if cyclic && pred.len() < 3 {
        return Err(LossError::TooFewPoints(pred.len()));
    }
    Ok(cyclic)
}

/// Vertex triples `(i - n, i, i + n)` that have a valid `n`-hop angle.
fn hop_triples(len: usize, n: usize, cyclic: bool) -> Vec<(usize, usize, usize)> {
    if cyclic {
        if 2 * n >= len {
            return Vec::new();
        }
        (0..len).map(|i| ((i + len - n) % len, i, (i + n) % len)).collect()
    } else if 2 * n >= len {
        Vec::new()
    } else {
        (n..len - n).map(|i| (i - n, i, i + n)).collect()
    }
}

/// Angle at `center` plus its gradient w.r.t. `prev - center` and
/// `next - center`. Collapsed rays return a straight angle and no gradient.
fn angle_with_grad(prev: Point2, center: Point2, next: Point2, eps: f64) -> (f64, Point2, Point2) {
    let u = prev.sub(center);
    let v = next.sub(center);
    let (nu, nv) = (u.norm(), v.norm());
    let zero = Point2::default();
    if nu < eps || nv < eps {
        return (std::f64::consts::PI, zero, zero);
    }
    let c = u.cross(v);
    let d = u.dot(v);
    let r = c.abs();
    let theta = r.atan2(d);
    // d(theta) = (d * d|c| - |c| * d(dot)) / (|c|^2 + dot^2)
    let denom = nu * nu * nv * nv;
    let sgn = if c > 0.0 { 1.0 } else if c < 0.0 { -1.0 } else { 0.0 };
    let gu = Point2::new((d * sgn * v.y - r * v.x) / denom, (-d * sgn * v.x - r * v.y) / denom);
    let gv = Point2::new((-d * sgn * u.y - r * u.x) / denom, (d * sgn * u.x - r * u.y) / denom);
    (theta, gu, gv)
}

fn l1_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Structure term and (optionally) its gradient w.r.t. the prediction.
fn sapl_term(
    pred: &[Point2],
    gt: &[Point2],
    cyclic: bool,
    cfg: &SaplConfig,
    mut grad: Option<&mut [Point2]>,
) -> f64 {
    let len = pred.len();
    let hops: Vec<Vec<(usize, usize, usize)>> = (1..=cfg.n_hops)
        .map(|n| hop_triples(len, n, cyclic))
        .filter(|t| !t.is_empty())
        .collect();
    if hops.is_empty() {
        return 0.0;
    }
    let hop_weight = 1.0 / hops.len() as f64;
    let mut total = 0.0;
    for triples in &hops {
        let w = hop_weight / triples.len() as f64;
        let mut hop_sum = 0.0;
        for &(a, i, b) in triples {
            let (th_pred, gu, gv) = angle_with_grad(pred[a], pred[i], pred[b], cfg.degeneracy_eps);
            let th_gt = geometry::vertex_angle(gt[a], gt[i], gt[b], cfg.degeneracy_eps);
            let diff = (0.5 * th_pred).sin() - (0.5 * th_gt).sin();
            hop_sum += diff.abs();
            if let Some(g) = grad.as_deref_mut() {
                let k = w * l1_sign(diff) * 0.5 * (0.5 * th_pred).cos();
                if k != 0.0 {
                    g[a] = g[a].add(gu.scale(k));
                    g[b] = g[b].add(gv.scale(k));
                    g[i] = g[i].sub(gu.add(gv).scale(k));
                }
            }
        }
        total += w * hop_sum;
    }
    total
}

/// Mean over hops `1..=N` of the mean absolute difference of
/// `sin(theta / 2)` between prediction and ground truth.
///
/// Hops or vertices without a valid angle are left out of the averages;
/// when none remain the term is zero.
pub fn sapl_loss(pred: &PointSequence, gt: &PointSequence, cfg: &SaplConfig) -> Result<f64> {
    let cyclic = validate(pred, gt, cfg)?;
    Ok(sapl_term(pred.points(), gt.points(), cyclic, cfg, None))
}

/// Mean per-point L1 plus the structure term, with analytic gradients.
pub fn point_loss(pred: &PointSequence, gt: &PointSequence, cfg: &SaplConfig) -> Result<LossBreakdown> {
    let cyclic = validate(pred, gt, cfg)?;
    let (p, g) = (pred.points(), gt.points());
    let k = p.len() as f64;
    let mut grad = vec![Point2::default(); p.len()];
    let mut l1 = 0.0;
    for (i, (a, b)) in p.iter().zip(g).enumerate() {
        let (dx, dy) = (a.x - b.x, a.y - b.y);
        l1 += dx.abs() + dy.abs();
        grad[i] = Point2::new(l1_sign(dx) / k, l1_sign(dy) / k);
    }
    let l1_term = l1 / k;
    let sapl = if cfg.enabled { sapl_term(p, g, cyclic, cfg, Some(&mut grad)) } else { 0.0 };
    if !l1_term.is_finite() {
        return Err(LossError::NonFinite { term: "l1" });
    }
    if !sapl.is_finite() {
        return Err(LossError::NonFinite { term: "sapl" });
    }
    Ok(LossBreakdown { l1_term, sapl_term: sapl, total: l1_term + sapl, per_point_grad: grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub points: PointSequence,
    /// Total loss before each update, followed by the loss after the last.
    pub trace: Vec<f64>,
}

/// Plain gradient descent of the point loss directly on point coordinates.
pub fn fit_points(
    init: &PointSequence,
    gt: &PointSequence,
    cfg: &SaplConfig,
    steps: usize,
    lr: f64,
) -> Result<FitResult> {
    let mut pts = init.points().to_vec();
    let cyclic = init.is_cyclic();
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let seq = PointSequence::new(pts.clone(), cyclic).map_err(|_| LossError::NonFinite { term: "points" })?;
        let loss = point_loss(&seq, gt, cfg)?;
        trace.push(loss.total);
        for (p, g) in pts.iter_mut().zip(&loss.per_point_grad) {
            *p = p.sub(g.scale(lr));
        }
    }
    let points = PointSequence::new(pts, cyclic).map_err(|_| LossError::NonFinite { term: "points" })?;
    trace.push(point_loss(&points, gt, cfg)?.total);
    Ok(FitResult { points, trace })
}

/// Mean Euclidean distance between corresponding points.
pub fn mean_point_error(a: &PointSequence, b: &PointSequence) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.points().iter().zip(b.points()).map(|(p, q)| p.distance(*q)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed(xy: &[(f64, f64)]) -> PointSequence {
        PointSequence::from_xy(xy, true).unwrap()
    }

    fn square() -> PointSequence {
        closed(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)])
    }

    #[test]
    fn zero_on_identical_and_translated() {
        let cfg = SaplConfig::default();
        assert_eq!(sapl_loss(&square(), &square(), &cfg).unwrap(), 0.0);
        let moved = square().map(|p| Point2::new(p.x + 5.0, p.y + 7.0)).unwrap();
        assert!(sapl_loss(&moved, &square(), &cfg).unwrap().abs() < 1e-15);
        let b = point_loss(&square(), &square(), &cfg).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(b.per_point_grad.iter().all(|g| *g == Point2::default()));
    }

    #[test]
    fn errors() {
        let cfg = SaplConfig::default();
        let tri = closed(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        assert_eq!(sapl_loss(&square(), &tri, &cfg), Err(LossError::LengthMismatch { pred: 4, gt: 3 }));
        let two = closed(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(sapl_loss(&two, &two, &cfg), Err(LossError::TooFewPoints(2)));
        let open = square().with_cyclic(false);
        assert_eq!(sapl_loss(&open, &square(), &cfg), Err(LossError::CyclicMismatch));
        assert_eq!(sapl_loss(&square(), &square(), &SaplConfig::with_hops(0)), Err(LossError::ZeroHops));
    }

    #[test]
    fn single_point_reduces_to_l1() {
        let p = PointSequence::from_xy(&[(1.0, 2.0)], false).unwrap();
        let g = PointSequence::from_xy(&[(0.0, 0.0)], false).unwrap();
        let b = point_loss(&p, &g, &SaplConfig::default()).unwrap();
        assert_eq!(b.sapl_term, 0.0);
        assert_eq!(b.total, 3.0);
        assert_eq!(b.per_point_grad, vec![Point2::new(1.0, 1.0)]);
    }

    #[test]
    fn hops_that_wrap_onto_themselves_are_skipped() {
        // with 4 points the 2-hop neighbours coincide, so N=2 equals N=1
        let pred = closed(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (-1.0, 2.0)]);
        let one = sapl_loss(&pred, &square(), &SaplConfig::with_hops(1)).unwrap();
        let two = sapl_loss(&pred, &square(), &SaplConfig::with_hops(2)).unwrap();
        assert_eq!(one, two);
        assert!(one > 0.0);
    }

    #[test]
    fn open_chain_uses_interior_vertices_only() {
        assert_eq!(hop_triples(5, 1, false), vec![(0, 1, 2), (1, 2, 3), (2, 3, 4)]);
        assert_eq!(hop_triples(5, 2, false), vec![(0, 2, 4)]);
        assert!(hop_triples(4, 2, false).is_empty());
        assert_eq!(hop_triples(5, 2, true).len(), 5);
    }

    #[test]
    fn l1_only_fit_converges() {
        let gt = square();
        let init = gt.map(|p| Point2::new(p.x + 0.3, p.y - 0.2)).unwrap();
        let fit = fit_points(&init, &gt, &SaplConfig::l1_only(), 400, 0.01).unwrap();
        assert!(mean_point_error(&fit.points, &gt) < 0.01);
        let still = fit_points(&gt, &gt, &SaplConfig::default(), 5, 0.1).unwrap();
        assert_eq!(still.points, gt);
        assert!(still.trace.iter().all(|&t| t == 0.0));
    }
}
