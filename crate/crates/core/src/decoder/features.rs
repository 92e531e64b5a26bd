//! Feature grids, bilinear point sampling, and RoI lattices.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DecoderError;
use crate::codecs::Anchor;
use crate::geometry::{Point2, PointSequence};

/// Dense `height x width x channels` features. Cell `(r, c)` sits at image
/// position `((c + 0.5) * stride, (r + 0.5) * stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Array3<f64>,
    stride: f64,
}

impl FeatureGrid {
    pub fn new(values: Array3<f64>, stride: f64) -> Result<Self, DecoderError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DecoderError::NonFinite("feature grid"));
        }
        if values.is_empty() || !(stride > 0.0) {
            return Err(DecoderError::Shape("feature grid must be non-empty with positive stride".into()));
        }
        Ok(Self { values, stride })
    }

    pub fn constant(height: usize, width: usize, cell: &[f64], stride: f64) -> Result<Self, DecoderError> {
        let d = cell.len();
        Self::new(Array3::from_shape_fn((height, width, d), |(_, _, k)| cell[k]), stride)
    }

    /// Features from a fixed random linear projection of 3x3 image patches
    /// (edge-clamped), one cell per pixel.
    pub fn from_image(image: &Array2<f64>, channels: usize, seed: u64) -> Result<Self, DecoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = super::layers::uniform(&mut rng, 9, channels, 1.0);
        let (h, w) = image.dim();
        let mut values = Array3::zeros((h, w, channels));
        for r in 0..h {
            for c in 0..w {
                let mut patch = [0.0; 9];
                for (k, p) in patch.iter_mut().enumerate() {
                    let rr = (r as isize + k as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + k as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                    *p = image[[rr, cc]];
                }
                for ch in 0..channels {
                    values[[r, c, ch]] = (0..9).map(|k| patch[k] * proj[[k, ch]]).sum();
                }
            }
        }
        Self::new(values, 1.0)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Extent in image pixels, `(width, height)`.
    pub fn extent(&self) -> (f64, f64) {
        (self.width() as f64 * self.stride, self.height() as f64 * self.stride)
    }

    /// Bilinear sample at an image position; positions outside the cell
    /// centres are clamped to the border.
    pub fn sample(&self, p: Point2) -> Array1<f64> {
        let (h, w, d) = self.values.dim();
        let (x0, x1, tx) = interp_axis(p.x / self.stride - 0.5, w);
        let (y0, y1, ty) = interp_axis(p.y / self.stride - 0.5, h);
        let mut out = Array1::zeros(d);
        for k in 0..d {
            let top = self.values[[y0, x0, k]] * (1.0 - tx) + self.values[[y0, x1, k]] * tx;
            let bottom = self.values[[y1, x0, k]] * (1.0 - tx) + self.values[[y1, x1, k]] * tx;
            out[k] = top * (1.0 - ty) + bottom * ty;
        }
        out
    }
}

fn interp_axis(g: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let g = g.clamp(0.0, (n - 1) as f64);
    let i0 = (g.floor() as usize).min(n - 2);
    (i0, i0 + 1, g - i0 as f64)
}

/// Sinusoidal embedding of a normalised position: the first half of the
/// channels encode `x`, the second half `y`, as interleaved sin/cos pairs.
pub fn position_embedding(nx: f64, ny: f64, d: usize) -> Array1<f64> {
    let half = d / 2;
    let mut out = Array1::zeros(d);
    for (offset, v) in [(0, nx), (half, ny)] {
        let v = v * std::f64::consts::TAU;
        for k in 0..half / 2 {
            let freq = 10000f64.powf(2.0 * k as f64 / half as f64);
            out[offset + 2 * k] = (v / freq).sin();
            out[offset + 2 * k + 1] = (v / freq).cos();
        }
    }
    out
}

/// One feature row per support point.
pub fn embed_support_points(grid: &FeatureGrid, pts: &PointSequence, use_posemb: bool) -> Result<Array2<f64>, DecoderError> {
    if pts.is_empty() {
        return Err(DecoderError::Shape("no support points".into()));
    }
    let d = grid.channels();
    let (ew, eh) = grid.extent();
    let mut out = Array2::zeros((pts.len(), d));
    for (i, &p) in pts.points().iter().enumerate() {
        let mut row = grid.sample(p);
        if use_posemb {
            row += &position_embedding(p.x / ew, p.y / eh, d);
        }
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

/// Sample positions of an `n x n` lattice over the anchor interior, in
/// row-major order.
pub fn roi_lattice(anchor: &Anchor, n: usize) -> Vec<Point2> {
    let (x0, y0) = (anchor.cx - anchor.w / 2.0, anchor.cy - anchor.h / 2.0);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(Point2::new(
                x0 + (j as f64 + 0.5) * anchor.w / n as f64,
                y0 + (i as f64 + 0.5) * anchor.h / n as f64,
            ));
        }
    }
    out
}

/// Flattened `n*n x d` proposal features.
pub fn roi_features(grid: &FeatureGrid, anchor: &Anchor, n: usize, use_posemb: bool) -> Array2<f64> {
    let d = grid.channels();
    let lattice = roi_lattice(anchor, n);
    let mut out = Array2::zeros((lattice.len(), d));
    for (g, &p) in lattice.iter().enumerate() {
        let mut row = grid.sample(p);
        if use_posemb {
            let (i, j) = (g / n, g % n);
            row += &position_embedding((j as f64 + 0.5) / n as f64, (i as f64 + 0.5) / n as f64, d);
        }
        out.row_mut(g).assign(&row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_grid(seed: u64, h: usize, w: usize, d: usize) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureGrid::new(Array3::from_shape_fn((h, w, d), |_| rng.random_range(-1.0..1.0)), 2.0).unwrap()
    }

    /// Scalar-loop bilinear interpolation written independently of `sample`.
    fn naive_bilinear(grid: &FeatureGrid, x: f64, y: f64, k: usize) -> f64 {
        let (h, w) = (grid.height() as f64, grid.width() as f64);
        let gx = (x / grid.stride() - 0.5).max(0.0).min(w - 1.0);
        let gy = (y / grid.stride() - 0.5).max(0.0).min(h - 1.0);
        let mut acc = 0.0;
        for r in 0..grid.height() {
            for c in 0..grid.width() {
                let wx = (1.0 - (gx - c as f64).abs()).max(0.0);
                let wy = (1.0 - (gy - r as f64).abs()).max(0.0);
                acc += wx * wy * grid.values()[[r, c, k]];
            }
        }
        acc
    }

    #[test]
    fn constant_grid_samples_constant() {
        let cell = [0.5, -1.0, 2.0, 3.0];
        let grid = FeatureGrid::constant(5, 6, &cell, 1.0).unwrap();
        let pts = PointSequence::from_xy(&[(0.2, 0.3), (4.9, 3.1)], false).unwrap();
        let f = embed_support_points(&grid, &pts, true).unwrap();
        for (i, p) in pts.points().iter().enumerate() {
            let expected = Array1::from(cell.to_vec()) + position_embedding(p.x / 6.0, p.y / 5.0, 4);
            for k in 0..4 {
                assert!((f[[i, k]] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cell_center_returns_cell() {
        let grid = random_grid(3, 4, 5, 4);
        let v = grid.sample(Point2::new(2.5 * 2.0, 1.5 * 2.0));
        assert_eq!(v, grid.values().slice(ndarray::s![1, 2, ..]).to_owned());
    }

    #[test]
    fn bilinear_matches_naive_oracle() {
        let grid = random_grid(4, 6, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = Point2::new(rng.random_range(-2.0..16.0), rng.random_range(-2.0..14.0));
            let v = grid.sample(p);
            for k in 0..3 {
                assert!((v[k] - naive_bilinear(&grid, p.x, p.y, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_on_cell_aligned_anchor_returns_cells() {
        let grid = random_grid(6, 9, 10, 4);
        // cells 1..8 in x and 2..9 in y at stride 2
        let anchor = Anchor::new((1.0 + 3.5) * 2.0, (2.0 + 3.5) * 2.0, 14.0, 14.0).unwrap();
        let t = roi_features(&grid, &anchor, 7, false);
        assert_eq!(t.nrows(), 49);
        for g in 0..49 {
            let (i, j) = (g / 7, g % 7);
            assert_eq!(t.row(g), grid.values().slice(ndarray::s![2 + i, 1 + j, ..]));
        }
    }

    #[test]
    fn roi_constant_grid_differs_only_by_posemb() {
        let cell = [1.0, 2.0, 3.0, 4.0];
        let grid = FeatureGrid::constant(8, 8, &cell, 1.0).unwrap();
        let a = Anchor::new(4.0, 4.0, 5.0, 3.0).unwrap();
        let plain = roi_features(&grid, &a, 7, false);
        let emb = roi_features(&grid, &a, 7, true);
        for g in 0..49 {
            assert_eq!(plain.row(g).to_vec(), cell.to_vec());
            let pe = position_embedding(((g % 7) as f64 + 0.5) / 7.0, ((g / 7) as f64 + 0.5) / 7.0, 4);
            for k in 0..4 {
                assert!((emb[[g, k]] - cell[k] - pe[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_matches_naive_oracle() {
        let grid = random_grid(7, 12, 12, 4);
        let a = Anchor::new(11.3, 9.7, 9.1, 13.4).unwrap();
        let t = roi_features(&grid, &a, 7, false);
        for g in 0..49 {
            let (i, j) = ((g / 7) as f64, (g % 7) as f64);
            let x = a.cx - a.w / 2.0 + (j + 0.5) * a.w / 7.0;
            let y = a.cy - a.h / 2.0 + (i + 0.5) * a.h / 7.0;
            for k in 0..4 {
                assert!((t[[g, k]] - naive_bilinear(&grid, x, y, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_support_point_is_accepted() {
        let grid = random_grid(1, 2, 2, 4);
        let pts = PointSequence::from_xy(&[(0.0, 0.0)], false).unwrap();
        assert!(embed_support_points(&grid, &pts, false).is_ok());
    }
}
