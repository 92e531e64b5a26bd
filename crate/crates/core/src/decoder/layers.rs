//! Building blocks of the point decoder, each with an explicit backward
//! pass. Activations are row-major `rows x channels` matrices.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self { w: uniform(rng, d_in, d_out, bound), b: Array1::zeros(d_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.len()) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalised input before the affine map.
    pub normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { gamma: Array1::zeros(self.gamma.len()), beta: Array1::zeros(self.beta.len()) }
    }

    pub fn forward(&self, x: &Array2<f64>, eps: f64) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            *s = 1.0 / (var + eps).sqrt();
            row *= *s;
        }
        let y = &normalized * &self.gamma + &self.beta;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let xhat = &cache.normalized;
        grad.gamma += &(dy * xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = xhat.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let g = dxhat.row(r);
            let xh = xhat.row(r);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let s = cache.inv_std[r];
            for c in 0..dy.ncols() {
                dx[[r, c]] = s * (g[c] - mean_g - xh[c] * mean_gx);
            }
        }
        dx
    }
}

/// Single-head scaled dot-product attention with output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-stochastic attention weights, `queries x keys`.
    pub weights: Array2<f64>,
    mixed: Array2<f64>,
}

pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Attention {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            wq: uniform(rng, d, d, bound),
            wk: uniform(rng, d, d, bound),
            wv: uniform(rng, d, d, bound),
            wo: uniform(rng, d, d, bound),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = Array2::zeros(self.wq.raw_dim());
        Self { wq: z.clone(), wk: z.clone(), wv: z.clone(), wo: z }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.wq.ncols() as f64).sqrt()
    }

    pub fn forward(&self, queries: &Array2<f64>, context: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let q = queries.dot(&self.wq);
        let k = context.dot(&self.wk);
        let v = context.dot(&self.wv);
        let mut weights = q.dot(&k.t()) * self.scale();
        softmax_rows(&mut weights);
        let mixed = weights.dot(&v);
        let out = mixed.dot(&self.wo);
        (out, AttentionCache { q, k, v, weights, mixed })
    }

    /// Returns `(dL/dqueries, dL/dcontext)`.
    pub fn backward(
        &self,
        queries: &Array2<f64>,
        context: &Array2<f64>,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        grad: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        grad.wo += &cache.mixed.t().dot(dout);
        let dmixed = dout.dot(&self.wo.t());
        let dweights = dmixed.dot(&cache.v.t());
        let dv = cache.weights.t().dot(&dmixed);
        // softmax Jacobian, row by row
        let mut dscores = &cache.weights * &dweights;
        for (mut row, a) in dscores.rows_mut().into_iter().zip(cache.weights.rows()) {
            let s = row.sum();
            row.zip_mut_with(&a, |g, &p| *g -= p * s);
        }
        dscores *= self.scale();
        let dq = dscores.dot(&cache.k);
        let dk = dscores.t().dot(&cache.q);
        grad.wq += &queries.t().dot(&dq);
        grad.wk += &context.t().dot(&dk);
        grad.wv += &context.t().dot(&dv);
        let dqueries = dq.dot(&self.wq.t());
        let dcontext = dk.dot(&self.wk.t()) + dv.dot(&self.wv.t());
        (dqueries, dcontext)
    }
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, max_relative_error};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weighted_sum(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -5.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::new(5);
        ln.gamma = uniform(&mut rng, 1, 5, 1.0).row(0).to_owned();
        let x = uniform(&mut rng, 3, 5, 2.0);
        let probe = uniform(&mut rng, 3, 5, 1.0);
        let (_, cache) = ln.forward(&x, 1e-12);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &probe, &mut g);
        let num = central_differences(x.as_slice().unwrap(), 1e-6, |v| {
            let xv = Array2::from_shape_vec((3, 5), v.to_vec()).unwrap();
            weighted_sum(&ln.forward(&xv, 1e-12).0, &probe)
        });
        assert!(max_relative_error(dx.as_slice().unwrap(), &num) < 1e-6);
    }

    #[test]
    fn attention_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = Attention::init(&mut rng, 4);
        let q = uniform(&mut rng, 3, 4, 1.0);
        let c = uniform(&mut rng, 5, 4, 1.0);
        let probe = uniform(&mut rng, 3, 4, 1.0);
        let (_, cache) = att.forward(&q, &c);
        let mut g = att.zeros_like();
        let (dq, dc) = att.backward(&q, &c, &cache, &probe, &mut g);
        let num_q = central_differences(q.as_slice().unwrap(), 1e-6, |v| {
            let qv = Array2::from_shape_vec((3, 4), v.to_vec()).unwrap();
            weighted_sum(&att.forward(&qv, &c).0, &probe)
        });
        let num_c = central_differences(c.as_slice().unwrap(), 1e-6, |v| {
            let cv = Array2::from_shape_vec((5, 4), v.to_vec()).unwrap();
            weighted_sum(&att.forward(&q, &cv).0, &probe)
        });
        assert!(max_relative_error(dq.as_slice().unwrap(), &num_q) < 1e-6);
        assert!(max_relative_error(dc.as_slice().unwrap(), &num_c) < 1e-6);
    }
}
