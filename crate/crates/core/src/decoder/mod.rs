//! Desk-scale point decoder and point head.
//!
//! Support point features are refined by `L` decoder layers, each computing
//!
//! ```text
//! S' = LN(SelfAttn(S))
//! S^ = LN(FFN(LN(CrossAttn(S', T))))
//! ```
//!
//! where `T` are the (channel-reduced) proposal features. With
//! `DecoderConfig::residual` each block becomes `LN(x + block(x))`. A two-layer MLP
//! then maps each refined row to an anchor-relative offset. Backpropagation
//! is written out by hand for every block.

pub mod checkpoint;
pub mod features;
pub mod layers;
pub mod toy;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecs::{self, Anchor, CodecError, OffsetSet};
use crate::geometry::PointSequence;
use crate::sapl::{self, LossBreakdown, LossError, SaplConfig};

pub use features::{embed_support_points, position_embedding, roi_features, FeatureGrid};
pub use layers::{Attention, AttentionCache, LayerNorm, LayerNormCache, Linear};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("non-finite {term} loss")]
    NonFiniteLoss { term: &'static str },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// RoI lattice side; `G = lattice^2` proposal rows.
    pub lattice: usize,
    /// Add sinusoidal position embeddings to the decoder inputs.
    pub use_posemb: bool,
    pub ln_eps: f64,
    /// Add each block's input back before its layer norm. Off by default,
    /// which keeps the composition exactly as written in the module docs.
    #[serde(default)]
    pub residual: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { d_model: 32, d_ff: 64, layers: 2, lattice: 7, use_posemb: true, ln_eps: 1e-15, residual: false }
    }
}

impl DecoderConfig {
    /// Small enough for a full finite-difference check.
    pub fn tiny() -> Self {
        Self { d_model: 8, d_ff: 16, layers: 1, lattice: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.lattice == 0 || self.d_ff == 0 {
            return Err(DecoderError::Shape("layers, lattice and d_ff must be positive".into()));
        }
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return Err(DecoderError::Shape(format!("d_model {} must be a positive multiple of 4", self.d_model)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub ln_self: LayerNorm,
    pub cross_attn: Attention,
    pub ln_cross: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln_ffn: LayerNorm,
}

impl DecoderLayer {
    fn init(rng: &mut ChaCha8Rng, cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            self_attn: Attention::init(rng, d),
            ln_self: LayerNorm::new(d),
            cross_attn: Attention::init(rng, d),
            ln_cross: LayerNorm::new(d),
            ffn_in: Linear::init(rng, d, cfg.d_ff),
            ffn_out: Linear::init(rng, cfg.d_ff, d),
            ln_ffn: LayerNorm::new(d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            self_attn: self.self_attn.zeros_like(),
            ln_self: self.ln_self.zeros_like(),
            cross_attn: self.cross_attn.zeros_like(),
            ln_cross: self.ln_cross.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
            ln_ffn: self.ln_ffn.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointHead {
    pub hidden: Linear,
    pub out: Linear,
}

/// Every learnable tensor of the decoder and head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    /// Channel reduction applied to proposal features.
    pub reduce: Linear,
    pub layers: Vec<DecoderLayer>,
    pub head: PointHead,
}

/// Named view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl DecoderParams {
    /// Layer norms start at scale 1 / bias 0, projections uniform in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let reduce = Linear::init(&mut rng, d, d);
        let layers = (0..config.layers).map(|_| DecoderLayer::init(&mut rng, &config)).collect();
        let head = PointHead { hidden: Linear::init(&mut rng, d, d), out: Linear::init(&mut rng, d, 2) };
        Ok(Self { config, reduce, layers, head })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            reduce: self.reduce.zeros_like(),
            layers: self.layers.iter().map(DecoderLayer::zeros_like).collect(),
            head: PointHead { hidden: self.head.hidden.zeros_like(), out: self.head.out.zeros_like() },
        }
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut views = Vec::new();
        visit_linear(&mut views, "reduce", &self.reduce);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            visit_attention(&mut views, &format!("{p}.self_attn"), &l.self_attn);
            visit_norm(&mut views, &format!("{p}.ln_self"), &l.ln_self);
            visit_attention(&mut views, &format!("{p}.cross_attn"), &l.cross_attn);
            visit_norm(&mut views, &format!("{p}.ln_cross"), &l.ln_cross);
            visit_linear(&mut views, &format!("{p}.ffn_in"), &l.ffn_in);
            visit_linear(&mut views, &format!("{p}.ffn_out"), &l.ffn_out);
            visit_norm(&mut views, &format!("{p}.ln_ffn"), &l.ln_ffn);
        }
        visit_linear(&mut views, "head.hidden", &self.head.hidden);
        visit_linear(&mut views, "head.out", &self.head.out);
        views
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut views = Vec::new();
        visit_linear_mut(&mut views, "reduce", &mut self.reduce);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layer{i}");
            visit_attention_mut(&mut views, &format!("{p}.self_attn"), &mut l.self_attn);
            visit_norm_mut(&mut views, &format!("{p}.ln_self"), &mut l.ln_self);
            visit_attention_mut(&mut views, &format!("{p}.cross_attn"), &mut l.cross_attn);
            visit_norm_mut(&mut views, &format!("{p}.ln_cross"), &mut l.ln_cross);
            visit_linear_mut(&mut views, &format!("{p}.ffn_in"), &mut l.ffn_in);
            visit_linear_mut(&mut views, &format!("{p}.ffn_out"), &mut l.ffn_out);
            visit_norm_mut(&mut views, &format!("{p}.ln_ffn"), &mut l.ln_ffn);
        }
        visit_linear_mut(&mut views, "head.hidden", &mut self.head.hidden);
        visit_linear_mut(&mut views, "head.out", &mut self.head.out);
        views
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DecoderError::Shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self -= lr * grads`.
    pub fn sgd_update(&mut self, grads: &DecoderParams, lr: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (v, dv) in p.data.iter_mut().zip(g.data) {
                *v -= lr * dv;
            }
        }
    }
}

fn visit_linear<'a>(out: &mut Vec<TensorView<'a>>, prefix: &str, l: &'a Linear) {
    out.push(TensorView { name: format!("{prefix}.w"), shape: l.w.shape().to_vec(), data: l.w.as_slice().unwrap() });
    out.push(TensorView { name: format!("{prefix}.b"), shape: l.b.shape().to_vec(), data: l.b.as_slice().unwrap() });
}

fn visit_norm<'a>(out: &mut Vec<TensorView<'a>>, prefix: &str, n: &'a LayerNorm) {
    out.push(TensorView { name: format!("{prefix}.gamma"), shape: n.gamma.shape().to_vec(), data: n.gamma.as_slice().unwrap() });
    out.push(TensorView { name: format!("{prefix}.beta"), shape: n.beta.shape().to_vec(), data: n.beta.as_slice().unwrap() });
}

fn visit_attention<'a>(out: &mut Vec<TensorView<'a>>, prefix: &str, a: &'a Attention) {
    for (tag, m) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
        out.push(TensorView { name: format!("{prefix}.{tag}"), shape: m.shape().to_vec(), data: m.as_slice().unwrap() });
    }
}

fn visit_linear_mut<'a>(out: &mut Vec<TensorViewMut<'a>>, prefix: &str, l: &'a mut Linear) {
    let shape = l.w.shape().to_vec();
    out.push(TensorViewMut { name: format!("{prefix}.w"), shape, data: l.w.as_slice_mut().unwrap() });
    let shape = l.b.shape().to_vec();
    out.push(TensorViewMut { name: format!("{prefix}.b"), shape, data: l.b.as_slice_mut().unwrap() });
}

fn visit_norm_mut<'a>(out: &mut Vec<TensorViewMut<'a>>, prefix: &str, n: &'a mut LayerNorm) {
    let shape = n.gamma.shape().to_vec();
    out.push(TensorViewMut { name: format!("{prefix}.gamma"), shape, data: n.gamma.as_slice_mut().unwrap() });
    let shape = n.beta.shape().to_vec();
    out.push(TensorViewMut { name: format!("{prefix}.beta"), shape, data: n.beta.as_slice_mut().unwrap() });
}

fn visit_attention_mut<'a>(out: &mut Vec<TensorViewMut<'a>>, prefix: &str, a: &'a mut Attention) {
    for (tag, m) in [("wq", &mut a.wq), ("wk", &mut a.wk), ("wv", &mut a.wv), ("wo", &mut a.wo)] {
        let shape = m.shape().to_vec();
        out.push(TensorViewMut { name: format!("{prefix}.{tag}"), shape, data: m.as_slice_mut().unwrap() });
    }
}

struct LayerCache {
    input: Array2<f64>,
    self_attn: AttentionCache,
    ln_self: LayerNormCache,
    refined: Array2<f64>,
    cross_attn: AttentionCache,
    ln_cross: LayerNormCache,
    ffn_input: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ln_ffn: LayerNormCache,
}

/// Intermediate activations of one forward pass.
pub struct DecoderTrace {
    roi_raw: Array2<f64>,
    roi: Array2<f64>,
    layers: Vec<LayerCache>,
}

impl DecoderTrace {
    /// Attention weight matrices, self then cross, layer by layer.
    pub fn attention_weights(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.self_attn.weights, &l.cross_attn.weights]).collect()
    }

    /// Layer-norm activations before their affine maps.
    pub fn normalized_activations(&self) -> Vec<&Array2<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.ln_self.normalized, &l.ln_cross.normalized, &l.ln_ffn.normalized])
            .collect()
    }
}

fn check_finite(m: &Array2<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DecoderError::NonFinite(what))
    }
}

/// Refines support point features against proposal features.
pub fn decoder_forward(params: &DecoderParams, support: &Array2<f64>, roi: &Array2<f64>) -> Result<Array2<f64>> {
    decoder_forward_traced(params, support, roi).map(|(out, _)| out)
}

pub fn decoder_forward_traced(
    params: &DecoderParams,
    support: &Array2<f64>,
    roi: &Array2<f64>,
) -> Result<(Array2<f64>, DecoderTrace)> {
    let d = params.config.d_model;
    if support.ncols() != d || roi.ncols() != d {
        return Err(DecoderError::Shape(format!(
            "support has {} channels and RoI has {}, decoder expects {d}",
            support.ncols(),
            roi.ncols()
        )));
    }
    if support.nrows() == 0 || roi.nrows() == 0 {
        return Err(DecoderError::Shape("empty support or RoI features".into()));
    }
    check_finite(support, "support features")?;
    check_finite(roi, "RoI features")?;
    let eps = params.config.ln_eps;
    let residual = params.config.residual;
    let skip = |x: Array2<f64>, input: &Array2<f64>| if residual { x + input } else { x };
    let t = params.reduce.forward(roi);
    let mut s = support.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (sa, sa_cache) = layer.self_attn.forward(&s, &s);
        let (refined, ln_self) = layer.ln_self.forward(&skip(sa, &s), eps);
        let (ca, ca_cache) = layer.cross_attn.forward(&refined, &t);
        let (ffn_input, ln_cross) = layer.ln_cross.forward(&skip(ca, &refined), eps);
        let ffn_pre = layer.ffn_in.forward(&ffn_input);
        let ffn_act = layers::relu(&ffn_pre);
        let ffn = layer.ffn_out.forward(&ffn_act);
        let (out, ln_ffn) = layer.ln_ffn.forward(&skip(ffn, &ffn_input), eps);
        caches.push(LayerCache {
            input: s,
            self_attn: sa_cache,
            ln_self,
            refined,
            cross_attn: ca_cache,
            ln_cross,
            ffn_input,
            ffn_pre,
            ffn_act,
            ln_ffn,
        });
        s = out;
    }
    check_finite(&s, "decoder output")?;
    Ok((s, DecoderTrace { roi_raw: roi.clone(), roi: t, layers: caches }))
}

/// Accumulates parameter gradients given `dL/d(decoder output)`.
fn decoder_backward(params: &DecoderParams, trace: &DecoderTrace, dout: Array2<f64>, grads: &mut DecoderParams) {
    let residual = params.config.residual;
    let mut ds = dout;
    let mut droi = Array2::zeros(trace.roi.raw_dim());
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let c = &trace.layers[i];
        let g = &mut grads.layers[i];
        let dffn = layer.ln_ffn.backward(&c.ln_ffn, &ds, &mut g.ln_ffn);
        let dact = layer.ffn_out.backward(&c.ffn_act, &dffn, &mut g.ffn_out);
        let dpre = layers::relu_backward(&c.ffn_pre, &dact);
        let mut dffn_input = layer.ffn_in.backward(&c.ffn_input, &dpre, &mut g.ffn_in);
        if residual {
            dffn_input += &dffn;
        }
        let dca = layer.ln_cross.backward(&c.ln_cross, &dffn_input, &mut g.ln_cross);
        let (mut drefined, dt) = layer.cross_attn.backward(&c.refined, &trace.roi, &c.cross_attn, &dca, &mut g.cross_attn);
        if residual {
            drefined += &dca;
        }
        droi += &dt;
        let dsa = layer.ln_self.backward(&c.ln_self, &drefined, &mut g.ln_self);
        let (dq, dkv) = layer.self_attn.backward(&c.input, &c.input, &c.self_attn, &dsa, &mut g.self_attn);
        ds = if residual { dq + dkv + &dsa } else { dq + dkv };
    }
    params.reduce.backward(&trace.roi_raw, &droi, &mut grads.reduce);
}

struct HeadCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

fn head_offsets(params: &DecoderParams, refined: &Array2<f64>) -> (Array2<f64>, HeadCache) {
    let pre = params.head.hidden.forward(refined);
    let act = layers::relu(&pre);
    let off = params.head.out.forward(&act);
    (off, HeadCache { pre, act })
}

fn offsets_to_points(off: &Array2<f64>, anchor: &Anchor, cyclic: bool) -> Result<PointSequence> {
    let pairs: Vec<(f64, f64)> = off.rows().into_iter().map(|r| (r[0], r[1])).collect();
    Ok(codecs::anchor_decode(&OffsetSet::from_pairs(&pairs), anchor, cyclic)?)
}

/// Maps refined features to points through the MLP and anchor decoding.
pub fn point_head(params: &DecoderParams, refined: &Array2<f64>, anchor: &Anchor, cyclic: bool) -> Result<PointSequence> {
    if refined.ncols() != params.config.d_model {
        return Err(DecoderError::Shape(format!("head expects {} channels", params.config.d_model)));
    }
    let (off, _) = head_offsets(params, refined);
    offsets_to_points(&off, anchor, cyclic)
}

/// One training example: a support crop with its points and a query scene
/// with a proposal and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub support_grid: FeatureGrid,
    pub support_pts: PointSequence,
    pub query_grid: FeatureGrid,
    pub anchor: Anchor,
    pub gt_pts: PointSequence,
}

impl TrainBatch {
    fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        for (grid, what) in [(&self.support_grid, "support"), (&self.query_grid, "query")] {
            if grid.channels() != cfg.d_model {
                return Err(DecoderError::Shape(format!(
                    "{what} grid has {} channels, decoder expects {}",
                    grid.channels(),
                    cfg.d_model
                )));
            }
        }
        if self.support_pts.len() != self.gt_pts.len() {
            return Err(DecoderError::Shape(format!(
                "{} support points but {} ground-truth points",
                self.support_pts.len(),
                self.gt_pts.len()
            )));
        }
        Ok(())
    }
}

struct FullForward {
    trace: DecoderTrace,
    head: HeadCache,
    refined: Array2<f64>,
    points: PointSequence,
}

fn full_forward(params: &DecoderParams, batch: &TrainBatch) -> Result<FullForward> {
    batch.validate(&params.config)?;
    let cfg = &params.config;
    let support = embed_support_points(&batch.support_grid, &batch.support_pts, cfg.use_posemb)?;
    let roi = roi_features(&batch.query_grid, &batch.anchor, cfg.lattice, cfg.use_posemb);
    let (refined, trace) = decoder_forward_traced(params, &support, &roi)?;
    let (off, head) = head_offsets(params, &refined);
    let points = offsets_to_points(&off, &batch.anchor, batch.gt_pts.is_cyclic())?;
    Ok(FullForward { trace, head, refined, points })
}

/// Predicted points for a batch.
pub fn predict(params: &DecoderParams, batch: &TrainBatch) -> Result<PointSequence> {
    full_forward(params, batch).map(|f| f.points)
}

/// Smallest `|z|` over every ReLU input (FFN and head) for a batch; the
/// network is smooth within this distance of its current activations.
pub fn relu_margin(params: &DecoderParams, batch: &TrainBatch) -> Result<f64> {
    let f = full_forward(params, batch)?;
    Ok(f.trace
        .layers
        .iter()
        .flat_map(|l| l.ffn_pre.iter())
        .chain(f.head.pre.iter())
        .fold(f64::INFINITY, |m, z| m.min(z.abs())))
}

fn checked_loss(pred: &PointSequence, gt: &PointSequence, cfg: &SaplConfig) -> Result<LossBreakdown> {
    match sapl::point_loss(pred, gt, cfg) {
        Ok(l) => Ok(l),
        Err(LossError::NonFinite { term }) => Err(DecoderError::NonFiniteLoss { term }),
        Err(e) => Err(e.into()),
    }
}

pub fn batch_loss(params: &DecoderParams, batch: &TrainBatch, cfg: &SaplConfig) -> Result<LossBreakdown> {
    let f = full_forward(params, batch)?;
    checked_loss(&f.points, &batch.gt_pts, cfg)
}

/// Loss and its gradient w.r.t. every parameter.
pub fn loss_and_grad(params: &DecoderParams, batch: &TrainBatch, cfg: &SaplConfig) -> Result<(LossBreakdown, DecoderParams)> {
    let f = full_forward(params, batch)?;
    let loss = checked_loss(&f.points, &batch.gt_pts, cfg)?;
    let mut grads = params.zeros_like();
    let k = f.points.len();
    let a = &batch.anchor;
    let doff = Array2::from_shape_fn((k, 2), |(i, j)| {
        let g = loss.per_point_grad[i];
        if j == 0 { g.x * a.w } else { g.y * a.h }
    });
    let dact = params.head.out.backward(&f.head.act, &doff, &mut grads.head.out);
    let dpre = layers::relu_backward(&f.head.pre, &dact);
    let drefined = params.head.hidden.backward(&f.refined, &dpre, &mut grads.head.hidden);
    decoder_backward(params, &f.trace, drefined, &mut grads);
    Ok((loss, grads))
}

/// One SGD step on the point loss. Returns the loss before the update.
pub fn train_step(params: &mut DecoderParams, batch: &TrainBatch, cfg: &SaplConfig, lr: f64) -> Result<LossBreakdown> {
    let (loss, grads) = loss_and_grad(params, batch, cfg)?;
    if lr != 0.0 {
        params.sgd_update(&grads, lr);
    }
    Ok(loss)
}

/// Mean Euclidean error of a prediction, in pixels.
pub fn prediction_error(params: &DecoderParams, batch: &TrainBatch) -> Result<f64> {
    let p = predict(params, batch)?;
    Ok(sapl::mean_point_error(&p, &batch.gt_pts))
}
