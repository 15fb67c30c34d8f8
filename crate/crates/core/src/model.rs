//! Architectures, activations, pooling, energies and the readout loss.
//!
//! Index convention: `params.layers[i]` and `state.layers[i]` belong to layer
//! `i + 1`; layer 0 is the clamped input. The last layer is the softmax readout.
//! Batched tensors carry the batch as their last axis: dense layers are
//! `[units, batch]`, convolutional layers `[channels, h, w, batch]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    conv2d, conv2d_transpose, conv2d_weight_grad, outer_sum, real_matmul, ComplexTensor, ConvGeometry,
    RealTensor, Scalar, Tensor, TensorError, C64,
};

/// Activations closer than this to a pole of `1 / (1 + e^u)` are treated as divergent.
pub const POLE_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("activation hit a pole or overflowed")]
    Diverged,
    #[error("log of near-zero target probability {0:e}")]
    LogOfZero(f64),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `1 / (1 + e^{-4z + 2})`
    ShiftedSigmoid,
    /// `(z/2) sig(z) + (1 - z/2) sig(z - 2)`
    Dsilu,
    Identity,
}

/// `1 / (1 + e^{-z})`, `None` near a pole.
fn logistic<T: Scalar>(z: T) -> Option<T> {
    let (num, den) = if z.re() >= 0.0 {
        (T::one(), T::one() + (-z).exp())
    } else {
        let e = z.exp();
        (e, T::one() + e)
    };
    if !den.is_finite() || den.abs() < POLE_GUARD {
        return None;
    }
    Some(num / den)
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: T) -> Option<T> {
        match self {
            Activation::ShiftedSigmoid => logistic(z.scale(4.0) - T::from_real(2.0)),
            Activation::Dsilu => {
                let a = logistic(z)?;
                let b = logistic(z - T::from_real(2.0))?;
                let half = z.scale(0.5);
                Some(half * a + (T::one() - half) * b)
            }
            Activation::Identity => Some(z),
        }
    }

    /// Complex derivative `sigma'(z)`.
    pub fn derivative<T: Scalar>(self, z: T) -> Option<T> {
        match self {
            Activation::ShiftedSigmoid => {
                let s = logistic(z.scale(4.0) - T::from_real(2.0))?;
                Some((s * (T::one() - s)).scale(4.0))
            }
            Activation::Dsilu => {
                let a = logistic(z)?;
                let b = logistic(z - T::from_real(2.0))?;
                let half = z.scale(0.5);
                Some(
                    a.scale(0.5) + half * a * (T::one() - a) - b.scale(0.5)
                        + (T::one() - half) * b * (T::one() - b),
                )
            }
            Activation::Identity => Some(T::one()),
        }
    }

    /// Elementwise application; `None` if any element lands on a pole.
    pub fn apply_tensor<T: Scalar>(self, z: &Tensor<T>) -> Option<Tensor<T>> {
        let mut out = z.clone();
        for v in out.data_mut() {
            *v = self.apply(*v)?;
        }
        Some(out)
    }
}

pub fn shifted_sigmoid(z: &ComplexTensor) -> Result<ComplexTensor> {
    Activation::ShiftedSigmoid.apply_tensor(z).ok_or(ModelError::Diverged)
}

pub fn dsilu(z: &ComplexTensor) -> Result<ComplexTensor> {
    Activation::Dsilu.apply_tensor(z).ok_or(ModelError::Diverged)
}

/// Square pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        if self.stride == 0 || self.window == 0 || input < self.window || !(input - self.window).is_multiple_of(self.stride) {
            return None;
        }
        Some((input - self.window) / self.stride + 1)
    }
}

/// Softmax weights cached by [`softmax_pool`], laid out `[C, Ho, Wo, window, window, batch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolWeights<T> {
    pub pool: PoolSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub weights: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub cache: PoolWeights<T>,
}

fn pool_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((c, h, w, 1)),
        [c, h, w, b] => Some((c, h, w, b)),
        _ => None,
    }
}

/// Visits every (window, cell) pair as `f(out_index, in_index, cache_index)`;
/// indices are in units of one batch row.
fn for_each_window(in_shape: &[usize], out_shape: &[usize], pool: PoolSpec, mut f: impl FnMut(usize, usize, usize)) {
    let (c, h, w, _) = pool_dims(in_shape).expect("validated shape");
    let (_, ho, wo, _) = pool_dims(out_shape).expect("validated shape");
    let (k, s) = (pool.window, pool.stride);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (ch * ho + oy) * wo + ox;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (ch * h + oy * s + ky) * w + ox * s + kx;
                        f(o, i, (o * k + ky) * k + kx);
                    }
                }
            }
        }
    }
}

impl<T> PoolWeights<T> {
    fn visit(&self, f: impl FnMut(usize, usize, usize)) {
        for_each_window(&self.in_shape, &self.out_shape, self.pool, f)
    }

    fn batch(&self) -> usize {
        pool_dims(&self.in_shape).map(|d| d.3).unwrap_or(1)
    }
}

/// Per-window softmax-weighted average `y = sum_i softmax(x / tau)_i x_i`.
pub fn softmax_pool<T: Scalar>(x: &Tensor<T>, pool: PoolSpec, tau: f64) -> Result<Pooled<T>> {
    if !(tau > 0.0) {
        return Err(ModelError::InvalidSpec(format!("pooling temperature must be positive, got {tau}")));
    }
    let (c, h, w, batch) = pool_dims(x.shape())
        .ok_or_else(|| ModelError::InvalidSpec(format!("pooling expects [C, H, W(, B)], got {:?}", x.shape())))?;
    let (ho, wo) = match (pool.out_extent(h), pool.out_extent(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(ModelError::InvalidSpec(format!(
                "pool window {} stride {} does not tile {h}x{w}",
                pool.window, pool.stride
            )))
        }
    };
    let out_shape = if x.shape().len() == 4 { vec![c, ho, wo, batch] } else { vec![c, ho, wo] };
    let n_out = c * ho * wo * batch;
    let mut weights = vec![T::zero(); n_out * pool.window * pool.window];
    let xd = x.data();
    let inv_tau = 1.0 / tau;
    let mut shift = vec![f64::NEG_INFINITY; n_out];
    for_each_window(x.shape(), &out_shape, pool, |o, i, _| {
        for b in 0..batch {
            shift[o * batch + b] = shift[o * batch + b].max(xd[i * batch + b].re() * inv_tau);
        }
    });
    let mut norm = vec![T::zero(); n_out];
    for_each_window(x.shape(), &out_shape, pool, |o, i, wi| {
        for b in 0..batch {
            let e = (xd[i * batch + b].scale(inv_tau) - T::from_real(shift[o * batch + b])).exp();
            weights[wi * batch + b] = e;
            norm[o * batch + b] += e;
        }
    });
    let mut out = Tensor::<T>::zeros(&out_shape);
    let od = out.data_mut();
    for_each_window(x.shape(), &out_shape, pool, |o, i, wi| {
        for b in 0..batch {
            let wv = weights[wi * batch + b] / norm[o * batch + b];
            weights[wi * batch + b] = wv;
            od[o * batch + b] += wv * xd[i * batch + b];
        }
    });
    let cache = PoolWeights { pool, in_shape: x.shape().to_vec(), out_shape, weights };
    Ok(Pooled { output: out, cache })
}

/// Redistributes pooled values to their windows with the cached forward weights.
pub fn softmax_unpool<T: Scalar>(pooled: &Tensor<T>, cache: &PoolWeights<T>) -> Result<Tensor<T>> {
    if pooled.shape() != cache.out_shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_unpool",
            left: pooled.shape().to_vec(),
            right: cache.out_shape.clone(),
        }
        .into());
    }
    let batch = cache.batch();
    let mut out = Tensor::<T>::zeros(&cache.in_shape);
    let pd = pooled.data();
    let od = out.data_mut();
    cache.visit(|o, i, wi| {
        for b in 0..batch {
            od[i * batch + b] += cache.weights[wi * batch + b] * pd[o * batch + b];
        }
    });
    Ok(out)
}

/// Exact vector-Jacobian product of [`softmax_pool`]:
/// `dx_i = c_o w_i (1 + (x_i - y_o) / tau)` summed over the windows containing `i`.
pub fn softmax_pool_vjp<T: Scalar>(x: &Tensor<T>, pooled: &Pooled<T>, cot: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let cache = &pooled.cache;
    if cot.shape() != cache.out_shape.as_slice() || x.shape() != cache.in_shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_pool_vjp",
            left: cot.shape().to_vec(),
            right: cache.out_shape.clone(),
        }
        .into());
    }
    let batch = cache.batch();
    let inv_tau = 1.0 / tau;
    let (xd, yd, cd) = (x.data(), pooled.output.data(), cot.data());
    let mut out = Tensor::<T>::zeros(x.shape());
    let od = out.data_mut();
    cache.visit(|o, i, wi| {
        for b in 0..batch {
            let w = cache.weights[wi * batch + b];
            let g = w * (T::one() + (xd[i * batch + b] - yd[o * batch + b]).scale(inv_tau));
            od[i * batch + b] += cd[o * batch + b] * g;
        }
    });
    Ok(out)
}

/// Reverse pass through `v = softmax_pool_vjp(x, c)` given an upstream cotangent `psi` on `v`.
/// Returns `(d/dx <psi, v>, d/dc <psi, v>)`.
pub fn softmax_pool_vjp_reverse<T: Scalar>(
    x: &Tensor<T>,
    pooled: &Pooled<T>,
    cot: &Tensor<T>,
    psi: &Tensor<T>,
    tau: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let cache = &pooled.cache;
    if psi.shape() != x.shape() || cot.shape() != cache.out_shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_pool_vjp_reverse",
            left: psi.shape().to_vec(),
            right: x.shape().to_vec(),
        }
        .into());
    }
    let batch = cache.batch();
    let inv_tau = 1.0 / tau;
    let (xd, yd, cd, pd) = (x.data(), pooled.output.data(), cot.data(), psi.data());
    let n_out = cot.len();
    // per-window sums  S_g = sum psi_i g_i,  S_w = sum psi_i w_i
    let mut sg = vec![T::zero(); n_out];
    let mut sw = vec![T::zero(); n_out];
    cache.visit(|o, i, wi| {
        for b in 0..batch {
            let w = cache.weights[wi * batch + b];
            let g = w * (T::one() + (xd[i * batch + b] - yd[o * batch + b]).scale(inv_tau));
            sg[o * batch + b] += pd[i * batch + b] * g;
            sw[o * batch + b] += pd[i * batch + b] * w;
        }
    });
    let mut dx = Tensor::<T>::zeros(x.shape());
    let dxd = dx.data_mut();
    cache.visit(|o, i, wi| {
        for b in 0..batch {
            let (ob, ib) = (o * batch + b, i * batch + b);
            let w = cache.weights[wi * batch + b];
            let g = w * (T::one() + (xd[ib] - yd[ob]).scale(inv_tau));
            let p = pd[ib];
            let term = p * g - w * sg[ob] + p * w - g * sw[ob];
            dxd[ib] += cd[ob] * term.scale(inv_tau);
        }
    });
    let dc = Tensor::from_vec(cot.shape(), sg)?;
    Ok((dx, dc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        pool: Option<PoolSpec>,
    },
}

fn one() -> usize {
    1
}

fn default_tau() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkKind {
    Mlp,
    Cnn,
}

/// Architecture: an input shape, hidden layers, and a dense readout as the last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `[features]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl NetworkSpec {
    /// Fully connected net from layer sizes including input and output, e.g. `[6, 4, 4, 4]`.
    pub fn mlp(sizes: &[usize], activation: Activation) -> Self {
        Self {
            input: vec![sizes[0]],
            layers: sizes[1..].iter().map(|&units| LayerSpec::Dense { units }).collect(),
            activation,
            tau: 1.0,
        }
    }

    pub fn kind(&self) -> NetworkKind {
        if self.layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
            NetworkKind::Cnn
        } else {
            NetworkKind::Mlp
        }
    }

    /// Stable text form used for hashing and checkpoints.
    pub fn canonical(&self) -> String {
        let mut s = format!("input={:?};activation={:?};tau={:e}", self.input, self.activation, self.tau);
        for l in &self.layers {
            match l {
                LayerSpec::Dense { units } => s.push_str(&format!(";dense({units})")),
                LayerSpec::Conv { channels, kernel, stride, padding, pool } => {
                    s.push_str(&format!(";conv({channels},{kernel},{stride},{padding}"));
                    if let Some(p) = pool {
                        s.push_str(&format!(",pool({},{})", p.window, p.stride));
                    }
                    s.push(')');
                }
            }
        }
        s
    }
}

/// Resolved per-layer geometry.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense,
    Conv { geom: ConvGeometry, kernel: usize, conv_hw: (usize, usize), pool: Option<PoolSpec> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub kind: LayerKind,
    /// State shape without the batch axis.
    pub shape: Vec<usize>,
    pub weight_shape: Vec<usize>,
    pub bias_shape: Vec<usize>,
}

/// Validated network with resolved shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerInfo>,
}

fn with_batch(shape: &[usize], batch: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.push(batch);
    s
}

/// Forward drive of one layer plus whatever is needed to differentiate it.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub out: Tensor<T>,
    /// Convolution output before pooling.
    pub conv: Option<Tensor<T>>,
    pub pooled: Option<Pooled<T>>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if spec.layers.len() < 2 {
            return bad("need at least one hidden layer and a readout".into());
        }
        if !(spec.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", spec.tau));
        }
        if !matches!(spec.layers.last(), Some(LayerSpec::Dense { .. })) {
            return bad("the readout layer must be dense".into());
        }
        if spec.input.is_empty() || spec.input.contains(&0) {
            return bad(format!("bad input shape {:?}", spec.input));
        }
        let mut prev = spec.input.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let info = match *l {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return bad(format!("layer {} has zero units", i + 1));
                    }
                    let fan_in: usize = prev.iter().product();
                    LayerInfo {
                        kind: LayerKind::Dense,
                        shape: vec![units],
                        weight_shape: vec![units, fan_in],
                        bias_shape: vec![units],
                    }
                }
                LayerSpec::Conv { channels, kernel, stride, padding, pool } => {
                    let [ci, h, w] = prev[..] else {
                        return bad(format!("conv layer {} needs a [C, H, W] input, got {:?}", i + 1, prev));
                    };
                    let geom = ConvGeometry::new(stride, padding);
                    let (Some(ch), Some(cw)) = (geom.out_extent(h, kernel), geom.out_extent(w, kernel)) else {
                        return bad(format!("conv layer {} kernel {kernel} does not fit {h}x{w}", i + 1));
                    };
                    let (oh, ow) = match pool {
                        None => (ch, cw),
                        Some(p) => match (p.out_extent(ch), p.out_extent(cw)) {
                            (Some(a), Some(b)) => (a, b),
                            _ => return bad(format!("pool of layer {} does not tile {ch}x{cw}", i + 1)),
                        },
                    };
                    LayerInfo {
                        kind: LayerKind::Conv { geom, kernel, conv_hw: (ch, cw), pool },
                        shape: vec![channels, oh, ow],
                        weight_shape: vec![channels, ci, kernel, kernel],
                        bias_shape: vec![channels],
                    }
                }
            };
            prev = info.shape.clone();
            layers.push(info);
        }
        Ok(Self { spec, layers })
    }

    /// Number of parameterised layers, readout included.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map(|l| l.shape[0]).unwrap_or(0)
    }

    pub fn activation(&self) -> Activation {
        self.spec.activation
    }

    /// Input shape of layer `i` (0-based parameter index).
    pub fn input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.spec.input
        } else {
            &self.layers[i - 1].shape
        }
    }

    pub fn zero_params(&self) -> Params {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: RealTensor::zeros(&l.weight_shape),
                    bias: RealTensor::zeros(&l.bias_shape),
                })
                .collect(),
        }
    }

    /// Uniform weights on `+- gain * sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, gain: f64, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.zero_params();
        for (info, p) in self.layers.iter().zip(&mut params.layers) {
            let (fan_in, fan_out) = match info.weight_shape[..] {
                [o, i] => (i, o),
                [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
                _ => unreachable!(),
            };
            let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in p.weight.data_mut() {
                *w = rng.random_range(-bound..=bound);
            }
        }
        params
    }

    pub fn check_params(&self, params: &Params) -> Result<()> {
        if params.layers.len() != self.layers.len() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} parameter layers, got {}",
                self.layers.len(),
                params.layers.len()
            )));
        }
        for (info, p) in self.layers.iter().zip(&params.layers) {
            if p.weight.shape() != info.weight_shape.as_slice() || p.bias.shape() != info.bias_shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "params",
                    left: p.weight.shape().to_vec(),
                    right: info.weight_shape.clone(),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Drive `W_i * input` (pooled for conv layers), without bias.
    pub fn layer_forward<T: Scalar>(&self, params: &Params, i: usize, input: &Tensor<T>) -> Result<Forward<T>> {
        let info = &self.layers[i];
        let w = &params.layers[i].weight;
        let batch = *input.shape().last().unwrap_or(&1);
        match &info.kind {
            LayerKind::Dense => {
                let out = if input.shape().len() == 2 {
                    real_matmul(w, input, false)?
                } else {
                    let flat = input.clone().reshape(&[input.len() / batch, batch])?;
                    real_matmul(w, &flat, false)?
                };
                Ok(Forward { out, conv: None, pooled: None })
            }
            LayerKind::Conv { geom, pool, .. } => {
                let z = conv2d(w, input, *geom)?;
                match pool {
                    None => Ok(Forward { out: z, conv: None, pooled: None }),
                    Some(p) => {
                        let pooled = softmax_pool(&z, *p, self.spec.tau)?;
                        Ok(Forward { out: pooled.output.clone(), conv: Some(z), pooled: Some(pooled) })
                    }
                }
            }
        }
    }

    /// Vector-Jacobian product of [`Network::layer_forward`] with respect to its input.
    pub fn layer_feedback<T: Scalar>(&self, params: &Params, i: usize, fwd: &Forward<T>, cot: &Tensor<T>) -> Result<Tensor<T>> {
        let info = &self.layers[i];
        let w = &params.layers[i].weight;
        let batch = *cot.shape().last().unwrap_or(&1);
        let in_shape = with_batch(self.input_shape(i), batch);
        match &info.kind {
            LayerKind::Dense => Ok(real_matmul(w, cot, true)?.reshape(&in_shape)?),
            LayerKind::Conv { geom, .. } => {
                let v = self.pool_vjp(fwd, cot)?;
                Ok(conv2d_transpose(w, &v, *geom, (in_shape[1], in_shape[2]))?)
            }
        }
    }

    /// Pulls a cotangent on a conv layer's output back through its pooling.
    pub fn pool_vjp<T: Scalar>(&self, fwd: &Forward<T>, cot: &Tensor<T>) -> Result<Tensor<T>> {
        match (&fwd.conv, &fwd.pooled) {
            (Some(z), Some(p)) => softmax_pool_vjp(z, p, cot, self.spec.tau),
            _ => Ok(cot.clone()),
        }
    }

    /// `sum_b` of the weight gradient of `<cot, layer_forward(input)>`.
    pub fn layer_weight_grad<T: Scalar>(&self, i: usize, fwd: &Forward<T>, input: &Tensor<T>, cot: &Tensor<T>) -> Result<Tensor<T>> {
        let info = &self.layers[i];
        let batch = *cot.shape().last().unwrap_or(&1);
        match &info.kind {
            LayerKind::Dense => Ok(outer_sum(cot, input, batch)?),
            LayerKind::Conv { geom, kernel, .. } => {
                let v = self.pool_vjp(fwd, cot)?;
                Ok(conv2d_weight_grad(&v, input, (*kernel, *kernel), *geom)?)
            }
        }
    }

    /// Adds a per-unit (dense) or per-channel (conv) bias to a batched tensor.
    pub fn add_bias<T: Scalar>(&self, i: usize, t: &mut Tensor<T>, bias: &RealTensor) {
        let channels = bias.len();
        let per_channel = t.len() / channels;
        for (c, chunk) in t.data_mut().chunks_mut(per_channel).enumerate() {
            let b = T::from_real(bias.data()[c]);
            for v in chunk {
                *v += b;
            }
        }
        let _ = i;
    }

    /// Sum over batch (and space) matching the bias shape.
    pub fn bias_sum<T: Scalar>(&self, i: usize, t: &Tensor<T>) -> Tensor<T> {
        let channels = self.layers[i].bias_shape[0];
        let per_channel = t.len() / channels;
        let data = t.data().chunks(per_channel).map(|c| c.iter().copied().sum()).collect();
        Tensor::from_vec(&[channels], data).expect("bias shape")
    }
}

/// Weights and bias of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-layer tensors shaped like the network parameters (weights, gradients, momenta).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<LayerParams<T>>,
}

pub type Params = ParamSet<f64>;

impl<T: Scalar> ParamSet<T> {
    pub fn zeros_like<U: Scalar>(other: &ParamSet<U>) -> Self {
        ParamSet {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams { weight: l.weight.map(&f), bias: l.bias.map(&f) })
                .collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: T, x: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&x.layers) {
            a.weight.axpy(alpha, &b.weight).expect("matching parameter shapes");
            a.bias.axpy(alpha, &b.bias).expect("matching parameter shapes");
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All values, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend_from_slice(l.weight.data());
            v.extend_from_slice(l.bias.data());
        }
        v
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_sqr() + l.bias.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_complex(&self) -> ParamSet<C64> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams { weight: l.weight.to_complex(), bias: l.bias.to_complex() })
                .collect(),
        }
    }

    pub fn same_shape<U: Scalar>(&self, other: &ParamSet<U>) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
            })
    }

    /// Reads coordinate `c` (see [`ParamIndex`]).
    pub fn get(&self, c: ParamIndex) -> T {
        let l = &self.layers[c.layer];
        if c.bias {
            l.bias.data()[c.index]
        } else {
            l.weight.data()[c.index]
        }
    }

    pub fn set(&mut self, c: ParamIndex, v: T) {
        let l = &mut self.layers[c.layer];
        if c.bias {
            l.bias.data_mut()[c.index] = v;
        } else {
            l.weight.data_mut()[c.index] = v;
        }
    }

    pub fn indices(&self) -> Vec<ParamIndex> {
        let mut out = Vec::with_capacity(self.n_params());
        for (layer, l) in self.layers.iter().enumerate() {
            out.extend((0..l.weight.len()).map(|index| ParamIndex { layer, bias: false, index }));
            out.extend((0..l.bias.len()).map(|index| ParamIndex { layer, bias: true, index }));
        }
        out
    }
}

impl ParamSet<C64> {
    pub fn re(&self) -> Params {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams { weight: l.weight.re(), bias: l.bias.re() })
                .collect(),
        }
    }

    pub fn im(&self) -> Params {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams { weight: l.weight.im(), bias: l.bias.im() })
                .collect(),
        }
    }
}

/// Address of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamIndex {
    pub layer: usize,
    pub bias: bool,
    pub index: usize,
}

/// Pre-activations and activities of one layer. For the readout these are logits
/// and softmax probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub pre: Tensor<T>,
    pub act: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState<T> {
    pub layers: Vec<LayerState<T>>,
    pub diverged: bool,
}

/// Units whose magnitude exceeds this mark the state diverged.
pub const DIVERGENCE_SENTINEL: f64 = 1e6;

impl<T: Scalar> NetworkState<T> {
    /// All-zero state for the given per-layer shapes and batch size.
    pub fn zeros(shapes: &[Vec<usize>], batch: usize) -> Self {
        Self {
            layers: shapes
                .iter()
                .map(|s| {
                    let shape = with_batch(s, batch);
                    LayerState { pre: Tensor::zeros(&shape), act: Tensor::zeros(&shape) }
                })
                .collect(),
            diverged: false,
        }
    }

    pub fn for_network(net: &Network, batch: usize) -> Self {
        let shapes: Vec<Vec<usize>> = net.layers.iter().map(|l| l.shape.clone()).collect();
        Self::zeros(&shapes, batch)
    }

    pub fn batch(&self) -> usize {
        self.layers[0].act.shape().last().copied().unwrap_or(1)
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.layers.last().expect("non-empty state").act
    }

    pub fn to_complex(&self) -> NetworkState<C64> {
        NetworkState {
            layers: self
                .layers
                .iter()
                .map(|l| LayerState { pre: l.pre.to_complex(), act: l.act.to_complex() })
                .collect(),
            diverged: self.diverged,
        }
    }

    /// Flags the state if any activity is non-finite or beyond the sentinel.
    pub fn check_divergence(&mut self) -> bool {
        if !self.diverged {
            self.diverged = self.layers.iter().any(|l| {
                l.act.data().iter().chain(l.pre.data()).any(|v| !v.is_finite() || v.abs() > DIVERGENCE_SENTINEL)
            });
        }
        self.diverged
    }

    /// Largest per-sample Euclidean distance between activities; `+inf` if either is diverged.
    pub fn distance(&self, other: &Self) -> f64 {
        if self.diverged || other.diverged {
            return f64::INFINITY;
        }
        let batch = self.batch();
        let mut per = vec![0.0; batch];
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (i, (x, y)) in a.act.data().iter().zip(b.act.data()).enumerate() {
                per[i % batch] += (*x - *y).norm_sqr();
            }
        }
        let d = per.into_iter().fold(0.0, f64::max).sqrt();
        if d.is_finite() {
            d
        } else {
            f64::INFINITY
        }
    }

    /// Componentwise mean of several states.
    pub fn mean(states: &[Self]) -> Self {
        let mut out = states[0].clone();
        let k = 1.0 / states.len() as f64;
        for s in &states[1..] {
            for (a, b) in out.layers.iter_mut().zip(&s.layers) {
                a.pre.axpy(T::one(), &b.pre).expect("same shapes");
                a.act.axpy(T::one(), &b.act).expect("same shapes");
            }
            out.diverged |= s.diverged;
        }
        for l in &mut out.layers {
            l.pre.map_inplace(|v| v.scale(k));
            l.act.map_inplace(|v| v.scale(k));
        }
        out
    }
}

impl NetworkState<C64> {
    pub fn conj(&self) -> Self {
        NetworkState {
            layers: self
                .layers
                .iter()
                .map(|l| LayerState { pre: l.pre.conj(), act: l.act.conj() })
                .collect(),
            diverged: self.diverged,
        }
    }

    pub fn re(&self) -> NetworkState<f64> {
        NetworkState {
            layers: self
                .layers
                .iter()
                .map(|l| LayerState { pre: l.pre.re(), act: l.act.re() })
                .collect(),
            diverged: self.diverged,
        }
    }
}

/// Softmax over the class axis of `[classes, batch]` logits; `None` if the normaliser vanishes.
pub fn softmax_classes<T: Scalar>(logits: &Tensor<T>) -> Option<Tensor<T>> {
    let batch = *logits.shape().last()?;
    let classes = logits.len() / batch;
    let d = logits.data();
    let mut out = Tensor::<T>::zeros(logits.shape());
    let od = out.data_mut();
    for b in 0..batch {
        let m = (0..classes).map(|c| d[c * batch + b].re()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = T::zero();
        for c in 0..classes {
            let e = (d[c * batch + b] - T::from_real(m)).exp();
            od[c * batch + b] = e;
            sum += e;
        }
        if !sum.is_finite() || sum.abs() < POLE_GUARD {
            return None;
        }
        for c in 0..classes {
            od[c * batch + b] = od[c * batch + b] / sum;
        }
    }
    Some(out)
}

/// One-hot `[classes, batch]` targets.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<RealTensor> {
    let batch = labels.len();
    let mut y = RealTensor::zeros(&[classes, batch]);
    for (b, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(ModelError::BadLabel { label: l, classes });
        }
        y.data_mut()[l * batch + b] = 1.0;
    }
    Ok(y)
}

/// Batch-mean cross entropy `-ln s_L[y]` of the readout probabilities.
pub fn loss<T: Scalar>(state: &NetworkState<T>, labels: &[usize]) -> Result<T> {
    let out = state.output();
    let batch = labels.len();
    let mut total = T::zero();
    for (b, &l) in labels.iter().enumerate() {
        let p = out.data()[l * batch + b];
        if p.abs() <= 1e-12 {
            return Err(ModelError::LogOfZero(p.abs()));
        }
        total -= p.ln();
    }
    Ok(total.scale(1.0 / batch as f64))
}

/// Energy of a fully connected symmetric net: `1/2 sum s_i^2 - 1/2 sum_{i != j} w_ij sigma_i sigma_j - sum b_i sigma_i`.
pub fn hopfield_energy_full(w: &RealTensor, b: &RealTensor, s: &ComplexTensor, act: Activation) -> Result<C64> {
    let n = s.len();
    if w.shape() != [n, n] || b.len() != n {
        return Err(TensorError::ShapeMismatch { op: "hopfield_energy_full", left: w.shape().to_vec(), right: s.shape().to_vec() }.into());
    }
    let sig = act.apply_tensor(s).ok_or(ModelError::Diverged)?;
    let (sd, gd) = (s.data(), sig.data());
    let mut e = C64::new(0.0, 0.0);
    for i in 0..n {
        e += sd[i] * sd[i] * 0.5 - gd[i] * b.data()[i];
        for j in 0..n {
            if i != j {
                e -= gd[i] * gd[j] * (0.5 * w.data()[i * n + j]);
            }
        }
    }
    Ok(e)
}

/// Layered energy over the hidden layers with the state's pre-activations `u_l` and
/// activities `sigma(u_l)`: `sum_l 1/2 |u_l|^2 - sigma(u_l) . W_l sigma(u_{l-1}) - b_l . sigma(u_l)`
/// with `sigma(u_0) = x`, averaged over the batch.
pub fn hopfield_energy<T: Scalar>(net: &Network, params: &Params, x: &RealTensor, state: &NetworkState<T>) -> Result<T> {
    let batch = state.batch();
    let hidden = net.depth() - 1;
    let mut e = T::zero();
    let xt: Tensor<T> = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| T::from_real(v)).collect())?;
    for i in 0..hidden {
        let l = &state.layers[i];
        let input = if i == 0 { &xt } else { &state.layers[i - 1].act };
        let mut drive = net.layer_forward(params, i, input)?.out;
        net.add_bias(i, &mut drive, &params.layers[i].bias);
        e += l.pre.dot(&l.pre)?.scale(0.5) - l.act.dot(&drive)?;
    }
    Ok(e.scale(1.0 / batch as f64))
}

/// `F = E + beta * loss`.
pub fn total_energy(
    net: &Network,
    params: &Params,
    x: &RealTensor,
    state: &NetworkState<C64>,
    beta: C64,
    labels: &[usize],
) -> Result<C64> {
    Ok(hopfield_energy(net, params, x, state)? + beta * loss(state, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn shifted_sigmoid_values() {
        let z = ComplexTensor::from_vec(&[2], vec![c(0.5, 0.0), c(0.0, 0.0)]).unwrap();
        let s = shifted_sigmoid(&z).unwrap();
        assert_eq!(s.data()[0], c(0.5, 0.0));
        let expect = 1.0 / (1.0 + 2f64.exp());
        assert_abs_diff_eq!(s.data()[1].re, expect, epsilon = 1e-15);
        assert_abs_diff_eq!(expect, 0.11920, epsilon = 1e-5);
        assert!(s.is_real());
    }

    #[test]
    fn dsilu_values() {
        let z = ComplexTensor::from_vec(&[3], vec![c(1.0, 0.0), c(0.0, 0.0), c(2.0, 0.0)]).unwrap();
        let s = dsilu(&z).unwrap();
        assert_abs_diff_eq!(s.data()[0].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1].re, 1.0 / (1.0 + 2f64.exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[2].re, 1.0 / (1.0 + (-2f64).exp()), epsilon = 1e-15);
    }

    #[test]
    fn pole_is_flagged() {
        // shifted sigmoid has poles where -4z + 2 = i pi
        let z = c(0.5, -std::f64::consts::PI / 4.0);
        assert!(Activation::ShiftedSigmoid.apply(z).is_none());
        assert!(Activation::ShiftedSigmoid.apply(z + c(0.0, 1e-3)).is_some());
        let z = c(0.0, std::f64::consts::PI);
        assert!(Activation::Dsilu.apply(z).is_none());
    }

    #[test]
    fn activation_derivatives_match_difference_quotients() {
        let h = 1e-6;
        for act in [Activation::ShiftedSigmoid, Activation::Dsilu, Activation::Identity] {
            for &x in &[-1.3, 0.0, 0.4, 2.2] {
                let fd = (act.apply(x + h).unwrap() - act.apply(x - h).unwrap()) / (2.0 * h);
                assert_abs_diff_eq!(act.derivative(x).unwrap(), fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn holomorphy_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for act in [Activation::ShiftedSigmoid, Activation::Dsilu] {
            for _ in 0..100 {
                let z = c(rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5));
                let f = |z: C64| act.apply(z).unwrap();
                let dx = (f(z + c(h, 0.0)) - f(z - c(h, 0.0))) / (2.0 * h);
                let dy = (f(z + c(0.0, h)) - f(z - c(0.0, h))) / (2.0 * h);
                let dzbar = (dx + C64::i() * dy) * 0.5;
                assert!(dzbar.norm() < 1e-6, "{act:?} at {z}: {}", dzbar.norm());
            }
        }
    }

    fn pool_input(vals: &[f64]) -> Tensor<C64> {
        Tensor::from_vec(&[1, 1, vals.len()], vals.iter().map(|&v| c(v, 0.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_pool_limits() {
        let p = PoolSpec { window: 1, stride: 1 };
        let x = pool_input(&[3.0]);
        assert_eq!(softmax_pool(&x, p, 1.0).unwrap().output.data()[0], c(3.0, 0.0));
        // 1 x 2 windows via a 2x2 window over a 2x2 patch
        let p2 = PoolSpec { window: 2, stride: 2 };
        let sq = |v: [f64; 4]| Tensor::from_vec(&[1, 2, 2], v.iter().map(|&a| c(a, 0.0)).collect()).unwrap();
        let eq = softmax_pool(&sq([1.5; 4]), p2, 0.7).unwrap();
        assert_abs_diff_eq!(eq.output.data()[0].re, 1.5, epsilon = 1e-15);
        let hard = softmax_pool(&sq([0.0, 10.0, 0.0, 0.0]), p2, 0.01).unwrap();
        assert_abs_diff_eq!(hard.output.data()[0].re, 10.0, epsilon = 1e-9);
        let soft = softmax_pool(&sq([0.0, 10.0, 0.0, 10.0]), p2, 1e6).unwrap();
        assert_abs_diff_eq!(soft.output.data()[0].re, 5.0, epsilon = 1e-4);
        let mean = softmax_pool(&sq([1.0, 2.0, 3.0, 6.0]), p2, 1e9).unwrap();
        assert_abs_diff_eq!(mean.output.data()[0].re, 3.0, epsilon = 1e-8);
        let max = softmax_pool(&sq([1.0, 2.0, 3.0, 6.0]), p2, 1e-3).unwrap();
        assert_abs_diff_eq!(max.output.data()[0].re, 6.0, epsilon = 1e-9);
        assert!(softmax_pool(&sq([0.0; 4]), p2, 0.0).is_err());
    }

    #[test]
    fn unpool_uses_cached_weights() {
        let p2 = PoolSpec { window: 2, stride: 2 };
        let x = Tensor::from_vec(&[1, 2, 2], vec![c(1.0, 0.0); 4]).unwrap();
        let pooled = softmax_pool(&x, p2, 1.0).unwrap();
        let up = softmax_unpool(&pooled.output, &pooled.cache).unwrap();
        for v in up.data() {
            assert_abs_diff_eq!(v.re, 0.25, epsilon = 1e-15);
        }
        let x = Tensor::from_vec(&[1, 2, 2], vec![c(0.0, 0.0), c(9.0, 0.0), c(1.0, 0.0), c(2.0, 0.0)]).unwrap();
        let pooled = softmax_pool(&x, p2, 1e-3).unwrap();
        let up = softmax_unpool(&Tensor::from_vec(&[1, 1, 1], vec![c(1.0, 0.0)]).unwrap(), &pooled.cache).unwrap();
        assert_abs_diff_eq!(up.data()[1].re, 1.0, epsilon = 1e-12);
        let x = Tensor::from_vec(&[1, 2, 2], vec![c(0.3, 0.1), c(-1.0, 0.2), c(0.7, 0.0), c(2.0, -0.4)]).unwrap();
        let pooled = softmax_pool(&x, p2, 0.5).unwrap();
        let up = softmax_unpool(&pooled.output, &pooled.cache).unwrap();
        let total: C64 = up.data().iter().sum();
        assert!((total - pooled.output.data()[0]).norm() < 1e-14);
    }

    #[test]
    fn pool_vjp_matches_difference_quotient() {
        let p = PoolSpec { window: 2, stride: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[2, 3, 3, 2], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cot = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tau = 0.6;
        let pooled = softmax_pool(&x, p, tau).unwrap();
        let g = softmax_pool_vjp(&x, &pooled, &cot, tau).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp = softmax_pool(&xp, p, tau).unwrap().output.dot(&cot).unwrap();
            let fm = softmax_pool(&xm, p, tau).unwrap().output.dot(&cot).unwrap();
            assert_abs_diff_eq!(g.data()[i], (fp - fm) / (2.0 * h), epsilon = 1e-8);
        }
        // second-order reverse pass
        let psi = Tensor::from_vec(&[2, 3, 3, 2], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (dx, dc) = softmax_pool_vjp_reverse(&x, &pooled, &cot, &psi, tau).unwrap();
        let phi = |x: &RealTensor, c: &RealTensor| {
            let pl = softmax_pool(x, p, tau).unwrap();
            softmax_pool_vjp(x, &pl, c, tau).unwrap().dot(&psi).unwrap()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            assert_abs_diff_eq!(dx.data()[i], (phi(&xp, &cot) - phi(&xm, &cot)) / (2.0 * h), epsilon = 1e-7);
        }
        for i in 0..cot.len() {
            let mut cp = cot.clone();
            cp.data_mut()[i] += h;
            let mut cm = cot.clone();
            cm.data_mut()[i] -= h;
            assert_abs_diff_eq!(dc.data()[i], (phi(&x, &cp) - phi(&x, &cm)) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn full_energy_examples() {
        let w = RealTensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let b = RealTensor::zeros(&[2]);
        let s = ComplexTensor::from_vec(&[2], vec![c(1.0, 0.0); 2]).unwrap();
        let e = hopfield_energy_full(&w, &b, &s, Activation::Identity).unwrap();
        assert_abs_diff_eq!(e.re, 0.0, epsilon = 1e-15);

        // three sigmoid units at rest: E = -1/2 sum_{i != j} w_ij sigma(0)^2
        let w3 = RealTensor::from_vec(&[3, 3], vec![0.0, 0.5, -1.0, 0.5, 0.0, 2.0, -1.0, 2.0, 0.0]).unwrap();
        let s0 = ComplexTensor::zeros(&[3]);
        let e = hopfield_energy_full(&w3, &RealTensor::zeros(&[3]), &s0, Activation::ShiftedSigmoid).unwrap();
        let g = 1.0 / (1.0 + 2f64.exp());
        let hand = -0.5 * g * g * (0.5 + -1.0 + 0.5 + 2.0 + -1.0 + 2.0);
        assert_abs_diff_eq!(e.re, hand, epsilon = 1e-15);

        let s = ComplexTensor::from_vec(&[3], vec![c(1.0, 0.5), c(-2.0, 0.0), c(0.3, -0.1)]).unwrap();
        let e = hopfield_energy_full(&RealTensor::zeros(&[3, 3]), &RealTensor::zeros(&[3]), &s, Activation::ShiftedSigmoid).unwrap();
        let half_sq: C64 = s.data().iter().map(|z| z * z * 0.5).sum();
        assert!((e - half_sq).norm() < 1e-15);
    }

    fn small_state(net: &Network, batch: usize) -> NetworkState<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = NetworkState::<C64>::for_network(net, batch);
        let last = s.layers.len() - 1;
        for (i, l) in s.layers.iter_mut().enumerate() {
            for v in l.pre.data_mut() {
                *v = c(rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2));
            }
            if i < last {
                l.act = net.activation().apply_tensor(&l.pre).unwrap();
            } else {
                l.act = softmax_classes(&l.pre).unwrap();
            }
        }
        s
    }

    #[test]
    fn loss_examples_and_energy_linearity() {
        let net = Network::new(NetworkSpec::mlp(&[3, 4, 3], Activation::ShiftedSigmoid)).unwrap();
        let mut s = small_state(&net, 1);
        let labels = [1usize];
        s.layers[1].act = Tensor::from_vec(&[3, 1], vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert_abs_diff_eq!(loss(&s, &labels).unwrap().norm(), 0.0, epsilon = 1e-15);
        s.layers[1].act = Tensor::full(&[3, 1], c(1.0 / 3.0, 0.0));
        assert_abs_diff_eq!(loss(&s, &labels).unwrap().re, 3f64.ln(), epsilon = 1e-15);
        s.layers[1].act = Tensor::from_vec(&[3, 1], vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!(matches!(loss(&s, &labels), Err(ModelError::LogOfZero(_))));

        let params = net.init_params(1.0, 5);
        let x = RealTensor::from_vec(&[3, 1], vec![0.2, -0.4, 1.0]).unwrap();
        let s = small_state(&net, 1);
        let e = hopfield_energy(&net, &params, &x, &s).unwrap();
        let f0 = total_energy(&net, &params, &x, &s, C64::new(0.0, 0.0), &labels).unwrap();
        assert_eq!(f0, e);
        let (b1, b2) = (c(0.3, -0.2), c(-0.1, 0.7));
        let f1 = total_energy(&net, &params, &x, &s, b1, &labels).unwrap();
        let f2 = total_energy(&net, &params, &x, &s, b2, &labels).unwrap();
        let l = loss(&s, &labels).unwrap();
        assert!((f1 + f2 - f0 * 2.0 - (b1 + b2) * l).norm() < 1e-12);
    }

    #[test]
    fn layered_energy_weight_derivative_is_activity_product() {
        let net = Network::new(NetworkSpec::mlp(&[3, 4, 2, 3], Activation::ShiftedSigmoid)).unwrap();
        let params = net.init_params(1.0, 9);
        let x = RealTensor::from_vec(&[3, 1], vec![0.5, -0.1, 0.9]).unwrap();
        let s = small_state(&net, 1);
        let h = 1e-6;
        // dE/dW_2[i, j] = -sigma(u_2)_i sigma(u_1)_j
        for idx in 0..8 {
            let mut pp = params.clone();
            pp.layers[1].weight.data_mut()[idx] += h;
            let mut pm = params.clone();
            pm.layers[1].weight.data_mut()[idx] -= h;
            let fd = (hopfield_energy(&net, &pp, &x, &s).unwrap() - hopfield_energy(&net, &pm, &x, &s).unwrap()) / (2.0 * h);
            let (i, j) = (idx / 4, idx % 4);
            let expect = -s.layers[1].act.data()[i] * s.layers[0].act.data()[j];
            assert!((fd - expect).norm() < 1e-6 * expect.norm().max(1.0), "{fd} vs {expect}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(Network::new(NetworkSpec::mlp(&[4, 3], Activation::Identity)).is_err());
        let mut spec = NetworkSpec::mlp(&[4, 3, 2], Activation::Identity);
        spec.tau = 0.0;
        assert!(Network::new(spec).is_err());
        let cnn = NetworkSpec {
            input: vec![1, 6, 6],
            layers: vec![
                LayerSpec::Conv { channels: 2, kernel: 3, stride: 1, padding: 1, pool: Some(PoolSpec { window: 2, stride: 2 }) },
                LayerSpec::Dense { units: 5 },
                LayerSpec::Dense { units: 3 },
            ],
            activation: Activation::Dsilu,
            tau: 1.0,
        };
        let net = Network::new(cnn.clone()).unwrap();
        assert_eq!(net.layers[0].shape, vec![2, 3, 3]);
        assert_eq!(net.layers[1].weight_shape, vec![5, 18]);
        assert_eq!(net.spec.kind(), NetworkKind::Cnn);
        let mut bad = cnn;
        bad.layers[0] = LayerSpec::Conv { channels: 2, kernel: 3, stride: 1, padding: 0, pool: Some(PoolSpec { window: 3, stride: 3 }) };
        assert!(Network::new(bad).is_err());
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let net = Network::new(NetworkSpec::mlp(&[6, 4, 4, 4], Activation::ShiftedSigmoid)).unwrap();
        let a = net.init_params(1.0, 1);
        assert_eq!(a, net.init_params(1.0, 1));
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }
}
