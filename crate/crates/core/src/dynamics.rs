//! Layer-wise synchronous dynamics and fixed-point settling.
//!
//! A hidden layer updates as
//! `s_l <- sigma(W_l s_{l-1} + J_{l+1}^T s_{l+1} + b_l + eta_l)`, where `J_{l+1}^T`
//! is the exact vector-Jacobian product of the next layer's forward drive
//! (a plain transpose for dense layers). The last hidden layer receives
//! `beta * W_L^T (y - s_L)` instead, and the readout is
//! `s_L = softmax(W_L s_{L-1} + b_L)`. All layers read the previous step's values.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{
    one_hot, softmax_classes, LayerState, ModelError, Network, NetworkState, ParamSet, Params,
};
use crate::tensor::{RealTensor, Scalar, Tensor, C64};

/// Circle of teaching signals `beta_k = |beta| e^{2 i pi k / N}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NudgePath {
    pub radius: f64,
    pub n_points: usize,
}

impl NudgePath {
    pub fn new(radius: f64, n_points: usize) -> Result<Self, ModelError> {
        if n_points < 2 {
            return Err(ModelError::InvalidSpec(format!("need at least 2 nudging points, got {n_points}")));
        }
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(ModelError::InvalidSpec(format!("bad nudging radius {radius}")));
        }
        Ok(Self { radius, n_points })
    }

    pub fn phase(&self, k: usize) -> f64 {
        2.0 * PI * k as f64 / self.n_points as f64
    }

    pub fn point(&self, k: usize) -> C64 {
        C64::from_polar(self.radius, self.phase(k))
    }

    pub fn points(&self) -> Vec<C64> {
        (0..self.n_points).map(|k| self.point(k)).collect()
    }

    /// Continuous parameterisation `|beta| e^{2 i pi t / period}`.
    pub fn at_time(&self, t: f64, period: f64) -> C64 {
        C64::from_polar(self.radius, 2.0 * PI * t / period)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SettleConfig {
    pub max_steps: usize,
    /// Stop once the step residual drops to this value; 0 runs exactly `max_steps`.
    pub residual_tol: f64,
    pub warm_start: bool,
    pub noise_std: f64,
    pub rng_seed: u64,
}

impl Default for SettleConfig {
    fn default() -> Self {
        Self { max_steps: 200, residual_tol: 1e-8, warm_start: true, noise_std: 0.0, rng_seed: 0 }
    }
}

impl SettleConfig {
    pub fn steps(max_steps: usize) -> Self {
        Self { max_steps, residual_tol: 0.0, ..Self::default() }
    }

    pub fn tol(max_steps: usize, residual_tol: f64) -> Self {
        Self { max_steps, residual_tol, ..Self::default() }
    }
}

/// Noise for one step. Each `(seed, phase, step, layer, sample)` gets its own stream,
/// so results do not depend on how settles are scheduled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepNoise {
    pub std: f64,
    pub seed: u64,
    pub phase: u64,
    pub step: u64,
}

impl StepNoise {
    pub const NONE: StepNoise = StepNoise { std: 0.0, seed: 0, phase: 0, step: 0 };

    pub fn is_active(&self) -> bool {
        self.std > 0.0
    }

    fn rng(&self, layer: usize, sample: usize) -> ChaCha8Rng {
        let mut h = splitmix(self.seed);
        for v in [self.phase, self.step, layer as u64, sample as u64] {
            h = splitmix(h ^ v);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Adds `std * N(0, 1)` to a batched `[.., batch]` tensor.
    pub fn perturb<T: Scalar>(&self, layer: usize, t: &mut Tensor<T>) {
        if !self.is_active() {
            return;
        }
        let batch = *t.shape().last().unwrap_or(&1);
        let units = t.len() / batch;
        let d = t.data_mut();
        for b in 0..batch {
            let mut rng = self.rng(layer, b);
            for u in 0..units {
                let z: f64 = StandardNormal.sample(&mut rng);
                d[u * batch + b] += T::from_real(self.std * z);
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A system with a parameter-dependent fixed point: the bound network problem or the toy model.
pub trait Equilibrium: Sync {
    fn params(&self) -> &Params;

    /// Same problem with different parameters.
    fn rebind(&self, params: Params) -> Self
    where
        Self: Sized;

    fn batch(&self) -> usize;

    fn initial_state<T: Scalar>(&self) -> NetworkState<T>;

    /// One synchronous update at teaching signal `beta`.
    fn step<T: Scalar>(&self, state: &NetworkState<T>, beta: T, noise: &StepNoise) -> NetworkState<T>;

    /// `dF/dtheta` at `state`, averaged over the batch.
    fn energy_grad<T: Scalar>(&self, state: &NetworkState<T>, beta: T) -> ParamSet<T>;

    /// Batch-mean loss at `state`.
    fn loss(&self, state: &NetworkState<f64>) -> f64;
}

#[derive(Clone, Debug)]
pub struct SettleResult<T> {
    pub state: NetworkState<T>,
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
    pub steps_used: usize,
}

impl<T> SettleResult<T> {
    pub fn final_residual(&self) -> f64 {
        self.residual_trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// `sqrt(sum |a_i - b_i|^2)`; `+inf` when either side is non-finite.
pub fn residual_norm<T: Scalar>(prev: &Tensor<T>, next: &Tensor<T>) -> f64 {
    let r = prev
        .data()
        .iter()
        .zip(next.data())
        .map(|(a, b)| (*a - *b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    if r.is_finite() {
        r
    } else {
        f64::INFINITY
    }
}

/// Iterates [`Equilibrium::step`] from `init` (or the problem's initial state) until the
/// residual reaches `cfg.residual_tol` or `cfg.max_steps` steps were taken.
/// `phase` selects the noise streams for this settle.
pub fn settle<P: Equilibrium, T: Scalar>(
    problem: &P,
    beta: T,
    cfg: &SettleConfig,
    init: Option<NetworkState<T>>,
    phase: u64,
) -> SettleResult<T> {
    let mut state = init.unwrap_or_else(|| problem.initial_state());
    let mut trace = Vec::with_capacity(cfg.max_steps);
    let mut converged = false;
    let mut steps_used = 0;
    for t in 0..cfg.max_steps.max(1) {
        let noise = StepNoise { std: cfg.noise_std, seed: cfg.rng_seed, phase, step: t as u64 };
        let next = problem.step(&state, beta, &noise);
        let r = state.distance(&next);
        trace.push(r);
        state = next;
        steps_used = t + 1;
        if state.diverged {
            break;
        }
        if cfg.residual_tol > 0.0 && r <= cfg.residual_tol {
            converged = true;
            break;
        }
    }
    if cfg.residual_tol == 0.0 && !state.diverged {
        converged = trace.last().is_some_and(|&r| r == 0.0);
    }
    let diverged = state.diverged;
    SettleResult { state, residual_trace: trace, converged, diverged, steps_used }
}

/// A network bound to one input batch and its labels.
#[derive(Clone, Debug)]
pub struct NetProblem<'a> {
    pub net: &'a Network,
    pub params: Params,
    pub x: &'a RealTensor,
    pub labels: &'a [usize],
    y: RealTensor,
    /// `W_1 x + b_1`, fixed while the input is clamped.
    drive: RealTensor,
}

impl<'a> NetProblem<'a> {
    /// `x` has the network input shape with a trailing batch axis.
    pub fn new(net: &'a Network, params: Params, x: &'a RealTensor, labels: &'a [usize]) -> Result<Self, ModelError> {
        net.check_params(&params)?;
        let mut expect = net.spec.input.clone();
        expect.push(labels.len());
        if x.shape() != expect.as_slice() {
            return Err(ModelError::InvalidSpec(format!(
                "input batch has shape {:?}, expected {:?}",
                x.shape(),
                expect
            )));
        }
        let y = one_hot(labels, net.n_classes())?;
        let mut drive = net.layer_forward(&params, 0, x)?.out;
        net.add_bias(0, &mut drive, &params.layers[0].bias);
        Ok(Self { net, params, x, labels, y, drive })
    }

    pub fn targets(&self) -> &RealTensor {
        &self.y
    }

    fn input_as<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.x.shape(), self.x.data().iter().map(|&v| T::from_real(v)).collect())
            .expect("same shape")
    }

    /// Class predictions from the readout of `state`.
    pub fn predictions(&self, state: &NetworkState<f64>) -> Vec<usize> {
        let out = state.output();
        let batch = self.labels.len();
        let classes = self.net.n_classes();
        (0..batch)
            .map(|b| {
                (0..classes)
                    .max_by(|&i, &j| out.data()[i * batch + b].total_cmp(&out.data()[j * batch + b]))
                    .unwrap_or(0)
            })
            .collect()
    }

    fn try_step<T: Scalar>(&self, old: &NetworkState<T>, beta: T, noise: &StepNoise) -> Option<NetworkState<T>> {
        let net = self.net;
        let params = &self.params;
        let depth = net.depth();
        let act = net.activation();
        // forward drives of layers 2..L from the previous activities
        let mut fwds = Vec::with_capacity(depth);
        fwds.push(None);
        for i in 1..depth {
            fwds.push(Some(net.layer_forward(params, i, &old.layers[i - 1].act).ok()?));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth - 1 {
            let mut pre = match &fwds[i] {
                None => Tensor::from_vec(self.drive.shape(), self.drive.data().iter().map(|&v| T::from_real(v)).collect())
                    .ok()?,
                Some(f) => {
                    let mut p = f.out.clone();
                    net.add_bias(i, &mut p, &params.layers[i].bias);
                    p
                }
            };
            let next = fwds[i + 1].as_ref().expect("layers above the first have drives");
            if i + 1 < depth - 1 {
                let fb = net.layer_feedback(params, i + 1, next, &old.layers[i + 1].act).ok()?;
                pre.axpy(T::one(), &fb).ok()?;
            } else if beta != T::zero() {
                // beta W_L^T (y - s_L)
                let mut err = old.layers[i + 1].act.scale(-T::one());
                for (e, &y) in err.data_mut().iter_mut().zip(self.y.data()) {
                    *e += T::from_real(y);
                }
                let fb = net.layer_feedback(params, i + 1, next, &err).ok()?;
                pre.axpy(beta, &fb).ok()?;
            }
            noise.perturb(i, &mut pre);
            let a = act.apply_tensor(&pre)?;
            layers.push(LayerState { pre, act: a });
        }
        let mut logits = fwds[depth - 1].as_ref()?.out.clone();
        net.add_bias(depth - 1, &mut logits, &params.layers[depth - 1].bias);
        let probs = softmax_classes(&logits)?;
        layers.push(LayerState { pre: logits, act: probs });
        let mut s = NetworkState { layers, diverged: false };
        s.check_divergence();
        Some(s)
    }
}

impl Equilibrium for NetProblem<'_> {
    fn params(&self) -> &Params {
        &self.params
    }

    fn rebind(&self, params: Params) -> Self {
        NetProblem::new(self.net, params, self.x, self.labels).expect("same shapes as the bound parameters")
    }

    fn batch(&self) -> usize {
        self.labels.len()
    }

    fn initial_state<T: Scalar>(&self) -> NetworkState<T> {
        NetworkState::for_network(self.net, self.batch())
    }

    fn step<T: Scalar>(&self, state: &NetworkState<T>, beta: T, noise: &StepNoise) -> NetworkState<T> {
        if state.diverged {
            return state.clone();
        }
        self.try_step(state, beta, noise).unwrap_or_else(|| {
            let mut s = state.clone();
            s.diverged = true;
            s
        })
    }

    fn energy_grad<T: Scalar>(&self, state: &NetworkState<T>, beta: T) -> ParamSet<T> {
        let net = self.net;
        let depth = net.depth();
        let inv_b = 1.0 / self.batch() as f64;
        let x = self.input_as::<T>();
        let mut grad = ParamSet::<T>::zeros_like(&self.params);
        for i in 0..depth {
            let input = if i == 0 { &x } else { &state.layers[i - 1].act };
            let fwd = net.layer_forward(&self.params, i, input).expect("validated shapes");
            let (cot, k) = if i + 1 < depth {
                (state.layers[i].act.clone(), T::from_real(-inv_b))
            } else {
                let mut err = state.layers[i].act.clone();
                for (e, &y) in err.data_mut().iter_mut().zip(self.y.data()) {
                    *e -= T::from_real(y);
                }
                (err, beta.scale(inv_b))
            };
            let w = net.layer_weight_grad(i, &fwd, input, &cot).expect("validated shapes");
            let b = net.bias_sum(i, &cot);
            grad.layers[i].weight = w.scale(k);
            grad.layers[i].bias = b.scale(k);
        }
        grad
    }

    fn loss(&self, state: &NetworkState<f64>) -> f64 {
        crate::model::loss(state, self.labels).unwrap_or(f64::INFINITY)
    }
}

/// One unit with `E = s^2/2 - theta s`, loss `(s - y)^2 / 2` and identity activation.
/// Its nudged fixed point is `s*(beta) = (theta + beta y) / (1 + beta)`; each step relaxes
/// a fraction `rate` of the way there (`rate = 1` settles in one step).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub params: Params,
    pub target: f64,
    pub rate: f64,
}

impl ToyModel {
    pub fn new(theta: f64, target: f64) -> Self {
        Self::with_rate(theta, target, 1.0)
    }

    pub fn with_rate(theta: f64, target: f64, rate: f64) -> Self {
        let params = ParamSet {
            layers: vec![crate::model::LayerParams {
                weight: RealTensor::zeros(&[0, 0]),
                bias: RealTensor::from_vec(&[1], vec![theta]).expect("one value"),
            }],
        };
        Self { params, target, rate }
    }

    pub fn theta(&self) -> f64 {
        self.params.layers[0].bias.data()[0]
    }

    /// `s*(beta)`.
    pub fn fixed_point(&self, beta: C64) -> C64 {
        (C64::from(self.theta()) + beta * self.target) / (1.0 + beta)
    }

    pub fn unit<T: Scalar>(state: &NetworkState<T>) -> T {
        state.layers[0].act.data()[0]
    }
}

impl Equilibrium for ToyModel {
    fn params(&self) -> &Params {
        &self.params
    }

    fn rebind(&self, params: Params) -> Self {
        Self { params, target: self.target, rate: self.rate }
    }

    fn batch(&self) -> usize {
        1
    }

    fn initial_state<T: Scalar>(&self) -> NetworkState<T> {
        NetworkState::zeros(&[vec![1]], 1)
    }

    fn step<T: Scalar>(&self, state: &NetworkState<T>, beta: T, noise: &StepNoise) -> NetworkState<T> {
        let s = Self::unit(state);
        let one = T::one();
        let r = T::from_real(self.rate);
        let target = (T::from_real(self.theta()) + beta * T::from_real(self.target)) / (one + beta);
        let mut next = Tensor::from_vec(&[1, 1], vec![(one - r) * s + r * target]).expect("one value");
        noise.perturb(0, &mut next);
        let mut out = NetworkState { layers: vec![LayerState { pre: next.clone(), act: next }], diverged: false };
        out.check_divergence();
        out
    }

    fn energy_grad<T: Scalar>(&self, state: &NetworkState<T>, _beta: T) -> ParamSet<T> {
        let mut g = ParamSet::<T>::zeros_like(&self.params);
        g.layers[0].bias.data_mut()[0] = -Self::unit(state);
        g
    }

    fn loss(&self, state: &NetworkState<f64>) -> f64 {
        let d = Self::unit(state) - self.target;
        0.5 * d * d
    }
}
