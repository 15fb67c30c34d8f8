//! Reference gradients and comparison metrics.
//!
//! The unrolled adjoint differentiates the loss after `T` free-phase steps
//! (`beta = 0`, no noise) by a hand-written reverse pass. Finite differences
//! re-settle the free phase at perturbed parameters.

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{settle, Equilibrium, NetProblem, SettleConfig, StepNoise, ToyModel};
use crate::model::{softmax_pool_vjp_reverse, LayerKind, NetworkState, ParamIndex, Params};
use crate::tensor::{conv2d, conv2d_transpose, conv2d_weight_grad, outer_sum, RealTensor, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("free phase diverged while evaluating {0}")]
    Diverged(String),
    #[error("free phase did not converge while evaluating {what} (residual {residual:e})")]
    NotConverged { what: String, residual: f64 },
    #[error("finite differences at h and h/2 disagree at {index:?}: {a:e} vs {b:e}")]
    Untrusted { index: ParamIndex, a: f64, b: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMethod {
    UnrolledAdjoint,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleGradient {
    pub grad: Params,
    pub method: OracleMethod,
    pub steps: usize,
    pub h: Option<f64>,
    /// Coordinates actually evaluated (finite differences on a subset); `None` means all.
    pub coordinates: Option<Vec<ParamIndex>>,
    /// Whether the unrolled trajectory had converged (final step residual below 1e-8).
    pub converged: bool,
}

/// Problems that can differentiate their truncated free phase in reverse mode.
pub trait AdjointOracle: Equilibrium {
    /// `d loss(s(T)) / d theta` along the deterministic free trajectory from the initial state.
    fn unrolled_adjoint(&self, steps: usize) -> OracleGradient;
}

pub fn unrolled_adjoint_gradient<P: AdjointOracle>(problem: &P, steps: usize) -> OracleGradient {
    let g = problem.unrolled_adjoint(steps);
    if !g.converged {
        warn!("adjoint over {steps} steps: trajectory not converged, returning the truncated-unroll gradient");
    }
    g
}

impl AdjointOracle for ToyModel {
    fn unrolled_adjoint(&self, steps: usize) -> OracleGradient {
        let r = settle(self, 0.0, &SettleConfig::steps(steps), None, 0);
        let s = ToyModel::unit(&r.state);
        // s(t) = (1 - rate) s(t-1) + rate * theta  =>  ds(T)/dtheta = 1 - (1 - rate)^T
        let ds = 1.0 - (1.0 - self.rate).powi(steps as i32);
        let mut grad = Params::zeros_like(&self.params);
        grad.layers[0].bias.data_mut()[0] = (s - self.target) * ds;
        OracleGradient {
            grad,
            method: OracleMethod::UnrolledAdjoint,
            steps,
            h: None,
            coordinates: None,
            converged: r.final_residual() < 1e-8,
        }
    }
}

impl AdjointOracle for NetProblem<'_> {
    fn unrolled_adjoint(&self, steps: usize) -> OracleGradient {
        let net = self.net;
        let params = &self.params;
        let depth = net.depth();
        let hidden = depth - 1;
        let act = net.activation();
        let batch = self.batch();
        let steps = steps.max(1);

        let mut traj: Vec<NetworkState<f64>> = Vec::with_capacity(steps + 1);
        traj.push(self.initial_state());
        for _ in 0..steps {
            let next = self.step(traj.last().expect("non-empty"), 0.0, &StepNoise::NONE);
            traj.push(next);
        }
        let converged = !traj[steps].diverged && traj[steps].distance(&traj[steps - 1]) < 1e-8;

        let mut grad = Params::zeros_like(params);
        let input_at = |t: usize, i: usize| -> &RealTensor {
            if i == 0 {
                self.x
            } else {
                &traj[t].layers[i - 1].act
            }
        };

        // loss of the readout at step T, which reads the hidden layers at T - 1
        let mut dlogits = traj[steps].output().clone();
        for (d, &y) in dlogits.data_mut().iter_mut().zip(self.targets().data()) {
            *d = (*d - y) / batch as f64;
        }
        let mut delta: Vec<RealTensor> = traj[0].layers[..hidden].iter().map(|l| Tensor::zeros(l.act.shape())).collect();
        {
            let i = depth - 1;
            let input = input_at(steps - 1, i);
            let fwd = net.layer_forward(params, i, input).expect("validated shapes");
            add(&mut grad.layers[i].weight, &net.layer_weight_grad(i, &fwd, input, &dlogits).expect("shapes"));
            add(&mut grad.layers[i].bias, &net.bias_sum(i, &dlogits));
            delta[i - 1] = net.layer_feedback(params, i, &fwd, &dlogits).expect("shapes");
        }

        for t in (1..steps).rev() {
            let now = &traj[t];
            let prev = &traj[t - 1];
            let mut delta_prev: Vec<RealTensor> = delta.iter().map(|d| Tensor::zeros(d.shape())).collect();
            for i in 0..hidden {
                let mut du = delta[i].clone();
                for (d, &u) in du.data_mut().iter_mut().zip(now.layers[i].pre.data()) {
                    *d *= act.derivative(u).unwrap_or(0.0);
                }
                add(&mut grad.layers[i].bias, &net.bias_sum(i, &du));

                // drive from below
                let input = if i == 0 { self.x } else { &prev.layers[i - 1].act };
                let fwd = net.layer_forward(params, i, input).expect("shapes");
                add(&mut grad.layers[i].weight, &net.layer_weight_grad(i, &fwd, input, &du).expect("shapes"));
                if i > 0 {
                    add(&mut delta_prev[i - 1], &net.layer_feedback(params, i, &fwd, &du).expect("shapes"));
                }

                // feedback from above: J_{i+1}(a_i)^T a_{i+1}
                if i + 1 < hidden {
                    let j = i + 1;
                    let w = &params.layers[j].weight;
                    let above = &prev.layers[j].act;
                    let below = &prev.layers[i].act;
                    match &net.layers[j].kind {
                        LayerKind::Dense => {
                            add(&mut grad.layers[j].weight, &outer_sum(above, &du, batch).expect("shapes"));
                            let back = net.layer_forward(params, j, &du).expect("shapes").out;
                            add(&mut delta_prev[j], &back);
                        }
                        LayerKind::Conv { geom, kernel, .. } => {
                            let fwd = net.layer_forward(params, j, below).expect("shapes");
                            let v = net.pool_vjp(&fwd, above).expect("shapes");
                            add(&mut grad.layers[j].weight, &conv2d_weight_grad(&v, &du, (*kernel, *kernel), *geom).expect("shapes"));
                            let dv = conv2d(w, &du, *geom).expect("shapes");
                            let (dz, dc) = match (&fwd.conv, &fwd.pooled) {
                                (Some(z), Some(p)) => softmax_pool_vjp_reverse(z, p, above, &dv, net.spec.tau).expect("shapes"),
                                _ => (Tensor::zeros(dv.shape()), dv),
                            };
                            add(&mut delta_prev[j], &dc);
                            add(&mut grad.layers[j].weight, &conv2d_weight_grad(&dz, below, (*kernel, *kernel), *geom).expect("shapes"));
                            let hw = (below.shape()[1], below.shape()[2]);
                            add(&mut delta_prev[i], &conv2d_transpose(w, &dz, *geom, hw).expect("shapes"));
                        }
                    }
                }
            }
            delta = delta_prev;
        }

        OracleGradient {
            grad,
            method: OracleMethod::UnrolledAdjoint,
            steps,
            h: None,
            coordinates: None,
            converged,
        }
    }
}

fn add(acc: &mut RealTensor, x: &RealTensor) {
    acc.axpy(1.0, x).expect("matching gradient shapes");
}

/// Loss at the free fixed point for the given parameters.
fn free_loss<P: Equilibrium>(problem: &P, params: Params, cfg: &SettleConfig, what: &str) -> Result<f64> {
    let p = problem.rebind(params);
    let r = settle(&p, 0.0, cfg, None, 0);
    if r.diverged {
        return Err(OracleError::Diverged(what.to_string()));
    }
    if cfg.residual_tol > 0.0 && !r.converged {
        return Err(OracleError::NotConverged { what: what.to_string(), residual: r.final_residual() });
    }
    Ok(p.loss(&r.state))
}

/// Central differences `(L(theta + h e_i) - L(theta - h e_i)) / 2h`, each `L` from a fresh free settle.
pub fn finite_difference_gradient<P: Equilibrium>(
    problem: &P,
    h: f64,
    subset: Option<&[ParamIndex]>,
    cfg: &SettleConfig,
) -> Result<OracleGradient> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(OracleError::Invalid(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let base = problem.params();
    let coords: Vec<ParamIndex> = match subset {
        Some(s) => s.to_vec(),
        None => base.indices(),
    };
    let values: Vec<f64> = coords
        .par_iter()
        .map(|&c| {
            let what = format!("{c:?}");
            let mut plus = base.clone();
            plus.set(c, base.get(c) + h);
            let mut minus = base.clone();
            minus.set(c, base.get(c) - h);
            Ok((free_loss(problem, plus, cfg, &what)? - free_loss(problem, minus, cfg, &what)?) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    let mut grad = Params::zeros_like(base);
    for (&c, &v) in coords.iter().zip(&values) {
        grad.set(c, v);
    }
    Ok(OracleGradient {
        grad,
        method: OracleMethod::FiniteDifference,
        steps: cfg.max_steps,
        h: Some(h),
        coordinates: subset.map(|s| s.to_vec()),
        converged: true,
    })
}

/// Finite differences at `h`, confirmed against `h / 2` (relative agreement 1e-3, with an
/// absolute floor `abs_floor` for near-zero coordinates).
pub fn checked_finite_difference_gradient<P: Equilibrium>(
    problem: &P,
    h: f64,
    subset: Option<&[ParamIndex]>,
    cfg: &SettleConfig,
    abs_floor: f64,
) -> Result<OracleGradient> {
    let a = finite_difference_gradient(problem, h, subset, cfg)?;
    let b = finite_difference_gradient(problem, h / 2.0, subset, cfg)?;
    let coords = subset.map(|s| s.to_vec()).unwrap_or_else(|| a.grad.indices());
    for c in coords {
        let (x, y) = (a.grad.get(c), b.grad.get(c));
        if (x - y).abs() > 1e-3 * x.abs().max(y.abs()) + abs_floor {
            return Err(OracleError::Untrusted { index: c, a: x, b: y });
        }
    }
    Ok(a)
}

/// `count` distinct coordinates drawn uniformly without replacement.
pub fn sample_coordinates(params: &Params, count: usize, seed: u64) -> Vec<ParamIndex> {
    let all = params.indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<ParamIndex> = sample(&mut rng, all.len(), count.min(all.len())).into_iter().map(|i| all[i]).collect();
    picked.sort_by_key(|c| (c.layer, c.bias, c.index));
    picked
}

/// Cosine similarities per layer (weights and bias together) and over all parameters.
/// `None` when both vectors are zero; 0 when exactly one is.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub per_layer: Vec<Option<f64>>,
    pub total: Option<f64>,
}

fn cosine_of(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na > 0.0, nb > 0.0) {
        (false, false) => None,
        (true, true) => Some((dot / (na * nb)).clamp(-1.0, 1.0)),
        _ => Some(0.0),
    }
}

pub fn cosine_similarity(a: &Params, b: &Params) -> SimilarityReport {
    assert!(a.same_shape(b), "cosine similarity of differently shaped parameter sets");
    let per_layer = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| {
            let xs: Vec<f64> = x.weight.data().iter().chain(x.bias.data()).copied().collect();
            let ys: Vec<f64> = y.weight.data().iter().chain(y.bias.data()).copied().collect();
            cosine_of(&xs, &ys)
        })
        .collect();
    SimilarityReport { per_layer, total: cosine_of(&a.flatten(), &b.flatten()) }
}

/// Cosine restricted to the given coordinates.
pub fn cosine_on(a: &Params, b: &Params, coords: &[ParamIndex]) -> Option<f64> {
    let xs: Vec<f64> = coords.iter().map(|&c| a.get(c)).collect();
    let ys: Vec<f64> = coords.iter().map(|&c| b.get(c)).collect();
    cosine_of(&xs, &ys)
}

/// `||a - b|| / ||b||` over the given coordinates (all if `None`).
pub fn relative_error(a: &Params, b: &Params, coords: Option<&[ParamIndex]>) -> f64 {
    let all;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = b.indices();
            &all
        }
    };
    let num: f64 = coords.iter().map(|&c| (a.get(c) - b.get(c)).powi(2)).sum();
    let den: f64 = coords.iter().map(|&c| b.get(c).powi(2)).sum();
    (num / den).sqrt()
}
