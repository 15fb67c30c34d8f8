//! Gradient estimators: classic EP, the N-point holomorphic estimator, its
//! real/imaginary projections, and the online filter.

use std::f64::consts::PI;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{settle, Equilibrium, NudgePath, SettleConfig, SettleResult, StepNoise};
use crate::model::{NetworkState, ParamSet, Params};
use crate::tensor::{Scalar, C64};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("{phase} phase diverged (beta = {beta})")]
    Diverged { phase: String, beta: C64 },
    #[error("{phase} phase did not converge (beta = {beta}, residual {residual:e})")]
    NotConverged { phase: String, beta: C64, residual: f64 },
    #[error("invalid estimator setting: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    ClassicEp,
    Holomorphic,
    RealProjection,
    ImagProjection,
    Online,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::ClassicEp => "classic-ep",
            EstimatorKind::Holomorphic => "hep",
            EstimatorKind::RealProjection => "hep-real-projection",
            EstimatorKind::ImagProjection => "hep-imag-projection",
            EstimatorKind::Online => "online-hep",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad: Params,
    pub kind: EstimatorKind,
    pub n_points: usize,
    pub radius: f64,
    /// Norm of the imaginary part dropped when realifying.
    pub imag_residual: f64,
    /// Convergence flag of every settle, in the order they ran.
    pub converged: Vec<bool>,
}

/// Step budgets and tolerances for phase-based estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub t_free: usize,
    pub t_nudge: usize,
    /// 0 runs fixed step counts and skips convergence checks.
    pub residual_tol: f64,
    /// Start each nudged settle from the previous nudge point instead of the free fixed point.
    pub warm_start: bool,
    pub noise_std: f64,
    pub rng_seed: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self { t_free: 200, t_nudge: 50, residual_tol: 0.0, warm_start: true, noise_std: 0.0, rng_seed: 0 }
    }
}

impl PhaseConfig {
    /// Tolerance-driven settles, as used for gradient checks.
    pub fn converged(max_steps: usize, residual_tol: f64) -> Self {
        Self { t_free: max_steps, t_nudge: max_steps, residual_tol, ..Self::default() }
    }

    pub fn free(&self) -> SettleConfig {
        SettleConfig {
            max_steps: self.t_free,
            residual_tol: self.residual_tol,
            warm_start: false,
            noise_std: self.noise_std,
            rng_seed: self.rng_seed,
        }
    }

    pub fn nudge(&self) -> SettleConfig {
        SettleConfig {
            max_steps: self.t_nudge,
            residual_tol: self.residual_tol,
            warm_start: self.warm_start,
            noise_std: self.noise_std,
            rng_seed: self.rng_seed,
        }
    }
}

fn check<T: Scalar>(r: &SettleResult<T>, cfg: &SettleConfig, phase: impl Into<String>, beta: C64) -> Result<()> {
    if r.diverged {
        return Err(EstimatorError::Diverged { phase: phase.into(), beta });
    }
    if cfg.residual_tol > 0.0 && !r.converged {
        return Err(EstimatorError::NotConverged { phase: phase.into(), beta, residual: r.final_residual() });
    }
    Ok(())
}

/// `dF/dtheta` at a state: `-s_l s_{l-1}^T` for hidden layers and
/// `beta (s_L - y) s_{L-1}^T` for the readout, batch averaged.
pub fn local_grad<P: Equilibrium, T: Scalar>(problem: &P, state: &NetworkState<T>, beta: T) -> ParamSet<T> {
    problem.energy_grad(state, beta)
}

/// Settles the free phase at `beta = 0` in real arithmetic.
pub fn free_phase<P: Equilibrium>(problem: &P, cfg: &PhaseConfig, phase: u64) -> Result<SettleResult<f64>> {
    let c = cfg.free();
    let r = settle(problem, 0.0, &c, None, phase);
    check(&r, &c, "free", C64::new(0.0, 0.0))?;
    Ok(r)
}

/// `(dF/dtheta(s*_beta, beta) - dF/dtheta(s*_0, 0)) / beta` with real `beta`.
///
/// With noise, both fixed points are averaged over `realizations` independent runs.
pub fn classic_ep<P: Equilibrium>(problem: &P, beta: f64, cfg: &PhaseConfig, realizations: usize) -> Result<GradientEstimate> {
    if beta == 0.0 || !beta.is_finite() {
        return Err(EstimatorError::Invalid(format!("classic EP needs a nonzero real beta, got {beta}")));
    }
    let runs = realizations.max(1);
    let mut free_states = Vec::with_capacity(runs);
    let mut nudged_states = Vec::with_capacity(runs);
    let mut converged = Vec::new();
    let nudge_cfg = cfg.nudge();
    for r in 0..runs as u64 {
        let free = free_phase(problem, cfg, 2 * r)?;
        converged.push(free.converged);
        let nudged = settle(problem, beta, &nudge_cfg, Some(free.state.clone()), 2 * r + 1);
        check(&nudged, &nudge_cfg, "nudged", C64::new(beta, 0.0))?;
        converged.push(nudged.converged);
        free_states.push(free.state);
        nudged_states.push(nudged.state);
    }
    let free = NetworkState::mean(&free_states);
    let nudged = NetworkState::mean(&nudged_states);
    let mut grad = problem.energy_grad(&nudged, beta);
    grad.axpy(-1.0, &problem.energy_grad(&free, 0.0));
    Ok(GradientEstimate {
        grad: grad.scale(1.0 / beta),
        kind: EstimatorKind::ClassicEp,
        n_points: 2,
        radius: beta.abs(),
        imag_residual: 0.0,
        converged,
    })
}

/// `dF/dtheta` sampled at each point of the path, plus convergence flags.
pub struct PathSamples {
    pub path: NudgePath,
    pub samples: Vec<ParamSet<C64>>,
    pub states: Vec<NetworkState<C64>>,
    pub converged: Vec<bool>,
}

/// Settles the free phase, then visits `beta_0 .. beta_{N-1}` in order.
pub fn sample_path<P: Equilibrium>(problem: &P, path: &NudgePath, cfg: &PhaseConfig) -> Result<PathSamples> {
    let free = free_phase(problem, cfg, 0)?;
    let start = free.state.to_complex();
    let mut converged = vec![free.converged];
    let mut prev = start.clone();
    let mut samples = Vec::with_capacity(path.n_points);
    let mut states = Vec::with_capacity(path.n_points);
    let nudge_cfg = cfg.nudge();
    for k in 0..path.n_points {
        let beta = path.point(k);
        let init = if cfg.warm_start { prev } else { start.clone() };
        let r = settle(problem, beta, &nudge_cfg, Some(init), k as u64 + 1);
        check(&r, &nudge_cfg, format!("nudge point k={k}"), beta)?;
        converged.push(r.converged);
        samples.push(problem.energy_grad(&r.state, beta));
        prev = r.state.clone();
        states.push(r.state);
    }
    Ok(PathSamples { path: *path, samples, states, converged })
}

/// `(1 / (N |beta|)) sum_k g_k e^{-2 i pi k / N}` as a complex parameter set.
pub fn fourier_coefficient(samples: &[ParamSet<C64>], radius: f64) -> Result<ParamSet<C64>> {
    let n = samples.len();
    if n < 2 || radius <= 0.0 {
        return Err(EstimatorError::Invalid(format!("need N >= 2 samples and |beta| > 0, got N={n}, |beta|={radius}")));
    }
    let mut acc = ParamSet::<C64>::zeros_like(&samples[0]);
    for (k, g) in samples.iter().enumerate() {
        acc.axpy(C64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64), g);
    }
    Ok(acc.scale(C64::new(1.0 / (n as f64 * radius), 0.0)))
}

fn realify(c: &ParamSet<C64>) -> (Params, f64) {
    (c.re(), c.im().norm())
}

/// N-point holomorphic estimate of `dL/dtheta`. The real part is returned; the norm of
/// the imaginary part is recorded in `imag_residual`.
pub fn hep_estimate<P: Equilibrium>(problem: &P, path: &NudgePath, cfg: &PhaseConfig) -> Result<GradientEstimate> {
    let s = sample_path(problem, path, cfg)?;
    let c = fourier_coefficient(&s.samples, path.radius)?;
    let (grad, imag) = realify(&c);
    debug!("hep N={} |beta|={}: |Im| = {imag:e}, |Re| = {:e}", path.n_points, path.radius, grad.norm());
    Ok(GradientEstimate {
        grad,
        kind: EstimatorKind::Holomorphic,
        n_points: path.n_points,
        radius: path.radius,
        imag_residual: imag,
        converged: s.converged,
    })
}

fn projection(samples: &[ParamSet<C64>], radius: f64, real: bool) -> Result<Params> {
    let n = samples.len();
    if n < 3 {
        return Err(EstimatorError::Invalid(format!("projection estimators need N >= 3, got {n}")));
    }
    if radius <= 0.0 {
        return Err(EstimatorError::Invalid(format!("|beta| must be positive, got {radius}")));
    }
    let mut acc = Params::zeros_like(&samples[0]);
    for (k, g) in samples.iter().enumerate() {
        let phi = 2.0 * PI * k as f64 / n as f64;
        let part = if real { g.re() } else { g.im() };
        acc.axpy(if real { phi.cos() } else { phi.sin() }, &part);
    }
    Ok(acc.scale(2.0 / (n as f64 * radius)))
}

/// `(2 / (N |beta|)) sum_k Re(g_k) cos(2 pi k / N)`.
pub fn real_projection_estimate(samples: &[ParamSet<C64>], radius: f64) -> Result<Params> {
    projection(samples, radius, true)
}

/// `(2 / (N |beta|)) sum_k Im(g_k) sin(2 pi k / N)`.
pub fn imag_projection_estimate(samples: &[ParamSet<C64>], radius: f64) -> Result<Params> {
    projection(samples, radius, false)
}

/// Timescales of the online estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    /// Steps per teaching oscillation.
    pub t_osc: usize,
    /// Steps between plasticity events.
    pub t_plas: usize,
    pub radius: f64,
    /// Settle the free phase before the oscillation starts.
    #[serde(default = "yes")]
    pub settle_first: bool,
    /// Allow `t_plas` that is not a whole number of periods.
    #[serde(default)]
    pub off_boundary: bool,
}

fn yes() -> bool {
    true
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_osc == 0 || self.t_plas < self.t_osc {
            return Err(EstimatorError::Invalid(format!(
                "need t_plas >= t_osc >= 1, got t_osc={} t_plas={}",
                self.t_osc, self.t_plas
            )));
        }
        if !self.off_boundary && !self.t_plas.is_multiple_of(self.t_osc) {
            return Err(EstimatorError::Invalid(format!(
                "t_plas={} is not a multiple of t_osc={}",
                self.t_plas, self.t_osc
            )));
        }
        if !(self.radius > 0.0) {
            return Err(EstimatorError::Invalid(format!("|beta| must be positive, got {}", self.radius)));
        }
        Ok(())
    }
}

pub struct OnlineResult {
    pub estimate: GradientEstimate,
    /// Running estimate at the end of every full period.
    pub per_period: Vec<Params>,
    /// Final state, for continuing the dynamics.
    pub state: NetworkState<C64>,
}

/// Runs the dynamics with `beta_n = |beta| e^{2 i pi (n + 1/2) / T_osc}` changed every step and
/// filters `dF/dtheta` against `e^{-2 i pi (n + 1/2) / T_osc}` for `t_plas` steps.
pub fn online_estimate<P: Equilibrium>(
    problem: &P,
    ocfg: &OnlineConfig,
    cfg: &PhaseConfig,
    init: Option<NetworkState<C64>>,
) -> Result<OnlineResult> {
    ocfg.validate()?;
    let mut converged = Vec::new();
    let mut state = match init {
        Some(s) => s,
        None if ocfg.settle_first => {
            let free = free_phase(problem, cfg, 0)?;
            converged.push(free.converged);
            free.state.to_complex()
        }
        None => problem.initial_state(),
    };
    let mut acc = ParamSet::<C64>::zeros_like(problem.params());
    let mut per_period = Vec::new();
    let t_osc = ocfg.t_osc as f64;
    for n in 0..ocfg.t_plas {
        let phi = 2.0 * PI * (n as f64 + 0.5) / t_osc;
        let beta = C64::from_polar(ocfg.radius, phi);
        let noise = StepNoise { std: cfg.noise_std, seed: cfg.rng_seed, phase: 1, step: n as u64 };
        state = problem.step(&state, beta, &noise);
        if state.diverged {
            return Err(EstimatorError::Diverged { phase: format!("online step {n}"), beta });
        }
        acc.axpy(C64::from_polar(1.0, -phi), &problem.energy_grad(&state, beta));
        if (n + 1) % ocfg.t_osc == 0 {
            per_period.push(acc.re().scale(1.0 / ((n + 1) as f64 * ocfg.radius)));
        }
    }
    let c = acc.scale(C64::new(1.0 / (ocfg.t_plas as f64 * ocfg.radius), 0.0));
    let (grad, imag) = realify(&c);
    Ok(OnlineResult {
        estimate: GradientEstimate {
            grad,
            kind: EstimatorKind::Online,
            n_points: ocfg.t_osc,
            radius: ocfg.radius,
            imag_residual: imag,
            converged,
        },
        per_period,
        state,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Fits the slope of `log ||hep(N, r) - oracle||` against `log r`.
pub fn bias_scaling_probe<P: Equilibrium>(
    problem: &P,
    n_points: usize,
    radii: &[f64],
    oracle: &Params,
    cfg: &PhaseConfig,
) -> Result<(f64, Vec<f64>)> {
    if radii.len() < 3 {
        return Err(EstimatorError::Invalid(format!("need at least 3 radii, got {}", radii.len())));
    }
    let mut errors = Vec::with_capacity(radii.len());
    for &r in radii {
        let path = NudgePath::new(r, n_points).map_err(|e| EstimatorError::Invalid(e.to_string()))?;
        let est = hep_estimate(problem, &path, cfg)?;
        errors.push(est.grad.sub(oracle).norm());
    }
    Ok((log_log_slope(radii, &errors), errors))
}
