//! Stability maps over complex `beta`, orbit traces and cosine sweeps.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{settle, Equilibrium, NudgePath, SettleConfig};
use crate::estimators::{classic_ep, hep_estimate, online_estimate, sample_path, EstimatorError, EstimatorKind, OnlineConfig, PhaseConfig};
use crate::estimators::{imag_projection_estimate, real_projection_estimate};
use crate::model::Params;
use crate::oracle::{cosine_similarity, SimilarityReport};
use crate::tensor::C64;

/// Rectangular grid over the complex `beta` plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityGrid {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
    pub resolution: usize,
}

impl Default for StabilityGrid {
    fn default() -> Self {
        Self { re_min: -0.6, re_max: 0.6, im_min: -0.6, im_max: 0.6, resolution: 201 }
    }
}

impl StabilityGrid {
    pub fn square(half_width: f64, resolution: usize) -> Self {
        Self { re_min: -half_width, re_max: half_width, im_min: -half_width, im_max: half_width, resolution }
    }

    fn axis(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
        if n <= 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    }

    /// `beta` of the cell in image row `row` (top row = largest imaginary part) and column `col`.
    pub fn beta(&self, row: usize, col: usize) -> C64 {
        let n = self.resolution;
        C64::new(Self::axis(self.re_min, self.re_max, n, col), Self::axis(self.im_max, self.im_min, n, row))
    }

    /// Nearest cell `(row, col)` to `beta`, if inside the grid.
    pub fn cell_of(&self, beta: C64) -> Option<(usize, usize)> {
        let n = self.resolution;
        if n < 2 || beta.re < self.re_min || beta.re > self.re_max || beta.im < self.im_min || beta.im > self.im_max {
            return None;
        }
        let col = ((beta.re - self.re_min) / (self.re_max - self.re_min) * (n - 1) as f64).round() as usize;
        let row = ((self.im_max - beta.im) / (self.im_max - self.im_min) * (n - 1) as f64).round() as usize;
        Some((row.min(n - 1), col.min(n - 1)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityMap {
    pub grid: StabilityGrid,
    pub steps: usize,
    /// Final step residual per cell, row-major; `+inf` for diverged cells.
    pub residual: Vec<f64>,
    pub diverged: Vec<bool>,
    /// Final residual at or below which a cell counts as settled.
    pub tol: f64,
}

pub const DEFAULT_SETTLED_TOL: f64 = 1e-6;

impl StabilityMap {
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid.resolution + col
    }

    pub fn unstable(&self, i: usize) -> bool {
        self.diverged[i] || !(self.residual[i] <= self.tol)
    }

    /// Whether a circle of the given radius passes through an unstable cell.
    pub fn circle_hits_unstable(&self, radius: f64) -> bool {
        let samples = 8 * self.grid.resolution;
        (0..samples).any(|k| {
            let beta = C64::from_polar(radius, 2.0 * std::f64::consts::PI * k as f64 / samples as f64);
            self.grid.cell_of(beta).is_some_and(|(r, c)| self.unstable(self.index(r, c)))
        })
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "row,col,beta_re,beta_im,residual,diverged")?;
        let n = self.grid.resolution;
        for row in 0..n {
            for col in 0..n {
                let i = self.index(row, col);
                let b = self.grid.beta(row, col);
                writeln!(w, "{row},{col},{},{},{},{}", b.re, b.im, self.residual[i], self.diverged[i] as u8)?;
            }
        }
        Ok(())
    }

    /// 8-bit binary graymap: dark for small residuals, white for divergence.
    pub fn write_pgm(&self, mut w: impl Write) -> io::Result<()> {
        let n = self.grid.resolution;
        write!(w, "P5\n{n} {n}\n255\n")?;
        let px: Vec<u8> = (0..n * n)
            .map(|i| {
                if self.diverged[i] || !self.residual[i].is_finite() {
                    255
                } else {
                    let l = self.residual[i].max(1e-16).log10().clamp(-12.0, 0.0);
                    ((l + 12.0) / 12.0 * 254.0).round() as u8
                }
            })
            .collect();
        w.write_all(&px)
    }

    pub fn sidecar(&self) -> String {
        let g = &self.grid;
        let mut s = String::new();
        let _ = writeln!(s, "re_min = {}\nre_max = {}\nim_min = {}\nim_max = {}", g.re_min, g.re_max, g.im_min, g.im_max);
        let _ = writeln!(s, "resolution = {}\nsteps = {}\nsettled_tol = {:e}\ninit = zeros", g.resolution, self.steps, self.tol);
        let _ = writeln!(s, "rows run from im_max (top) to im_min; columns from re_min to re_max");
        let _ = writeln!(s, "pixel = 254 * (log10(residual) + 12) / 12 clamped, 255 = diverged");
        s
    }

    /// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.txt` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> io::Result<()> {
        self.write_csv(io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?))?;
        self.write_pgm(io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.pgm")))?))?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.sidecar())
    }
}

/// Cold-start settle at every cell for `steps` steps; divergence is recorded, not raised.
/// Cells whose final residual exceeds `tol` count as unstable.
pub fn stability_map<P: Equilibrium>(problem: &P, grid: StabilityGrid, steps: usize, tol: f64) -> StabilityMap {
    let n = grid.resolution;
    let cfg = SettleConfig::steps(steps);
    let cells: Vec<(f64, bool)> = (0..n * n)
        .into_par_iter()
        .map(|i| {
            let beta = grid.beta(i / n, i % n);
            let r = settle(problem, beta, &cfg, None, 0);
            (if r.diverged { f64::INFINITY } else { r.final_residual() }, r.diverged)
        })
        .collect();
    StabilityMap {
        grid,
        steps,
        residual: cells.iter().map(|c| c.0).collect(),
        diverged: cells.iter().map(|c| c.1).collect(),
        tol,
    }
}

/// Address of a hidden unit: `(layer index, unit index)` for batch sample 0.
pub type UnitId = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct OrbitTrace {
    pub units: Vec<UnitId>,
    pub path: NudgePath,
    /// Free fixed-point activity of each unit.
    pub free: Vec<f64>,
    /// Nudged fixed-point activity per unit and path point.
    pub points: Vec<Vec<C64>>,
}

impl OrbitTrace {
    /// Real parts over two periods.
    pub fn real_series(&self, unit: usize) -> Vec<f64> {
        self.points[unit].iter().chain(&self.points[unit]).map(|z| z.re).collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "layer,unit,k,beta_re,beta_im,s_re,s_im,free")?;
        for (u, &(layer, unit)) in self.units.iter().enumerate() {
            for (k, z) in self.points[u].iter().enumerate() {
                let b = self.path.point(k);
                writeln!(w, "{layer},{unit},{k},{},{},{},{},{}", b.re, b.im, z.re, z.im, self.free[u])?;
            }
        }
        Ok(())
    }
}

pub fn orbit_trace<P: Equilibrium>(problem: &P, path: &NudgePath, units: &[UnitId], cfg: &PhaseConfig) -> Result<OrbitTrace, EstimatorError> {
    let free = crate::estimators::free_phase(problem, cfg, 0)?;
    let s = sample_path(problem, path, cfg)?;
    let batch = problem.batch();
    let pick = |t: &crate::tensor::Tensor<C64>, unit: usize| t.data()[unit * batch];
    Ok(OrbitTrace {
        units: units.to_vec(),
        path: *path,
        free: units.iter().map(|&(l, u)| free.state.layers[l].act.data()[u * batch]).collect(),
        points: units
            .iter()
            .map(|&(l, u)| s.states.iter().map(|st| pick(&st.layers[l].act, u)).collect())
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "values")]
pub enum SweepAxis {
    Radius(Vec<f64>),
    NPoints(Vec<usize>),
    TOsc(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Radius(_) => "radius",
            SweepAxis::NPoints(_) => "n_points",
            SweepAxis::TOsc(_) => "t_osc",
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            SweepAxis::Radius(v) => v.clone(),
            SweepAxis::NPoints(v) | SweepAxis::TOsc(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Settings held fixed while one axis varies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepSettings {
    pub radius: f64,
    pub n_points: usize,
    pub t_osc: usize,
    pub periods: usize,
    pub phases: PhaseConfig,
    /// Classic EP realizations; `None` uses `ceil(N / 2)` when noisy and 1 otherwise.
    pub classic_realizations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub estimator: EstimatorKind,
    /// `None` when the estimator failed (for instance on divergence).
    pub report: Option<SimilarityReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: &'static str,
    pub rows: Vec<SweepRow>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SweepResult {
    pub fn total(&self, estimator: EstimatorKind, value: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.value == value)
            .and_then(|r| r.report.as_ref()?.total)
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "axis,estimator,layer,cosine,seed,noise_std,axis_name")?;
        for r in &self.rows {
            let name = r.estimator.name();
            match &r.report {
                Some(rep) => {
                    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |c| c.to_string());
                    writeln!(w, "{},{name},total,{},{},{},{}", r.value, fmt(rep.total), self.seed, self.noise_std, self.axis)?;
                    for (l, c) in rep.per_layer.iter().enumerate() {
                        writeln!(w, "{},{name},{},{},{},{},{}", r.value, l + 1, fmt(*c), self.seed, self.noise_std, self.axis)?;
                    }
                }
                None => writeln!(w, "{},{name},total,nan,{},{},{}", r.value, self.seed, self.noise_std, self.axis)?,
            }
        }
        Ok(())
    }
}

fn run_one<P: Equilibrium>(problem: &P, kind: EstimatorKind, s: &SweepSettings) -> Result<Params, EstimatorError> {
    let path = NudgePath::new(s.radius, s.n_points).map_err(|e| EstimatorError::Invalid(e.to_string()))?;
    match kind {
        EstimatorKind::ClassicEp => {
            let n = s.classic_realizations.unwrap_or(if s.phases.noise_std > 0.0 { s.n_points.div_ceil(2) } else { 1 });
            Ok(classic_ep(problem, s.radius, &s.phases, n)?.grad)
        }
        EstimatorKind::Holomorphic => Ok(hep_estimate(problem, &path, &s.phases)?.grad),
        EstimatorKind::RealProjection | EstimatorKind::ImagProjection => {
            let samples = sample_path(problem, &path, &s.phases)?;
            if kind == EstimatorKind::RealProjection {
                real_projection_estimate(&samples.samples, s.radius)
            } else {
                imag_projection_estimate(&samples.samples, s.radius)
            }
        }
        EstimatorKind::Online => {
            let o = OnlineConfig { t_osc: s.t_osc, t_plas: s.t_osc * s.periods, radius: s.radius, settle_first: true, off_boundary: false };
            Ok(online_estimate(problem, &o, &s.phases, None)?.estimate.grad)
        }
    }
}

/// Cosine similarity against `oracle` for each estimator and axis value. Rows come out in
/// (value, estimator) order regardless of scheduling.
pub fn cosine_sweep<P: Equilibrium>(
    problem: &P,
    oracle: &Params,
    kinds: &[EstimatorKind],
    axis: &SweepAxis,
    settings: &SweepSettings,
) -> SweepResult {
    let jobs: Vec<(f64, EstimatorKind)> = axis.values().into_iter().flat_map(|v| kinds.iter().map(move |&k| (v, k))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(value, kind)| {
            let mut s = *settings;
            match axis {
                SweepAxis::Radius(_) => s.radius = value,
                SweepAxis::NPoints(_) => s.n_points = value as usize,
                SweepAxis::TOsc(_) => s.t_osc = value as usize,
            }
            match run_one(problem, kind, &s) {
                Ok(g) => SweepRow { value, estimator: kind, report: Some(cosine_similarity(&g, oracle)), error: None },
                Err(e) => SweepRow { value, estimator: kind, report: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    SweepResult { axis: axis.name(), rows, noise_std: settings.phases.noise_std, seed: settings.phases.rng_seed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NetProblem;
    use crate::model::{Activation, Network, NetworkSpec};
    use crate::oracle::unrolled_adjoint_gradient;
    use crate::tensor::RealTensor;

    fn small_mlp() -> (Network, Params, RealTensor, Vec<usize>) {
        let net = Network::new(NetworkSpec::mlp(&[6, 4, 4, 4], Activation::ShiftedSigmoid)).unwrap();
        let params = net.init_params(1.0, 42);
        let x = RealTensor::from_vec(&[6, 1], vec![0.3, -1.2, 0.8, 0.05, -0.4, 1.5]).unwrap();
        (net, params, x, vec![2])
    }

    #[test]
    fn grid_cells_round_trip() {
        let g = StabilityGrid::square(0.6, 13);
        for (r, c) in [(0, 0), (6, 6), (12, 3)] {
            assert_eq!(g.cell_of(g.beta(r, c)), Some((r, c)));
        }
        assert!(g.beta(0, 0).im > 0.0);
        assert_eq!(g.beta(6, 6), C64::new(0.0, 0.0));
    }

    #[test]
    fn map_center_converges_and_linear_net_is_stable() {
        let (net, params, x, labels) = small_mlp();
        let p = NetProblem::new(&net, params, &x, &labels).unwrap();
        let m = stability_map(&p, StabilityGrid::square(0.1, 5), 200, DEFAULT_SETTLED_TOL);
        assert!(m.residual[m.index(2, 2)] < 1e-6);
        assert!(!m.circle_hits_unstable(0.1));

        let lin = Network::new(NetworkSpec::mlp(&[6, 4, 4, 4], Activation::Identity)).unwrap();
        let lp = lin.init_params(0.3, 1);
        let q = NetProblem::new(&lin, lp, &x, &labels).unwrap();
        let m = stability_map(&q, StabilityGrid::square(0.6, 7), 300, DEFAULT_SETTLED_TOL);
        assert!((0..49).all(|i| !m.unstable(i)), "{:?}", m.residual);

        let mut pgm = Vec::new();
        m.write_pgm(&mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n7 7\n255\n"));
        assert_eq!(pgm.len(), b"P5\n7 7\n255\n".len() + 49);
    }

    #[test]
    fn orbits_are_circles_conjugate_and_collapse_at_zero_radius() {
        let (net, params, x, labels) = small_mlp();
        let p = NetProblem::new(&net, params, &x, &labels).unwrap();
        let cfg = PhaseConfig::converged(3000, 1e-13);
        let units = [(0, 0), (1, 2)];
        let n = 24;
        let o = orbit_trace(&p, &NudgePath::new(0.0, n).unwrap(), &units, &cfg).unwrap();
        for u in 0..2 {
            for z in &o.points[u] {
                assert!((z - o.free[u]).norm() < 1e-12);
            }
        }
        let o = orbit_trace(&p, &NudgePath::new(0.1, n).unwrap(), &units, &cfg).unwrap();
        for u in 0..2 {
            for k in 1..n {
                assert!((o.points[u][k] - o.points[u][n - k].conj()).norm() < 1e-10);
            }
        }
        assert_eq!(o.real_series(0).len(), 2 * n);
        let o = orbit_trace(&p, &NudgePath::new(0.001, n).unwrap(), &units, &cfg).unwrap();
        for u in 0..2 {
            let radii: Vec<f64> = o.points[u].iter().map(|z| (z - o.free[u]).norm()).collect();
            let mean = radii.iter().sum::<f64>() / n as f64;
            assert!(radii.iter().all(|r| (r - mean).abs() < 0.01 * mean), "{radii:?}");
        }
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let (net, params, x, labels) = small_mlp();
        let p = NetProblem::new(&net, params, &x, &labels).unwrap();
        let oracle = unrolled_adjoint_gradient(&p, 500).grad;
        let s = SweepSettings {
            radius: 0.1,
            n_points: 8,
            t_osc: 64,
            periods: 2,
            phases: PhaseConfig::converged(3000, 1e-12),
            classic_realizations: None,
        };
        let axis = SweepAxis::Radius(vec![0.01, 0.1]);
        let kinds = [EstimatorKind::ClassicEp, EstimatorKind::Holomorphic];
        let a = cosine_sweep(&p, &oracle, &kinds, &axis, &s);
        let b = cosine_sweep(&p, &oracle, &kinds, &axis, &s);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.rows[1].estimator, EstimatorKind::Holomorphic);
        assert!(a.total(EstimatorKind::Holomorphic, 0.1).unwrap() > 0.999);
        assert!(a.total(EstimatorKind::ClassicEp, 0.01).unwrap() > 0.999);
    }
}
