//! The one-step MLE-process: a method-of-moments estimate on the learning
//! interval `[0, τ]`, corrected along `(τ, T]` by the normalised score
//!
//! ```text
//! θ⋆(t) = θ* + I(θ*)⁻¹ S(t) / (t − τ),   S(t) = ∫_τ^t Ṁ/σ² [dX − M ds].
//! ```
//!
//! Grid-based maximum likelihood and Bayes estimators serve as references.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{initial_values_with, write_rows, StartValues, StationaryRecursion, StationaryState};
use crate::model::{derived_quantities, fisher_matrix_af, fisher_scalar, invert_2x2, Case, ModelSpec};
use crate::moments::{mme, r_statistics, MmeResult};
use crate::simulate::{grid_index, unit_increments, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    /// Exponent of the learning time `τ = floor(T^δ)`, in (1/2, 1).
    pub delta: f64,
    /// Regulariser of the recurrent form's normaliser `t − τ + ε*`.
    pub epsilon_star: f64,
    /// Filter state at time 0 assumed by the learning-interval quadrature.
    pub start: StartValues,
    /// Emit every `stride`-th grid point of `(τ, T]` (and always `T`).
    pub stride: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            delta: 0.6,
            epsilon_star: 0.5,
            start: StartValues::default(),
            stride: 10,
        }
    }
}

impl LearningConfig {
    pub fn with_delta(delta: f64) -> Self {
        LearningConfig {
            delta,
            ..Default::default()
        }
    }

    /// Output every `every` time units on a grid of step `dt`.
    pub fn with_output_every(mut self, every: f64, dt: f64) -> Self {
        self.stride = ((every / dt).round() as usize).max(1);
        self
    }

    pub fn tau(&self, horizon: f64) -> Result<f64> {
        if !(self.delta > 0.5 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (1/2, 1), got {}", self.delta)));
        }
        if !(self.epsilon_star >= 0.0) {
            return Err(Error::Config(format!("epsilon_star must be nonnegative, got {}", self.epsilon_star)));
        }
        let tau = horizon.powf(self.delta).floor();
        if tau < 2.0 || tau >= horizon {
            return Err(Error::InsufficientData(format!(
                "learning time {tau} for horizon {horizon} must satisfy 2 <= tau < T"
            )));
        }
        Ok(tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorPath {
    pub preliminary: MmeResult,
    pub tau: f64,
    pub dt: f64,
    /// Grid step multiple between emitted points.
    pub stride: usize,
    pub times: Vec<f64>,
    /// One sequence per coordinate of θ, aligned with `times`.
    pub theta_star: Vec<Vec<f64>>,
    /// Fisher information (matrix, row-major) at the preliminary estimate.
    pub fisher_used: Vec<f64>,
    /// `(T − τ)⁻¹ ∫ Ṁ Ṁᵀ / σ² ds` over `(τ, T]`, row-major.
    pub information_average: Vec<f64>,
}

impl EstimatorPath {
    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    /// The estimate at the last time.
    pub fn final_value(&self) -> Vec<f64> {
        self.theta_star.iter().map(|c| *c.last().expect("nonempty path")).collect()
    }

    /// Position of time `t` in `times`.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let k = grid_index(t - self.tau, self.dt * self.stride as f64)?;
        if k == 0 || k > self.times.len() {
            return Err(Error::Alignment(format!("time {t} is not on the estimator grid")));
        }
        let i = k - 1;
        if (self.times[i] - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::Alignment(format!("time {t} is not on the estimator grid")));
        }
        Ok(i)
    }

    pub fn value_at(&self, t: f64) -> Result<Vec<f64>> {
        let i = self.index_at(t)?;
        Ok(self.theta_star.iter().map(|c| c[i]).collect())
    }

    /// Writes `t,theta_star[,theta_star_2]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = if self.dim() == 2 { "t,theta_star,theta_star_2" } else { "t,theta_star" };
        let rows = self.times.iter().enumerate().map(|(i, t)| {
            let mut row = vec![*t];
            row.extend(self.theta_star.iter().map(|c| c[i]));
            row
        });
        write_rows(path, header, rows)
    }
}

/// Which normaliser the correction uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Form {
    Integral,
    Recurrent,
}

/// Integral form with normaliser `t − τ`.
pub fn onestep_process(traj: &Trajectory, spec: &ModelSpec, cfg: &LearningConfig) -> Result<EstimatorPath> {
    run(traj, spec, cfg, Form::Integral)
}

/// Recurrent form with normaliser `t − τ + ε*`; with `ε* = 0` it reproduces
/// [`onestep_process`] up to rounding.
pub fn onestep_recurrent(traj: &Trajectory, spec: &ModelSpec, cfg: &LearningConfig) -> Result<EstimatorPath> {
    run(traj, spec, cfg, Form::Recurrent)
}

/// Preliminary estimate from the unit increments of `[0, τ]`.
pub fn preliminary_estimate(traj: &Trajectory, spec: &ModelSpec, tau: f64) -> Result<MmeResult> {
    let inc = unit_increments(traj, tau)?;
    mme(spec, &r_statistics(&inc)?)
}

/// Inverse Fisher information at θ (row-major), with degeneracy checks.
pub fn inverse_fisher(spec: &ModelSpec, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    match spec.case() {
        Case::AF => {
            let m = fisher_matrix_af(spec, theta)?;
            let tr = m[0][0] + m[1][1];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
            let cond = (0.5 * tr + disc) / (0.5 * tr - disc);
            if !(cond.is_finite() && cond > 0.0 && cond <= 1e12) {
                return Err(Error::Degenerate {
                    theta: theta.to_vec(),
                    reason: format!("Fisher matrix condition number {cond:e}"),
                });
            }
            let inv = invert_2x2(&m).ok_or_else(|| Error::Degenerate {
                theta: theta.to_vec(),
                reason: "singular Fisher matrix".into(),
            })?;
            Ok((
                vec![m[0][0], m[0][1], m[1][0], m[1][1]],
                vec![inv[0][0], inv[0][1], inv[1][0], inv[1][1]],
            ))
        }
        Case::AB => Err(Error::Unsupported("the one-step process is not defined for the (a, b) pair".into())),
        _ => {
            let i = fisher_scalar(spec, theta)?;
            if !(i >= 1e-12) {
                return Err(Error::Degenerate {
                    theta: theta.to_vec(),
                    reason: format!("Fisher information {i:e} below 1e-12"),
                });
            }
            Ok((vec![i], vec![1.0 / i]))
        }
    }
}

fn run(traj: &Trajectory, spec: &ModelSpec, cfg: &LearningConfig, form: Form) -> Result<EstimatorPath> {
    let dt = traj.dt;
    let horizon = traj.horizon();
    let tau = cfg.tau(horizon)?;
    let tau_idx = grid_index(tau, dt)?;
    let n = traj.n_steps;
    let x = &traj.x;

    let preliminary = preliminary_estimate(traj, spec, tau)?;
    let theta0 = preliminary.theta_star.clone();
    let (fisher_used, inv) = inverse_fisher(spec, &theta0)?;
    let dim = theta0.len();
    let dq = derived_quantities(spec, &theta0)?;
    let s2 = spec.sigma() * spec.sigma();

    let (m_tau, m_dot_tau) = initial_values_with(x, dt, &dq, tau, cfg.start)?;
    let rec = StationaryRecursion::new(&dq);
    let mut state = StationaryState { m: m_tau, m_dot: [0.0; 2] };
    state.m_dot[..dim].copy_from_slice(&m_dot_tau);

    let stride = cfg.stride.max(1);
    let cap = (n - tau_idx) / stride + 1;
    let mut times = Vec::with_capacity(cap);
    let mut theta_star = vec![Vec::with_capacity(cap); dim];
    let mut score = [0.0; 2];
    let mut info = [0.0; 4];
    let mut current = [theta0[0], *theta0.get(1).unwrap_or(&0.0)];
    let eps = match form {
        Form::Integral => 0.0,
        Form::Recurrent => cfg.epsilon_star,
    };

    for i in tau_idx..n {
        let dx = x[i + 1] - x[i];
        let innovation = dx - state.m * dt;
        let mut d_score = [0.0; 2];
        for k in 0..dim {
            d_score[k] = state.m_dot[k] / s2 * innovation;
            score[k] += d_score[k];
            for l in 0..dim {
                info[k * dim + l] += state.m_dot[k] * state.m_dot[l] / s2 * dt;
            }
        }
        state = rec.step(&state, dx, dt);

        let elapsed = (i + 1 - tau_idx) as f64 * dt;
        let u = elapsed + eps;
        match form {
            Form::Integral => {
                for k in 0..dim {
                    let corr: f64 = (0..dim).map(|l| inv[k * dim + l] * score[l]).sum();
                    current[k] = theta0[k] + corr / u;
                }
            }
            Form::Recurrent => {
                let prev = current;
                for k in 0..dim {
                    let corr: f64 = (0..dim).map(|l| inv[k * dim + l] * d_score[l]).sum();
                    current[k] = prev[k] + (theta0[k] - prev[k]) * dt / u + corr / u;
                }
            }
        }
        let step_no = i + 1 - tau_idx;
        if step_no % stride == 0 || i + 1 == n {
            times.push(tau + elapsed);
            for k in 0..dim {
                theta_star[k].push(current[k]);
            }
        }
        if !current[..dim].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("one-step path diverged at t = {}", tau + elapsed)));
        }
    }
    let span = (n - tau_idx) as f64 * dt;
    Ok(EstimatorPath {
        preliminary,
        tau,
        dt,
        stride,
        times,
        theta_star,
        fisher_used,
        information_average: info[..dim * dim].iter().map(|v| v / span).collect(),
    })
}

/// `η(v) = v √(T I(θ₀)) (θ⋆(vT) − θ₀)` on the requested `v` values.
pub fn eta_process(path: &EstimatorPath, theta0: f64, spec: &ModelSpec, horizon: f64, v_grid: &[f64]) -> Result<Vec<f64>> {
    if path.dim() != 1 {
        return Err(Error::WrongArity {
            expected: 1,
            got: path.dim(),
        });
    }
    let info = fisher_scalar(spec, &[theta0])?;
    let scale = (horizon * info).sqrt();
    v_grid
        .iter()
        .map(|&v| {
            if !(v * horizon > path.tau && v <= 1.0 + 1e-12) {
                return Err(Error::OutOfRange {
                    value: v,
                    range: "(tau/T, 1]",
                });
            }
            let theta = path.value_at(v * horizon)?[0];
            Ok(v * scale * (theta - theta0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLikelihood {
    pub grid: Vec<f64>,
    pub loglik: Vec<f64>,
    pub mle: f64,
    pub bayes: f64,
}

impl GridLikelihood {
    /// Writes `theta,loglik`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, "theta,loglik", self.grid.iter().zip(&self.loglik).map(|(t, l)| vec![*t, *l]))
    }
}

/// Log-likelihood ratio `∫ M dX/σ² − ∫ M² ds/(2σ²)` with `M(θ, 0) = 0`.
pub fn log_likelihood(x: &[f64], dt: f64, spec: &ModelSpec, theta: &[f64]) -> Result<f64> {
    let dq = derived_quantities(spec, theta)?;
    let s2 = spec.sigma() * spec.sigma();
    let (r, g) = (dq.r, dq.big_gamma);
    let mut m = 0.0;
    let (mut ito, mut quad) = (0.0, 0.0);
    let n = x.len().saturating_sub(1);
    for i in 0..n {
        let dx = x[i + 1] - x[i];
        ito += m * dx;
        let next = m - r * m * dt + g * dx;
        quad += 0.5 * (m * m + next * next) * dt;
        m = next;
    }
    Ok(ito / s2 - quad / (2.0 * s2))
}

/// Arg-max of the log-likelihood on the grid, refined by a parabola through
/// the top point and its neighbours.
pub fn mle_point(grid: &[f64], loglik: &[f64]) -> Result<f64> {
    let (best, _) = loglik
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::Numerical("no finite log-likelihood on the grid".into()))?;
    if best == 0 || best + 1 == grid.len() {
        return Ok(grid[best]);
    }
    let (x0, x1, x2) = (grid[best - 1], grid[best], grid[best + 1]);
    let (y0, y1, y2) = (loglik[best - 1], loglik[best], loglik[best + 1]);
    if !(y0.is_finite() && y2.is_finite()) {
        return Ok(x1);
    }
    let num = (x1 - x0).powi(2) * (y1 - y2) - (x1 - x2).powi(2) * (y1 - y0);
    let den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0);
    if den == 0.0 {
        return Ok(x1);
    }
    Ok((x1 - 0.5 * num / den).clamp(x0, x2))
}

/// Posterior mean by trapezoid quadrature on the grid.
pub fn bayes_point(grid: &[f64], loglik: &[f64], prior: &dyn Fn(f64) -> f64) -> Result<f64> {
    let top = loglik
        .iter()
        .copied()
        .filter(|l| l.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Numerical("no finite log-likelihood on the grid".into()));
    }
    let w: Vec<f64> = grid
        .iter()
        .zip(loglik)
        .map(|(t, l)| if l.is_finite() { prior(*t) * (l - top).exp() } else { 0.0 })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..grid.len().saturating_sub(1) {
        let h = grid[i + 1] - grid[i];
        num += 0.5 * h * (grid[i] * w[i] + grid[i + 1] * w[i + 1]);
        den += 0.5 * h * (w[i] + w[i + 1]);
    }
    if !(den > 0.0) {
        return Err(Error::Numerical("posterior normaliser vanished".into()));
    }
    Ok(num / den)
}

/// Grid MLE and Bayes estimator; a missing prior means the uniform one.
pub fn grid_mle_and_bayes(
    traj: &Trajectory,
    spec: &ModelSpec,
    theta_grid: &[f64],
    prior: Option<&dyn Fn(f64) -> f64>,
) -> Result<GridLikelihood> {
    if spec.dim() != 1 {
        return Err(Error::WrongArity {
            expected: 1,
            got: spec.dim(),
        });
    }
    if theta_grid.len() < 50 {
        return Err(Error::InsufficientData(format!(
            "likelihood grid needs at least 50 points, got {}",
            theta_grid.len()
        )));
    }
    let loglik = theta_grid
        .iter()
        .map(|t| log_likelihood(&traj.x, traj.dt, spec, &[*t]))
        .collect::<Result<Vec<_>>>()?;
    let uniform = |_: f64| 1.0;
    let prior = prior.unwrap_or(&uniform);
    Ok(GridLikelihood {
        mle: mle_point(theta_grid, &loglik)?,
        bayes: bayes_point(theta_grid, &loglik, prior)?,
        grid: theta_grid.to_vec(),
        loglik,
    })
}

/// `n` equally spaced points covering the closed interval.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}
