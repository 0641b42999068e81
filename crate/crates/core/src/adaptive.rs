//! Adaptive Kalman–Bucy filter driven by the one-step MLE-process, and the
//! constants describing its normalised error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{discounted_integrals, riccati_closed, write_rows};
use crate::model::{derived_quantities, fisher_scalar, Coeffs, DerivedQuantities, ModelSpec};
use crate::onestep::EstimatorPath;
use crate::simulate::{grid_index, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Constant-gain filter `dm = −r m dt + B dX` at the current estimate.
    #[default]
    SteadyState,
    /// Gain `γ(θ, t) f / σ²` with the explicit variance.
    ClosedFormGamma,
    /// Variance integrated alongside the mean.
    FullRiccati,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steady_state" => Ok(Variant::SteadyState),
            "closed_form_gamma" => Ok(Variant::ClosedFormGamma),
            "full_riccati" => Ok(Variant::FullRiccati),
            other => Err(Error::Config(format!("unknown filter variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveFilterPath {
    pub variant: Variant,
    pub dt: f64,
    /// Grid times from `τ` to `T`.
    pub times: Vec<f64>,
    pub m_star: Vec<f64>,
    pub init_value: f64,
}

impl AdaptiveFilterPath {
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let i = grid_index(t - self.times[0], self.dt)?;
        self.m_star
            .get(i)
            .copied()
            .ok_or_else(|| Error::Alignment(format!("time {t} is outside the filter path")))
    }

    /// Writes `t,m_star[,m_true][,y]`; the optional columns cover the same times.
    pub fn write_csv(&self, path: &Path, m_true: Option<&[f64]>, y: Option<&[f64]>) -> Result<()> {
        let mut header = String::from("t,m_star");
        if m_true.is_some() {
            header.push_str(",m_true");
        }
        if y.is_some() {
            header.push_str(",y");
        }
        let rows = self.times.iter().enumerate().map(|(i, t)| {
            let mut row = vec![*t, self.m_star[i]];
            if let Some(m) = m_true {
                row.push(m[i]);
            }
            if let Some(y) = y {
                row.push(y[i]);
            }
            row
        });
        write_rows(path, &header, rows)
    }
}

/// Coefficients, r and r − a at a projected parameter value.
struct Local {
    c: Coeffs,
    r: f64,
    big_gamma: f64,
}

fn local(spec: &ModelSpec, theta: &[f64; 2], dim: usize) -> Result<Local> {
    let mut p = *theta;
    for (k, iv) in spec.theta_box().0.iter().enumerate().take(dim) {
        p[k] = if p[k].is_nan() { iv.lo } else { p[k].clamp(iv.lo, iv.hi) };
    }
    let c = spec.coeffs(&p[..dim])?;
    let s2 = spec.sigma() * spec.sigma();
    let q = c.f * c.f * c.b * c.b / s2;
    let r = (c.a * c.a + q).sqrt();
    Ok(Local {
        c,
        r,
        big_gamma: q / (r + c.a),
    })
}

/// Stationary prior variance `b²/(2a)`, the variance at time 0 assumed by the
/// time-varying-gain variants.
fn prior_variance(c: &Coeffs) -> f64 {
    c.b * c.b / (2.0 * c.a)
}

pub fn adaptive_filter(
    traj: &Trajectory,
    spec: &ModelSpec,
    path: &EstimatorPath,
    variant: Variant,
) -> Result<AdaptiveFilterPath> {
    let dt = traj.dt;
    if path.stride != 1 || (path.dt - dt).abs() > 1e-15 * dt {
        return Err(Error::Alignment(format!(
            "the estimator path must cover every grid point (stride {}, dt {})",
            path.stride, path.dt
        )));
    }
    let tau_idx = grid_index(path.tau, dt)?;
    let n = traj.n_steps;
    if path.times.len() != n - tau_idx {
        return Err(Error::Alignment(format!(
            "estimator path has {} points, the grid over (tau, T] has {}",
            path.times.len(),
            n - tau_idx
        )));
    }
    let dim = path.dim();
    let x = &traj.x;
    let s2 = spec.sigma() * spec.sigma();
    let prelim = &path.preliminary.theta_star;
    let dq0 = derived_quantities(spec, prelim)?;

    let (j, _) = discounted_integrals(&x[..=tau_idx], dt, dq0.r);
    let init_value = dq0.filter_gain * (x[tau_idx] - x[0] - dq0.r * j);

    let theta_at = |i: usize| -> [f64; 2] {
        // Grid index i ≥ τ; at τ itself the preliminary estimate is used.
        let mut t = [0.0; 2];
        for k in 0..dim {
            t[k] = if i == tau_idx { prelim[k] } else { path.theta_star[k][i - tau_idx - 1] };
        }
        t
    };

    let mut m = init_value;
    let mut gamma_hat = match variant {
        Variant::FullRiccati => riccati_closed(&dq0, prior_variance(&dq0.coeffs), path.tau)?,
        _ => f64::NAN,
    };
    let mut times = Vec::with_capacity(n - tau_idx + 1);
    let mut m_star = Vec::with_capacity(n - tau_idx + 1);
    times.push(path.tau);
    m_star.push(m);
    for i in tau_idx..n {
        let dx = x[i + 1] - x[i];
        let loc = local(spec, &theta_at(i), dim)?;
        let c = loc.c;
        m = match variant {
            Variant::SteadyState => m - loc.r * m * dt + loc.big_gamma / c.f * dx,
            Variant::ClosedFormGamma => {
                let dq = scalar_dq(&loc, spec.sigma());
                let g = riccati_closed(&dq, prior_variance(&c), i as f64 * dt)?;
                m - c.a * m * dt + g * c.f / s2 * (dx - c.f * m * dt)
            }
            Variant::FullRiccati => {
                let g = gamma_hat;
                gamma_hat = (g + (-2.0 * c.a * g - g * g * c.f * c.f / s2 + c.b * c.b) * dt).max(0.0);
                m - c.a * m * dt + g * c.f / s2 * (dx - c.f * m * dt)
            }
        };
        if !m.is_finite() {
            return Err(Error::Numerical(format!("adaptive filter diverged at t = {}", (i + 1) as f64 * dt)));
        }
        times.push((i + 1) as f64 * dt);
        m_star.push(m);
    }
    Ok(AdaptiveFilterPath {
        variant,
        dt,
        times,
        m_star,
        init_value,
    })
}

/// Minimal derived quantities for the explicit variance.
fn scalar_dq(loc: &Local, sigma: f64) -> DerivedQuantities {
    let c = loc.c;
    let gamma_star = sigma * sigma * loc.big_gamma / (c.f * c.f);
    DerivedQuantities {
        coeffs: c,
        sigma,
        r: loc.r,
        gamma_star,
        big_gamma: loc.big_gamma,
        filter_gain: loc.big_gamma / c.f,
        grad: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorConstants {
    pub k1: f64,
    pub k2: f64,
    /// `2 K₁ K₂ √(a r)/(a + r)`.
    pub r12: f64,
    /// `K₁² + K₂² + R₁₂`.
    pub s_star_sq: f64,
    /// `K₁² + K₂² + 2R₁₂`, the limit of `T E(m⋆ − m)²` at `v = 1`.
    pub limit_at_one: f64,
}

impl ErrorConstants {
    /// Limit of `T E(m⋆(vT) − m(vT))²` as a function of `v`.
    pub fn limit(&self, v: f64) -> f64 {
        self.limit_at_one / v
    }

    /// The same scaling applied to `S⋆²`.
    pub fn limit_sstar(&self, v: f64) -> f64 {
        self.s_star_sq / v
    }
}

pub fn error_constants_of(dq: &DerivedQuantities, info: f64) -> Result<ErrorConstants> {
    if !(info > 0.0) {
        return Err(Error::Degenerate {
            theta: Vec::new(),
            reason: format!("Fisher information {info} is not positive"),
        });
    }
    let g = dq.scalar_grad();
    let (f, a, r, s) = (dq.coeffs.f, dq.coeffs.a, dq.r, dq.sigma);
    let k1 = -(g.coeff_dot.a + g.coeff_dot.f * dq.filter_gain) * s / (f * (2.0 * a * info).sqrt());
    let k2 = g.r_dot * s / (f * (2.0 * r * info).sqrt());
    let r12 = 2.0 * k1 * k2 * (a * r).sqrt() / (a + r);
    Ok(ErrorConstants {
        k1,
        k2,
        r12,
        s_star_sq: k1 * k1 + k2 * k2 + r12,
        limit_at_one: k1 * k1 + k2 * k2 + 2.0 * r12,
    })
}

pub fn error_constants(spec: &ModelSpec, theta0: &[f64]) -> Result<ErrorConstants> {
    let info = fisher_scalar(spec, theta0)?;
    let dq = derived_quantities(spec, theta0)?;
    error_constants_of(&dq, info).map_err(|e| match e {
        Error::Degenerate { reason, .. } => Error::Degenerate {
            theta: theta0.to_vec(),
            reason,
        },
        other => other,
    })
}
