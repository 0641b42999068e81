//! Kalman–Bucy filtering at a known parameter value.
//!
//! The conditional variance has an explicit solution and is never integrated
//! numerically. The stationary filter `M = f m` and its parameter derivative
//! are advanced by Euler–Maruyama on the observation increments.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derived_quantities, derived_unchecked, DerivedQuantities, ModelSpec};

/// Conditional variance γ(θ, t) started from `gamma0`.
pub fn riccati_closed(dq: &DerivedQuantities, gamma0: f64, t: f64) -> Result<f64> {
    if !(gamma0 >= 0.0) {
        return Err(Error::Domain(format!("initial variance must be nonnegative, got {gamma0}")));
    }
    if t < 0.0 {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    let gs = dq.gamma_star;
    if gamma0 == gs {
        return Ok(gs);
    }
    let f = dq.coeffs.f;
    let s2 = dq.sigma * dq.sigma;
    let r = dq.r;
    let decay = (-2.0 * r * t).exp();
    // 1/(γ − γ*) grows like e^{2rt}; the bracket never vanishes for γ0 ≥ 0.
    let bracket = 1.0 / (gamma0 - gs) + f * f / (2.0 * r * s2) * -(-2.0 * r * t).exp_m1();
    Ok(decay / bracket + gs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPath {
    pub theta: Vec<f64>,
    pub dt: f64,
    pub m: Vec<f64>,
    pub gamma: Vec<f64>,
    pub m0: f64,
    pub gamma0: f64,
}

impl FilterPath {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self
            .m
            .iter()
            .zip(&self.gamma)
            .enumerate()
            .map(|(i, (m, g))| vec![i as f64 * self.dt, *m, *g]);
        write_rows(path, "t,m,gamma", rows)
    }
}

pub(crate) fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Full Kalman–Bucy filter on the observation grid `x` with step `dt`.
pub fn kb_filter(x: &[f64], dt: f64, spec: &ModelSpec, theta: &[f64], m0: f64, gamma0: f64) -> Result<FilterPath> {
    if x.is_empty() {
        return Err(Error::InsufficientData("empty observation path".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let dq = derived_quantities(spec, theta)?;
    let Coeffs3 { f, a, s2 } = Coeffs3::of(&dq);
    let mut m = Vec::with_capacity(x.len());
    let mut gamma = Vec::with_capacity(x.len());
    let mut mc = m0;
    m.push(mc);
    gamma.push(riccati_closed(&dq, gamma0, 0.0)?);
    for (i, w) in x.windows(2).enumerate() {
        let g = gamma[i];
        let dx = w[1] - w[0];
        mc += -a * mc * dt + g * f / s2 * (dx - f * mc * dt);
        m.push(mc);
        gamma.push(riccati_closed(&dq, gamma0, (i + 1) as f64 * dt)?);
    }
    Ok(FilterPath {
        theta: theta.to_vec(),
        dt,
        m,
        gamma,
        m0,
        gamma0,
    })
}

struct Coeffs3 {
    f: f64,
    a: f64,
    s2: f64,
}

impl Coeffs3 {
    fn of(dq: &DerivedQuantities) -> Self {
        Coeffs3 {
            f: dq.coeffs.f,
            a: dq.coeffs.a,
            s2: dq.sigma * dq.sigma,
        }
    }
}

/// Coefficients of the coupled recursion for `M` and `Ṁ` at a fixed θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryRecursion {
    pub dim: usize,
    pub r: f64,
    pub big_gamma: f64,
    pub r_dot: [f64; 2],
    pub big_gamma_dot: [f64; 2],
}

/// `M` and its derivative with respect to each coordinate of θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryState {
    pub m: f64,
    pub m_dot: [f64; 2],
}

impl StationaryRecursion {
    pub fn new(dq: &DerivedQuantities) -> Self {
        let mut r_dot = [0.0; 2];
        let mut big_gamma_dot = [0.0; 2];
        for (k, g) in dq.grad.iter().enumerate().take(2) {
            r_dot[k] = g.r_dot;
            big_gamma_dot[k] = g.big_gamma_dot;
        }
        StationaryRecursion {
            dim: dq.grad.len(),
            r: dq.r,
            big_gamma: dq.big_gamma,
            r_dot,
            big_gamma_dot,
        }
    }

    /// One Euler–Maruyama step driven by the observation increment `dx`.
    #[inline]
    pub fn step(&self, s: &StationaryState, dx: f64, dt: f64) -> StationaryState {
        // Unused coordinates have zero gradients and stay at zero.
        let m_dot = std::array::from_fn(|k| {
            s.m_dot[k] - self.r * s.m_dot[k] * dt - self.r_dot[k] * s.m * dt + self.big_gamma_dot[k] * dx
        });
        StationaryState {
            m: s.m - self.r * s.m * dt + self.big_gamma * dx,
            m_dot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryFilterPath {
    pub theta: Vec<f64>,
    pub dt: f64,
    pub t_start: f64,
    pub big_m: Vec<f64>,
    /// One sequence per coordinate of θ.
    pub big_m_dot: Vec<Vec<f64>>,
    pub init_m: f64,
    pub init_m_dot: Vec<f64>,
}

impl StationaryFilterPath {
    /// Writes `t,M,Mdot` (scalar θ) or `t,M,Mdot,Mdot_f` (θ = (a, f)).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = if self.big_m_dot.len() == 2 { "t,M,Mdot,Mdot_f" } else { "t,M,Mdot" };
        let rows = (0..self.big_m.len()).map(|i| {
            let mut row = vec![self.t_start + i as f64 * self.dt, self.big_m[i]];
            row.extend(self.big_m_dot.iter().map(|d| d[i]));
            row
        });
        write_rows(path, header, rows)
    }
}

/// Runs `M(θ, ·)` and `Ṁ(θ, ·)` over the whole observation grid `x`.
pub fn stationary_filter_with_derivative(
    x: &[f64],
    dt: f64,
    spec: &ModelSpec,
    theta: &[f64],
    init_m: f64,
    init_m_dot: &[f64],
) -> Result<StationaryFilterPath> {
    let dq = derived_quantities(spec, theta)?;
    stationary_filter_from(x, dt, theta, &dq, 0.0, init_m, init_m_dot)
}

pub(crate) fn stationary_filter_from(
    x: &[f64],
    dt: f64,
    theta: &[f64],
    dq: &DerivedQuantities,
    t_start: f64,
    init_m: f64,
    init_m_dot: &[f64],
) -> Result<StationaryFilterPath> {
    if x.is_empty() {
        return Err(Error::InsufficientData("empty observation path".into()));
    }
    let dim = dq.grad.len();
    if init_m_dot.len() != dim {
        return Err(Error::WrongArity {
            expected: dim,
            got: init_m_dot.len(),
        });
    }
    let rec = StationaryRecursion::new(dq);
    let mut state = StationaryState {
        m: init_m,
        m_dot: [0.0; 2],
    };
    state.m_dot[..dim].copy_from_slice(init_m_dot);
    let mut big_m = Vec::with_capacity(x.len());
    let mut big_m_dot = vec![Vec::with_capacity(x.len()); dim];
    let mut push = |s: &StationaryState| {
        big_m.push(s.m);
        for (k, d) in big_m_dot.iter_mut().enumerate() {
            d.push(s.m_dot[k]);
        }
    };
    push(&state);
    for w in x.windows(2) {
        state = rec.step(&state, w[1] - w[0], dt);
        push(&state);
    }
    Ok(StationaryFilterPath {
        theta: theta.to_vec(),
        dt,
        t_start,
        big_m,
        big_m_dot,
        init_m,
        init_m_dot: init_m_dot.to_vec(),
    })
}

/// Unobservable filter state at time 0 used by the quadrature formulas.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StartValues {
    pub m: f64,
    pub m_dot: [f64; 2],
}

/// Trapezoid sums `∫₀^τ e^{−r(τ−s)} X̃_s ds` and `∫₀^τ (τ−s) e^{−r(τ−s)} X̃_s ds`
/// with `X̃ = X − X₀`.
pub(crate) fn discounted_integrals(x: &[f64], dt: f64, r: f64) -> (f64, f64) {
    let n = x.len() - 1;
    let tau = n as f64 * dt;
    let (mut j, mut j2) = (0.0, 0.0);
    for (i, xi) in x.iter().enumerate() {
        let lag = tau - i as f64 * dt;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let v = w * (-r * lag).exp() * (xi - x[0]);
        j += v;
        j2 += v * lag;
    }
    (j * dt, j2 * dt)
}

/// `M(θ, τ)` and `Ṁ(θ, τ)` from the stored path on `[0, τ]`.
pub fn initial_values_at_tau(
    x: &[f64],
    dt: f64,
    spec: &ModelSpec,
    theta_star: &[f64],
    tau: f64,
    start: StartValues,
) -> Result<(f64, Vec<f64>)> {
    let dq = derived_quantities(spec, theta_star)?;
    initial_values_with(x, dt, &dq, tau, start)
}

pub(crate) fn initial_values_with(
    x: &[f64],
    dt: f64,
    dq: &DerivedQuantities,
    tau: f64,
    start: StartValues,
) -> Result<(f64, Vec<f64>)> {
    let n = crate::simulate::grid_index(tau, dt)?;
    if n == 0 || x.len() < n + 1 {
        return Err(Error::InsufficientData(format!(
            "learning interval [0, {tau}] needs {} grid points, got {}",
            n + 1,
            x.len()
        )));
    }
    let xs = &x[..=n];
    let r = dq.r;
    let (j, j2) = discounted_integrals(xs, dt, r);
    let x_tau = xs[n] - xs[0];
    let decay = (-r * tau).exp();
    let m = start.m * decay + dq.big_gamma * (x_tau - r * j);
    let m_dot = dq
        .grad
        .iter()
        .enumerate()
        .map(|(k, g)| {
            (start.m_dot[k] - start.m * g.r_dot * tau) * decay + g.big_gamma_dot * x_tau
                - (g.big_gamma_dot * r + dq.big_gamma * g.r_dot) * j
                + dq.big_gamma * g.r_dot * r * j2
        })
        .collect();
    Ok((m, m_dot))
}

/// As [`stationary_filter_with_derivative`] but evaluated at a θ that may sit
/// outside the box (coefficients must still be valid).
pub fn stationary_filter_unchecked(
    x: &[f64],
    dt: f64,
    spec: &ModelSpec,
    theta: &[f64],
    init_m: f64,
    init_m_dot: &[f64],
) -> Result<StationaryFilterPath> {
    let dq = derived_unchecked(spec, theta)?;
    stationary_filter_from(x, dt, theta, &dq, 0.0, init_m, init_m_dot)
}
