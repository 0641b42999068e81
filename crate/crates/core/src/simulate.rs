//! Exact-in-distribution simulation of the hidden state and the observation
//! on a uniform grid.
//!
//! Over one step of length `h`, conditionally on `Y_t = y`, the pair
//! `(Y_{t+h}, ∫_t^{t+h} Y ds)` is Gaussian with mean
//! `(y e^{-ah}, y (1 - e^{-ah}) / a)` and a covariance that depends on
//! `(a, b, h)` only, so it is factored once per path.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Coeffs};

/// Seed record of one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        RngStream {
            master_seed,
            stream_index,
        }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }
}

/// How the hidden state starts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum InitialState {
    /// `Y_0 ~ N(0, b²/(2a))`.
    #[default]
    Stationary,
    /// `Y_0 ~ N(0, variance)`.
    Gaussian { variance: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub n_steps: usize,
    /// `n_steps + 1` observations, `x[0] = x0`.
    pub x: Vec<f64>,
    /// Hidden state on the same grid, when retained.
    pub y: Option<Vec<f64>>,
    pub x0: f64,
    pub y0: f64,
    pub seed: Option<RngStream>,
    pub theta_true: Vec<f64>,
}

impl Trajectory {
    /// Wraps an observed path with no simulation record.
    pub fn from_observations(x: Vec<f64>, dt: f64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InsufficientData("empty observation path".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        Ok(Trajectory {
            dt,
            n_steps: x.len() - 1,
            x0: x[0],
            x,
            y: None,
            y0: f64::NAN,
            seed: None,
            theta_true: Vec::new(),
        })
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Grid index of time `t`, which must be a grid point.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        grid_index(t, self.dt)
    }

    /// Writes `t,x[,y]` with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        match &self.y {
            Some(y) => {
                writeln!(w, "t,x,y").map_err(io)?;
                for (i, (x, y)) in self.x.iter().zip(y).enumerate() {
                    writeln!(w, "{:.16e},{:.16e},{:.16e}", self.time(i), x, y).map_err(io)?;
                }
            }
            None => {
                writeln!(w, "t,x").map_err(io)?;
                for (i, x) in self.x.iter().enumerate() {
                    writeln!(w, "{:.16e},{:.16e}", self.time(i), x).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }
}

/// Index `k` with `k·dt = t`, allowing for rounding in `t/dt`.
pub(crate) fn grid_index(t: f64, dt: f64) -> Result<usize> {
    let k = (t / dt).round();
    if k < 0.0 || (k * dt - t).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(Error::Alignment(format!("time {t} is not a multiple of dt = {dt}")));
    }
    Ok(k as usize)
}

/// Covariance factor of `(Y_{t+h}, ∫Y ds)` given `Y_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLaw {
    /// `e^{-ah}`.
    pub decay: f64,
    /// `(1 - e^{-ah})/a`, the mean of the integral per unit of `Y_t`.
    pub integral_mean: f64,
    pub var_y: f64,
    pub var_integral: f64,
    pub cov: f64,
    l11: f64,
    l21: f64,
    l22: f64,
}

/// x − 2(1 − e^{−x}) + (1 − e^{−2x})/2, accurate for small x.
fn integral_variance_kernel(x: f64) -> f64 {
    if x < 0.1 {
        // Σ_{n≥3} (−1)^{n+1}(2^{n−1} − 2)xⁿ/n!
        let mut pow_fact = x * x * x / 6.0;
        let mut sum = 0.0;
        for n in 3..=24 {
            let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
            sum += sign * (2f64.powi(n - 1) - 2.0) * pow_fact;
            pow_fact *= x / (n + 1) as f64;
        }
        sum
    } else {
        x + 2.0 * (-x).exp_m1() - 0.5 * (-2.0 * x).exp_m1()
    }
}

impl StepLaw {
    pub fn new(a: f64, b: f64, h: f64) -> Self {
        let x = a * h;
        let one_minus = -(-x).exp_m1();
        let var_y = b * b * -(-2.0 * x).exp_m1() / (2.0 * a);
        let var_integral = b * b / a.powi(3) * integral_variance_kernel(x);
        let cov = b * b / (2.0 * a * a) * one_minus * one_minus;
        let l11 = var_y.sqrt();
        let l21 = cov / l11;
        let l22 = (var_integral - l21 * l21).max(0.0).sqrt();
        StepLaw {
            decay: (-x).exp(),
            integral_mean: one_minus / a,
            var_y,
            var_integral,
            cov,
            l11,
            l21,
            l22,
        }
    }

    /// Draws `(Y_{t+h}, ∫Y ds)` from two independent standard normals.
    pub fn step(&self, y: f64, z1: f64, z2: f64) -> (f64, f64) {
        let y_next = self.decay * y + self.l11 * z1;
        let integral = self.integral_mean * y + self.l21 * z1 + self.l22 * z2;
        (y_next, integral)
    }
}

pub fn simulate_path(
    spec: &ModelSpec,
    theta: &[f64],
    horizon: f64,
    dt: f64,
    rng: &RngStream,
    retain_hidden: bool,
) -> Result<Trajectory> {
    simulate_path_from(spec, theta, horizon, dt, rng, retain_hidden, InitialState::Stationary)
}

pub fn simulate_path_from(
    spec: &ModelSpec,
    theta: &[f64],
    horizon: f64,
    dt: f64,
    rng: &RngStream,
    retain_hidden: bool,
    init: InitialState,
) -> Result<Trajectory> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    let n_steps = grid_index(horizon, dt)?;
    let c: Coeffs = spec.coeffs(theta)?;
    if !(c.a > 0.0) {
        return Err(Error::InvalidModel(format!("a must be positive, got {}", c.a)));
    }
    let law = StepLaw::new(c.a, c.b, dt);
    let noise_sd = spec.sigma() * dt.sqrt();
    let mut gen = rng.rng();
    let mut normal = || -> f64 { StandardNormal.sample(&mut gen) };

    let y0 = match init {
        InitialState::Stationary => (c.b * c.b / (2.0 * c.a)).sqrt() * normal(),
        InitialState::Gaussian { variance } => variance.max(0.0).sqrt() * normal(),
        InitialState::Fixed(v) => v,
    };
    let mut x = Vec::with_capacity(n_steps + 1);
    let mut ys = retain_hidden.then(|| Vec::with_capacity(n_steps + 1));
    x.push(0.0);
    if let Some(ys) = ys.as_mut() {
        ys.push(y0);
    }
    let (mut xc, mut yc) = (0.0, y0);
    for _ in 0..n_steps {
        let (z1, z2, z3) = (normal(), normal(), normal());
        let (y_next, integral) = law.step(yc, z1, z2);
        xc += c.f * integral + noise_sd * z3;
        yc = y_next;
        x.push(xc);
        if let Some(ys) = ys.as_mut() {
            ys.push(yc);
        }
    }
    Ok(Trajectory {
        dt,
        n_steps,
        x,
        y: ys,
        x0: 0.0,
        y0,
        seed: Some(*rng),
        theta_true: theta.to_vec(),
    })
}

/// Unit-spaced increments `X_k − X_{k−1}`, `k = 1..floor(upto)`.
pub fn unit_increments(traj: &Trajectory, upto: f64) -> Result<Vec<f64>> {
    let per_unit = grid_index(1.0, traj.dt)?;
    if per_unit == 0 {
        return Err(Error::Alignment(format!("dt = {} exceeds one time unit", traj.dt)));
    }
    if upto > traj.horizon() * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "requested increments up to {upto} beyond the horizon {}",
            traj.horizon()
        )));
    }
    let count = (upto + 1e-9).floor() as usize;
    Ok((1..=count)
        .map(|k| traj.x[k * per_unit] - traj.x[(k - 1) * per_unit])
        .collect())
}
