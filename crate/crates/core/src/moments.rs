//! Method-of-moments estimators built from unit-spaced observation increments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    exp_m1_plus_x, h_dec_inv, h_dec_derivative, h_inc_inv, k11_variance, moment_functions,
    moment_functions_of, psi_derivative, Coeffs, ModelSpec, Parametrization, ThetaBox,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentStats {
    /// Mean squared increment.
    pub r1: f64,
    /// Lag-one increment products summed and divided by `t_count`.
    pub r2: f64,
    pub t_count: usize,
}

pub fn r_statistics(increments: &[f64]) -> Result<MomentStats> {
    let n = increments.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 increments, got {n}")));
    }
    let r1 = increments.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let r2 = increments.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / n as f64;
    Ok(MomentStats { r1, r2, t_count: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmeResult {
    pub theta_star: Vec<f64>,
    /// The unconstrained solution left the box (or did not exist).
    pub clamped: bool,
    /// Moment-matching residual at `theta_star`.
    pub residual: f64,
    pub diagnostic: Option<String>,
}

fn clamp_scalar(bx: &ThetaBox, v: f64) -> (f64, bool) {
    let (c, moved) = bx.clamp(&[v]);
    (c[0], moved)
}

/// Scalar-parameter estimator matching `R₁` to the first moment function.
pub fn mme_scalar(spec: &ModelSpec, stats: &MomentStats) -> Result<MmeResult> {
    let bx = spec.theta_box();
    let s2 = spec.sigma() * spec.sigma();
    let excess = stats.r1 - s2;
    let lower = bx.0.first().map(|iv| iv.lo).unwrap_or(f64::NAN);
    let (theta, clamped, diagnostic) = match spec.parametrization() {
        Parametrization::F { a, b } | Parametrization::B { f: b, a } => {
            // f and b enter symmetrically through the product fb.
            if excess <= 0.0 {
                (lower, true, Some(format!("R1 - sigma^2 = {excess} is not positive")))
            } else {
                let sign = if bx.0[0].lo > 0.0 { 1.0 } else { -1.0 };
                let raw = sign * (a.powi(3) * excess / (b * b * exp_m1_plus_x(*a))).sqrt();
                let (v, moved) = clamp_scalar(bx, raw);
                (v, moved, None)
            }
        }
        Parametrization::A { f, b } => {
            if excess <= 0.0 {
                // Tiny excess means a very large a.
                let upper = bx.0[0].hi;
                (upper, true, Some(format!("R1 - sigma^2 = {excess} is not positive")))
            } else {
                let raw = h_dec_inv(excess / (f * f * b * b))?;
                let (v, moved) = clamp_scalar(bx, raw);
                (v, moved, None)
            }
        }
        Parametrization::Gen(_) => {
            let v = argmin_gen(spec, stats.r1)?;
            (v, false, None)
        }
        Parametrization::AF { .. } | Parametrization::AB { .. } => {
            return Err(Error::WrongArity {
                expected: 1,
                got: 2,
            })
        }
    };
    let psi = moment_functions(spec, &[theta])?.psi;
    Ok(MmeResult {
        theta_star: vec![theta],
        clamped,
        residual: (stats.r1 - psi).abs(),
        diagnostic,
    })
}

/// Grid scan of |R₁ − Ψ(θ)| over the box followed by golden-section refinement.
fn argmin_gen(spec: &ModelSpec, r1: f64) -> Result<f64> {
    let iv = spec.theta_box().0[0];
    let obj = |t: f64| -> Result<f64> { Ok((r1 - moment_functions(spec, &[t])?.psi).abs()) };
    const N: usize = 1000;
    let step = (iv.hi - iv.lo) / (N - 1) as f64;
    let grid = |i: usize| if i == N - 1 { iv.hi } else { iv.lo + step * i as f64 };
    let mut best = (0, f64::INFINITY);
    for i in 0..N {
        let v = obj(grid(i))?;
        if v < best.1 {
            best = (i, v);
        }
    }
    let (mut lo, mut hi) = (grid(best.0.saturating_sub(1)), grid((best.0 + 1).min(N - 1)));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (obj(c)?, obj(d)?);
    while hi - lo > 1e-12 * (1.0 + lo.abs()) {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = obj(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = obj(d)?;
        }
    }
    let refined = 0.5 * (lo + hi);
    // The grid point wins when the refinement bracket held no interior minimum.
    Ok(if obj(refined)? <= best.1 { refined } else { grid(best.0) })
}

/// Shared first step of the two-dimensional estimators: `(a*, fb)` magnitude.
fn mme_pair(stats: &MomentStats, known: f64, sigma: f64, bx: &ThetaBox) -> Result<MmeResult> {
    if bx.dim() != 2 {
        return Err(Error::WrongArity {
            expected: 2,
            got: bx.dim(),
        });
    }
    let excess = stats.r1 - sigma * sigma;
    let a_box = bx.0[0];
    let second_box = bx.0[1];
    let sign = if second_box.lo > 0.0 { 1.0 } else { -1.0 };
    let ratio = excess / (2.0 * stats.r2);
    let (a_raw, mut diagnostic) = if stats.r2 > 0.0 && excess > 0.0 && ratio > 0.5 {
        (h_inc_inv(ratio)?, None)
    } else if stats.r2 > 0.0 && excess > 0.0 {
        // Ratio at or below the infimum 1/2: the inversion wants a → 0.
        (a_box.lo, Some(format!("moment ratio {ratio} <= 1/2")))
    } else {
        (a_box.lo, Some(format!("R1 - sigma^2 = {excess}, R2 = {} not both positive", stats.r2)))
    };
    let a_star = a_raw.clamp(a_box.lo, a_box.hi);
    let mut clamped = a_star != a_raw || diagnostic.is_some();
    let raw_second = if stats.r2 > 0.0 {
        sign * (2.0 * a_star.powi(3) * stats.r2).sqrt() / (known.abs() * -(-a_star).exp_m1())
    } else {
        diagnostic.get_or_insert_with(|| "R2 is not positive".into());
        second_box.lo
    };
    let second = raw_second.clamp(second_box.lo, second_box.hi);
    clamped |= second != raw_second;
    Ok(MmeResult {
        theta_star: vec![a_star, second],
        clamped,
        residual: 0.0,
        diagnostic,
    })
}

fn pair_residual(stats: &MomentStats, c: Coeffs, sigma: f64) -> f64 {
    let m = moment_functions_of(c, sigma);
    (stats.r1 - m.phi1).abs() + (stats.r2 - m.phi2).abs()
}

/// Estimator of θ = (a, f) with b known.
pub fn mme_af(stats: &MomentStats, b: f64, sigma: f64, bx: &ThetaBox) -> Result<MmeResult> {
    let mut res = mme_pair(stats, b, sigma, bx)?;
    let c = Coeffs { f: res.theta_star[1], a: res.theta_star[0], b };
    res.residual = pair_residual(stats, c, sigma);
    Ok(res)
}

/// Estimator of θ = (a, b) with f known.
pub fn mme_ab(stats: &MomentStats, f: f64, sigma: f64, bx: &ThetaBox) -> Result<MmeResult> {
    let mut res = mme_pair(stats, f, sigma, bx)?;
    let c = Coeffs { f, a: res.theta_star[0], b: res.theta_star[1] };
    res.residual = pair_residual(stats, c, sigma);
    Ok(res)
}

/// Dispatches to the estimator of the model's case.
pub fn mme(spec: &ModelSpec, stats: &MomentStats) -> Result<MmeResult> {
    match spec.parametrization() {
        Parametrization::AF { b } => mme_af(stats, *b, spec.sigma(), spec.theta_box()),
        Parametrization::AB { f } => mme_ab(stats, *f, spec.sigma(), spec.theta_box()),
        _ => mme_scalar(spec, stats),
    }
}

/// Limit variance of √T(θ* − θ) for a scalar case: K₁₁ / Ψ̇(θ)².
pub fn mme_limit_variance(spec: &ModelSpec, theta: &[f64]) -> Result<f64> {
    let k11 = k11_variance(spec, theta)?;
    let d = psi_derivative(spec, theta)?;
    Ok(k11 / (d * d))
}

/// Closed form of the case-A limit variance, K₁₁ / (h′(a)² f⁴ b⁴).
pub fn mme_limit_variance_case_a(f: f64, a: f64, b: f64, k11: f64) -> f64 {
    k11 / (h_dec_derivative(a).powi(2) * f.powi(4) * b.powi(4))
}
