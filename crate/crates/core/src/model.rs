//! Parameter spaces, coefficient maps and closed-form quantities of the
//! partially observed system
//!
//! ```text
//! dX = f(θ) Y dt + σ dW,    dY = -a(θ) Y dt + b(θ) dV.
//! ```
//!
//! Parameters are passed as slices: one coordinate for the scalar cases and
//! `[a, f]` or `[a, b]` for the two-dimensional ones.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which coefficients are unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    F,
    A,
    B,
    AF,
    AB,
    #[serde(rename = "GEN")]
    Gen,
}

impl Case {
    pub fn dim(self) -> usize {
        match self {
            Case::AF | Case::AB => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Case::F => "F",
            Case::A => "A",
            Case::B => "B",
            Case::AF => "AF",
            Case::AB => "AB",
            Case::Gen => "GEN",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F" => Ok(Case::F),
            "A" => Ok(Case::A),
            "B" => Ok(Case::B),
            "AF" => Ok(Case::AF),
            "AB" => Ok(Case::AB),
            "GEN" => Ok(Case::Gen),
            other => Err(Error::Config(format!("unknown case {other:?}"))),
        }
    }
}

/// A triple of coefficient values (or of their derivatives).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Coeffs {
    pub f: f64,
    pub a: f64,
    pub b: f64,
}

/// User-supplied smooth scalar parametrisation θ ↦ (f, a, b).
pub trait CoefficientMap: Send + Sync + fmt::Debug {
    fn value(&self, theta: f64) -> Coeffs;
    fn first_derivative(&self, theta: f64) -> Coeffs;
    fn second_derivative(&self, theta: f64) -> Coeffs;
}

/// How θ enters the coefficients, together with the known coefficients.
#[derive(Debug, Clone)]
pub enum Parametrization {
    /// θ = f.
    F { a: f64, b: f64 },
    /// θ = a.
    A { f: f64, b: f64 },
    /// θ = b.
    B { f: f64, a: f64 },
    /// θ = (a, f).
    AF { b: f64 },
    /// θ = (a, b).
    AB { f: f64 },
    Gen(Arc<dyn CoefficientMap>),
}

impl Parametrization {
    pub fn case(&self) -> Case {
        match self {
            Parametrization::F { .. } => Case::F,
            Parametrization::A { .. } => Case::A,
            Parametrization::B { .. } => Case::B,
            Parametrization::AF { .. } => Case::AF,
            Parametrization::AB { .. } => Case::AB,
            Parametrization::Gen(_) => Case::Gen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

/// Closed parameter box, one interval per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBox(pub Vec<Interval>);

impl ThetaBox {
    pub fn scalar(lo: f64, hi: f64) -> Self {
        ThetaBox(vec![Interval::new(lo, hi)])
    }

    pub fn pair(first: (f64, f64), second: (f64, f64)) -> Self {
        ThetaBox(vec![
            Interval::new(first.0, first.1),
            Interval::new(second.0, second.1),
        ])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.0.len() && self.0.iter().zip(theta).all(|(iv, &t)| iv.contains(t))
    }

    /// Projection onto the box; the flag reports whether any coordinate moved.
    pub fn clamp(&self, theta: &[f64]) -> (Vec<f64>, bool) {
        let mut moved = false;
        let out = self
            .0
            .iter()
            .zip(theta)
            .map(|(iv, &t)| {
                let c = if t.is_nan() { iv.lo } else { t.clamp(iv.lo, iv.hi) };
                moved |= c != t;
                c
            })
            .collect();
        (out, moved)
    }
}

/// A validated model: parametrisation, observation noise level and box.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    param: Parametrization,
    sigma: f64,
    theta_box: ThetaBox,
}

/// Known coefficients, as read from a configuration file or the command line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Knowns {
    pub f: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl ModelSpec {
    pub fn new(param: Parametrization, sigma: f64, theta_box: ThetaBox) -> Result<Self> {
        let spec = ModelSpec {
            param,
            sigma,
            theta_box,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds one of the built-in cases from its known coefficients.
    pub fn from_case(case: Case, knowns: Knowns, sigma: f64, theta_box: ThetaBox) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::InvalidModel(format!("case {case} needs a known {name}")))
        };
        let param = match case {
            Case::F => Parametrization::F {
                a: need(knowns.a, "a")?,
                b: need(knowns.b, "b")?,
            },
            Case::A => Parametrization::A {
                f: need(knowns.f, "f")?,
                b: need(knowns.b, "b")?,
            },
            Case::B => Parametrization::B {
                f: need(knowns.f, "f")?,
                a: need(knowns.a, "a")?,
            },
            Case::AF => Parametrization::AF {
                b: need(knowns.b, "b")?,
            },
            Case::AB => Parametrization::AB {
                f: need(knowns.f, "f")?,
            },
            Case::Gen => {
                return Err(Error::InvalidModel(
                    "the GEN case needs a coefficient map, use ModelSpec::new".into(),
                ))
            }
        };
        ModelSpec::new(param, sigma, theta_box)
    }

    pub fn case(&self) -> Case {
        self.param.case()
    }

    pub fn dim(&self) -> usize {
        self.case().dim()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn theta_box(&self) -> &ThetaBox {
        &self.theta_box
    }

    pub fn parametrization(&self) -> &Parametrization {
        &self.param
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidModel(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.theta_box.dim() != self.dim() {
            return Err(Error::WrongArity {
                expected: self.dim(),
                got: self.theta_box.dim(),
            });
        }
        for iv in &self.theta_box.0 {
            if !(iv.lo < iv.hi && iv.lo.is_finite() && iv.hi.is_finite()) {
                return Err(Error::InvalidModel(format!("empty box interval [{}, {}]", iv.lo, iv.hi)));
            }
        }
        let bx = &self.theta_box.0;
        let nonzero = |v: f64, name: &str| {
            if v != 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!("{name} must be finite and nonzero")))
            }
        };
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!("{name} must be positive")))
            }
        };
        let box_nonzero = |iv: &Interval, name: &str| {
            if iv.excludes_zero() {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!("the box for {name} contains 0")))
            }
        };
        match &self.param {
            Parametrization::F { a, b } => {
                positive(*a, "a")?;
                nonzero(*b, "b")?;
                box_nonzero(&bx[0], "f")
            }
            Parametrization::A { f, b } => {
                nonzero(*f, "f")?;
                nonzero(*b, "b")?;
                positive(bx[0].lo, "the lower bound for a")
            }
            Parametrization::B { f, a } => {
                nonzero(*f, "f")?;
                positive(*a, "a")?;
                box_nonzero(&bx[0], "b")
            }
            Parametrization::AF { b } => {
                nonzero(*b, "b")?;
                positive(bx[0].lo, "the lower bound for a")?;
                box_nonzero(&bx[1], "f")
            }
            Parametrization::AB { f } => {
                nonzero(*f, "f")?;
                positive(bx[0].lo, "the lower bound for a")?;
                box_nonzero(&bx[1], "b")
            }
            Parametrization::Gen(map) => {
                let iv = bx[0];
                const N: usize = 1000;
                for i in 0..=N {
                    let t = iv.lo + (iv.hi - iv.lo) * i as f64 / N as f64;
                    check_coeffs(map.value(t), &[t])?;
                }
                Ok(())
            }
        }
    }

    fn check_arity(&self, theta: &[f64]) -> Result<()> {
        if theta.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::WrongArity {
                expected: self.dim(),
                got: theta.len(),
            })
        }
    }

    pub fn check_in_box(&self, theta: &[f64]) -> Result<()> {
        self.check_arity(theta)?;
        if self.theta_box.contains(theta) {
            Ok(())
        } else {
            Err(Error::OutsideBox {
                theta: theta.to_vec(),
            })
        }
    }

    /// Coefficient values at θ (no box check).
    pub fn coeffs(&self, theta: &[f64]) -> Result<Coeffs> {
        self.check_arity(theta)?;
        Ok(match &self.param {
            Parametrization::F { a, b } => Coeffs { f: theta[0], a: *a, b: *b },
            Parametrization::A { f, b } => Coeffs { f: *f, a: theta[0], b: *b },
            Parametrization::B { f, a } => Coeffs { f: *f, a: *a, b: theta[0] },
            Parametrization::AF { b } => Coeffs { f: theta[1], a: theta[0], b: *b },
            Parametrization::AB { f } => Coeffs { f: *f, a: theta[0], b: theta[1] },
            Parametrization::Gen(map) => map.value(theta[0]),
        })
    }

    /// Partial derivatives of (f, a, b), one triple per coordinate of θ.
    pub fn coeff_grad(&self, theta: &[f64]) -> Result<Vec<Coeffs>> {
        self.check_arity(theta)?;
        const DF: Coeffs = Coeffs { f: 1.0, a: 0.0, b: 0.0 };
        const DA: Coeffs = Coeffs { f: 0.0, a: 1.0, b: 0.0 };
        const DB: Coeffs = Coeffs { f: 0.0, a: 0.0, b: 1.0 };
        Ok(match &self.param {
            Parametrization::F { .. } => vec![DF],
            Parametrization::A { .. } => vec![DA],
            Parametrization::B { .. } => vec![DB],
            Parametrization::AF { .. } => vec![DA, DF],
            Parametrization::AB { .. } => vec![DA, DB],
            Parametrization::Gen(map) => vec![map.first_derivative(theta[0])],
        })
    }

    /// A model with the same parametrisation and noise but a different box.
    pub fn with_box(&self, theta_box: ThetaBox) -> Result<Self> {
        ModelSpec::new(self.param.clone(), self.sigma, theta_box)
    }
}

fn check_coeffs(c: Coeffs, theta: &[f64]) -> Result<()> {
    if c.a > 0.0 && c.f != 0.0 && c.b != 0.0 && c.f.is_finite() && c.a.is_finite() && c.b.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!(
            "coefficients at theta = {theta:?} violate a > 0, f != 0, b != 0: {c:?}"
        )))
    }
}

/// θ-derivatives of the derived quantities with respect to one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedGrad {
    pub coeff_dot: Coeffs,
    pub r_dot: f64,
    pub big_gamma_dot: f64,
    pub gain_dot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedQuantities {
    pub coeffs: Coeffs,
    pub sigma: f64,
    pub r: f64,
    pub gamma_star: f64,
    /// γ* f²/σ² = r − a.
    pub big_gamma: f64,
    /// (r − a)/f.
    pub filter_gain: f64,
    pub grad: Vec<DerivedGrad>,
}

impl DerivedQuantities {
    /// Derivatives for a scalar parameter.
    pub fn scalar_grad(&self) -> &DerivedGrad {
        &self.grad[0]
    }

    /// Fisher information entry built from coordinates `i` and `j`.
    pub fn fisher_entry(&self, i: usize, j: usize) -> f64 {
        let (gi, gj) = (&self.grad[i], &self.grad[j]);
        let (a, r) = (self.coeffs.a, self.r);
        gi.coeff_dot.a * gj.coeff_dot.a / (2.0 * a)
            - (gi.coeff_dot.a * gj.r_dot + gj.coeff_dot.a * gi.r_dot) / (r + a)
            + gi.r_dot * gj.r_dot / (2.0 * r)
    }
}

/// r, γ*, Γ, B and their θ-derivatives; θ must lie in the box.
pub fn derived_quantities(spec: &ModelSpec, theta: &[f64]) -> Result<DerivedQuantities> {
    spec.check_in_box(theta)?;
    derived_unchecked(spec, theta)
}

/// As [`derived_quantities`] without the box check (coefficient validity is
/// still enforced). Used for finite differences and projected estimates.
pub fn derived_unchecked(spec: &ModelSpec, theta: &[f64]) -> Result<DerivedQuantities> {
    let c = spec.coeffs(theta)?;
    check_coeffs(c, theta)?;
    let sigma = spec.sigma;
    let s2 = sigma * sigma;
    let q = c.f * c.f * c.b * c.b / s2;
    let r = (c.a * c.a + q).sqrt();
    // r − a without cancellation.
    let big_gamma = q / (r + c.a);
    let gamma_star = s2 * big_gamma / (c.f * c.f);
    let filter_gain = big_gamma / c.f;
    let grad = spec
        .coeff_grad(theta)?
        .into_iter()
        .map(|d| {
            let q_dot = 2.0 * c.f * c.b * (d.f * c.b + c.f * d.b) / s2;
            let r_dot = (c.a * d.a + 0.5 * q_dot) / r;
            let big_gamma_dot = r_dot - d.a;
            let gain_dot = (big_gamma_dot * c.f - big_gamma * d.f) / (c.f * c.f);
            DerivedGrad {
                coeff_dot: d,
                r_dot,
                big_gamma_dot,
                gain_dot,
            }
        })
        .collect();
    Ok(DerivedQuantities {
        coeffs: c,
        sigma,
        r,
        gamma_star,
        big_gamma,
        filter_gain,
        grad,
    })
}

/// Scalar Fisher information ȧ²/(2a) − 2ȧṙ/(r+a) + ṙ²/(2r).
pub fn fisher_scalar(spec: &ModelSpec, theta: &[f64]) -> Result<f64> {
    if spec.dim() != 1 {
        return Err(Error::WrongArity {
            expected: 1,
            got: spec.dim(),
        });
    }
    spec.check_in_box(theta)?;
    let s = spec.sigma;
    // The closed forms avoid the cancellation of the general sum when f b/σ ≪ a.
    match spec.param {
        Parametrization::F { a, b } => Ok(fisher_case_f(theta[0], a, b, s)),
        Parametrization::A { f, b } => Ok(fisher_case_a(f, theta[0], b, s).1),
        Parametrization::B { f, a } => Ok(fisher_case_b(f, a, theta[0], s)),
        _ => Ok(derived_quantities(spec, theta)?.fisher_entry(0, 0)),
    }
}

/// Closed form for θ = f.
pub fn fisher_case_f(f: f64, a: f64, b: f64, sigma: f64) -> f64 {
    let r = (a * a + f * f * b * b / (sigma * sigma)).sqrt();
    b.powi(4) * f * f / (2.0 * sigma.powi(4) * r.powi(3))
}

/// Closed form for θ = b.
pub fn fisher_case_b(f: f64, a: f64, b: f64, sigma: f64) -> f64 {
    fisher_case_f(b, a, f, sigma)
}

/// The two algebraically equivalent closed forms for θ = a.
pub fn fisher_case_a(f: f64, a: f64, b: f64, sigma: f64) -> (f64, f64) {
    let q = f * f * b * b / (sigma * sigma);
    let r = (a * a + q).sqrt();
    let den = 2.0 * a * r.powi(3) * (r + a);
    // r² − a² = q and r − a = q/(r + a), without cancellation.
    let r_minus_a = q / (r + a);
    let first = (q * q + r * a * r_minus_a * r_minus_a) / den;
    let g = f * f * b * b / (sigma * sigma) / (r + a);
    let second = g * g * ((r + a).powi(2) + r * a) / den;
    (first, second)
}

/// Fisher matrix of a two-dimensional case, polarising the scalar formula.
pub fn fisher_matrix(spec: &ModelSpec, theta: &[f64]) -> Result<[[f64; 2]; 2]> {
    if spec.dim() != 2 {
        return Err(Error::WrongArity {
            expected: 2,
            got: spec.dim(),
        });
    }
    let dq = derived_quantities(spec, theta)?;
    let i12 = dq.fisher_entry(0, 1);
    let m = [[dq.fisher_entry(0, 0), i12], [i12, dq.fisher_entry(1, 1)]];
    check_positive_definite(&m, theta)?;
    Ok(m)
}

/// Closed-form Fisher matrix for θ = (a, f).
pub fn fisher_matrix_af(spec: &ModelSpec, theta: &[f64]) -> Result<[[f64; 2]; 2]> {
    let Parametrization::AF { b } = spec.param else {
        return Err(Error::InvalidModel(format!(
            "the (a, f) Fisher matrix needs case AF, got {}",
            spec.case()
        )));
    };
    spec.check_in_box(theta)?;
    let (a, f, s) = (theta[0], theta[1], spec.sigma);
    let q = f * f * b * b / (s * s);
    let r = (a * a + q).sqrt();
    let (i11, _) = fisher_case_a(f, a, b, s);
    // a² + ra − 2r² = −q(a + 2r)/(r + a), free of cancellation when q is small.
    let cross = -q * (a + 2.0 * r) / (r + a);
    let i12 = b * b * f * cross / (2.0 * r.powi(3) * (r + a) * s * s);
    let i22 = fisher_case_f(f, a, b, s);
    let m = [[i11, i12], [i12, i22]];
    check_positive_definite(&m, theta)?;
    Ok(m)
}

fn check_positive_definite(m: &[[f64; 2]; 2], theta: &[f64]) -> Result<()> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if m[0][0] > 0.0 && det > 0.0 && det.is_finite() {
        Ok(())
    } else {
        Err(Error::Degenerate {
            theta: theta.to_vec(),
            reason: format!("Fisher matrix {m:?} is not positive definite"),
        })
    }
}

/// Inverse of a symmetric 2×2 matrix.
pub fn invert_2x2(m: &[[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

/// e^{−x} − 1 + x, accurate for small x.
pub fn exp_m1_plus_x(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        // Alternating series; six terms reach double precision here.
        let mut term = x * x / 2.0;
        let mut sum = term;
        for n in 3..=8 {
            term *= -x / n as f64;
            sum += term;
        }
        sum
    } else {
        x + (-x).exp_m1()
    }
}

/// Limits of the increment moment statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentFunctions {
    /// Mean squared unit increment.
    pub phi1: f64,
    /// Mean lag-one product of unit increments.
    pub phi2: f64,
    /// The function inverted by the general scalar estimator; equals `phi1`.
    pub psi: f64,
}

pub fn moment_functions_of(c: Coeffs, sigma: f64) -> MomentFunctions {
    let fb2 = c.f * c.f * c.b * c.b;
    let a3 = c.a.powi(3);
    let phi1 = fb2 / a3 * exp_m1_plus_x(c.a) + sigma * sigma;
    let phi2 = fb2 / (2.0 * a3) * (-c.a).exp_m1().powi(2);
    MomentFunctions {
        phi1,
        phi2,
        psi: phi1,
    }
}

pub fn moment_functions(spec: &ModelSpec, theta: &[f64]) -> Result<MomentFunctions> {
    spec.check_in_box(theta)?;
    let c = spec.coeffs(theta)?;
    check_coeffs(c, theta)?;
    Ok(moment_functions_of(c, spec.sigma))
}

/// dΨ/dθ for a scalar parameter.
pub fn psi_derivative(spec: &ModelSpec, theta: &[f64]) -> Result<f64> {
    if spec.dim() != 1 {
        return Err(Error::WrongArity {
            expected: 1,
            got: spec.dim(),
        });
    }
    let c = spec.coeffs(theta)?;
    check_coeffs(c, theta)?;
    let d = spec.coeff_grad(theta)?[0];
    let h = h_dec(c.a);
    Ok(2.0 * c.f * d.f * c.b * c.b * h
        + 2.0 * c.f * c.f * c.b * d.b * h
        + c.f * c.f * c.b * c.b * h_dec_derivative(c.a) * d.a)
}

/// The four terms of the limit variance of √T(R₁ − Φ₁).
pub fn k11_terms(c: Coeffs, sigma: f64) -> [f64; 4] {
    let fb2 = c.f * c.f * c.b * c.b;
    let a3 = c.a.powi(3);
    let e = exp_m1_plus_x(c.a);
    let one_minus = -(-c.a).exp_m1();
    let s2 = sigma * sigma;
    [
        2.0 * fb2 * fb2 / (a3 * a3) * e * e,
        fb2 * fb2 * one_minus.powi(3) / (a3 * a3 * (1.0 + (-c.a).exp())),
        4.0 * fb2 * s2 / a3 * e,
        2.0 * s2 * s2,
    ]
}

pub fn k11_variance(spec: &ModelSpec, theta: &[f64]) -> Result<f64> {
    spec.check_in_box(theta)?;
    let c = spec.coeffs(theta)?;
    check_coeffs(c, theta)?;
    Ok(k11_terms(c, spec.sigma).iter().sum())
}

/// x⁻³(x − 1 + e⁻ˣ), strictly decreasing from +∞ to 0 on (0, ∞).
pub fn h_dec(x: f64) -> f64 {
    exp_m1_plus_x(x) / x.powi(3)
}

/// Derivative of [`h_dec`]: x⁻⁴(3 − 2x − (3 + x)e⁻ˣ).
pub fn h_dec_derivative(x: f64) -> f64 {
    let num = if x < 0.1 {
        // Σ_{n≥2} (−1)^{n+1}(3−n)xⁿ/n!
        let mut pow_fact = x * x / 2.0;
        let mut sum = 0.0;
        for n in 2..=20 {
            let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
            sum += sign * (3.0 - n as f64) * pow_fact;
            pow_fact *= x / (n + 1) as f64;
        }
        sum
    } else {
        3.0 - 2.0 * x - (3.0 + x) * (-x).exp()
    };
    num / x.powi(4)
}

/// (e⁻ˣ − 1 + x)/(1 − e⁻ˣ)², strictly increasing from 1/2 to ∞ on (0, ∞).
pub fn h_inc(x: f64) -> f64 {
    exp_m1_plus_x(x) / (-x).exp_m1().powi(2)
}

/// Bisection on a monotone function, run until the bracket cannot shrink.
fn bisect(lo: f64, hi: f64, mut above: impl FnMut(f64) -> bool) -> f64 {
    // `above(x)` is true on the high side of the root.
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if above(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn h_dec_inv(y: f64) -> Result<f64> {
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::OutOfRange {
            value: y,
            range: "(0, inf)",
        });
    }
    let (mut lo, mut hi) = (1.0_f64, 1.0_f64);
    while h_dec(lo) < y {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::Numerical(format!("cannot bracket h_dec_inv({y})")));
        }
    }
    while h_dec(hi) > y {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Numerical(format!("cannot bracket h_dec_inv({y})")));
        }
    }
    Ok(bisect(lo, hi, |x| h_dec(x) <= y))
}

pub fn h_inc_inv(y: f64) -> Result<f64> {
    if !(y > 0.5 && y.is_finite()) {
        return Err(Error::OutOfRange {
            value: y,
            range: "(1/2, inf)",
        });
    }
    let (mut lo, mut hi) = (1.0_f64, 1.0_f64);
    while h_inc(lo) > y {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::Numerical(format!("cannot bracket h_inc_inv({y})")));
        }
    }
    while h_inc(hi) < y {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Numerical(format!("cannot bracket h_inc_inv({y})")));
        }
    }
    Ok(bisect(lo, hi, |x| h_inc(x) >= y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_f() -> ModelSpec {
        ModelSpec::new(Parametrization::F { a: 1.0, b: 1.0 }, 1.0, ThetaBox::scalar(0.5, 2.0)).unwrap()
    }

    fn unit_a() -> ModelSpec {
        ModelSpec::new(Parametrization::A { f: 1.0, b: 1.0 }, 1.0, ThetaBox::scalar(0.5, 2.0)).unwrap()
    }

    fn unit_b() -> ModelSpec {
        ModelSpec::new(Parametrization::B { f: 1.0, a: 1.0 }, 1.0, ThetaBox::scalar(0.5, 2.0)).unwrap()
    }

    fn unit_af() -> ModelSpec {
        ModelSpec::new(Parametrization::AF { b: 1.0 }, 1.0, ThetaBox::pair((0.5, 2.0), (0.5, 2.0))).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    /// f(θ) = θ, a(θ) = 1 + θ², b(θ) = 2 − θ/2.
    #[derive(Debug)]
    struct Curved;

    impl CoefficientMap for Curved {
        fn value(&self, t: f64) -> Coeffs {
            Coeffs { f: t, a: 1.0 + t * t, b: 2.0 - 0.5 * t }
        }
        fn first_derivative(&self, t: f64) -> Coeffs {
            Coeffs { f: 1.0, a: 2.0 * t, b: -0.5 }
        }
        fn second_derivative(&self, _t: f64) -> Coeffs {
            Coeffs { f: 0.0, a: 2.0, b: 0.0 }
        }
    }

    fn curved() -> ModelSpec {
        ModelSpec::new(Parametrization::Gen(Arc::new(Curved)), 0.8, ThetaBox::scalar(0.5, 2.0)).unwrap()
    }

    #[test]
    fn unit_point_derived_values() {
        let dq = derived_quantities(&unit_f(), &[1.0]).unwrap();
        assert!(rel(dq.r, std::f64::consts::SQRT_2) < 1e-15);
        let g = 0.414_213_562_373_095_05;
        assert!(rel(dq.gamma_star, g) < 1e-14);
        assert!(rel(dq.big_gamma, g) < 1e-14);
        assert!(rel(dq.filter_gain, g) < 1e-14);
    }

    #[test]
    fn r_depends_on_ratio_only() {
        let spec = ModelSpec::new(Parametrization::F { a: 1.0, b: 1.0 }, 2.0, ThetaBox::scalar(0.5, 3.0)).unwrap();
        let dq = derived_quantities(&spec, &[2.0]).unwrap();
        assert!(rel(dq.r, std::f64::consts::SQRT_2) < 1e-15);
    }

    #[test]
    fn derived_identities_on_grid() {
        for spec in [unit_f(), unit_a(), unit_b(), curved()] {
            for i in 0..100 {
                let t = 0.5 + 1.5 * i as f64 / 99.0;
                let dq = derived_quantities(&spec, &[t]).unwrap();
                let c = dq.coeffs;
                let s2 = spec.sigma() * spec.sigma();
                assert!(dq.r >= c.a);
                assert!(rel(dq.big_gamma, dq.r - c.a) < 1e-12);
                assert!(rel(dq.gamma_star * c.f * c.f / s2, dq.big_gamma) < 1e-12);
                let resid = -2.0 * c.a * dq.gamma_star - dq.gamma_star.powi(2) * c.f * c.f / s2 + c.b * c.b;
                assert!(resid.abs() < 1e-10 * c.b * c.b);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        let specs = [unit_f(), unit_a(), unit_b(), curved(), unit_af()];
        for spec in &specs {
            for t in [0.6, 1.0, 1.7] {
                let theta: Vec<f64> = vec![t; spec.dim()];
                let dq = derived_quantities(spec, &theta).unwrap();
                for k in 0..spec.dim() {
                    let mut up = theta.clone();
                    let mut dn = theta.clone();
                    up[k] += h;
                    dn[k] -= h;
                    let p = derived_unchecked(spec, &up).unwrap();
                    let m = derived_unchecked(spec, &dn).unwrap();
                    let g = &dq.grad[k];
                    let check = |exact: f64, fd: f64| {
                        assert!((exact - fd).abs() <= 1e-5 * exact.abs().max(1e-3), "{exact} vs {fd}");
                    };
                    check(g.r_dot, (p.r - m.r) / (2.0 * h));
                    check(g.big_gamma_dot, (p.big_gamma - m.big_gamma) / (2.0 * h));
                    check(g.gain_dot, (p.filter_gain - m.filter_gain) / (2.0 * h));
                }
            }
        }
    }

    #[test]
    fn fisher_unit_values() {
        let i_f = fisher_scalar(&unit_f(), &[1.0]).unwrap();
        assert!(rel(i_f, 0.176_776_695_296_636_88) < 1e-13);
        let i_a = fisher_scalar(&unit_a(), &[1.0]).unwrap();
        assert!(rel(i_a, 0.090_990_257_669_731_93) < 1e-13);
        let (first, second) = fisher_case_a(1.0, 1.0, 1.0, 1.0);
        assert!(rel(first, second) < 1e-13);
        let i_b = fisher_scalar(&unit_b(), &[1.0]).unwrap();
        assert!(rel(i_b, i_f) < 1e-14);
    }

    #[test]
    fn fisher_closed_forms_agree_with_general_formula() {
        for i in 0..100 {
            let t = 0.5 + 1.5 * i as f64 / 99.0;
            let s = 1.0;
            let general = |sp: &ModelSpec| derived_quantities(sp, &[t]).unwrap().fisher_entry(0, 0);
            assert!(rel(general(&unit_f()), fisher_case_f(t, 1.0, 1.0, s)) < 1e-10);
            assert!(rel(general(&unit_b()), fisher_case_b(1.0, 1.0, t, s)) < 1e-10);
            let (p, q) = fisher_case_a(1.0, t, 1.0, s);
            let g = general(&unit_a());
            assert!(rel(g, p) < 1e-10 && rel(g, q) < 1e-10);
        }
    }

    #[test]
    fn fisher_scalar_rejects_pairs() {
        assert!(matches!(
            fisher_scalar(&unit_af(), &[1.0, 1.0]),
            Err(Error::WrongArity { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn fisher_matrix_af_unit_point() {
        let m = fisher_matrix_af(&unit_af(), &[1.0, 1.0]).unwrap();
        assert!(rel(m[0][0], 0.090_990_257_669_731_93) < 1e-13);
        assert!(rel(m[0][1], -0.116_116_523_516_815_59) < 1e-12);
        assert!(rel(m[1][1], 0.176_776_695_296_636_88) < 1e-13);
        assert_eq!(m[0][1], m[1][0]);
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        assert!(rel(det, 0.002_601_910_021_413_489_4) < 1e-10);
        let inv = invert_2x2(&m).unwrap();
        assert!(rel(inv[0][0], 67.941_125_496_954_28) < 1e-10);
        assert!(rel(inv[0][1], 44.627_416_997_969_52) < 1e-10);
        assert!(rel(inv[1][1], 34.970_562_748_477_14) < 1e-10);
    }

    #[test]
    fn fisher_matrix_af_on_grid() {
        let spec = unit_af();
        for i in 0..20 {
            for j in 0..20 {
                let th = [0.5 + 1.5 * i as f64 / 19.0, 0.5 + 1.5 * j as f64 / 19.0];
                let closed = fisher_matrix_af(&spec, &th).unwrap();
                let polar = fisher_matrix(&spec, &th).unwrap();
                for (r1, r2) in closed.iter().zip(&polar) {
                    for (x, y) in r1.iter().zip(r2) {
                        assert!((x - y).abs() < 1e-12 * (1.0 + y.abs()));
                    }
                }
                assert_eq!(closed[1][1], fisher_case_f(th[1], th[0], 1.0, 1.0));
            }
        }
    }

    #[test]
    fn moment_functions_unit_point() {
        let m = moment_functions(&unit_f(), &[1.0]).unwrap();
        assert!(rel(m.phi1, 1.367_879_441_171_442_3) < 1e-14);
        assert!(rel(m.phi2, 0.199_788_200_446_864_02) < 1e-13);
        assert_eq!(m.psi, m.phi1);
    }

    #[test]
    fn k11_unit_point() {
        let t = k11_terms(Coeffs { f: 1.0, a: 1.0, b: 1.0 }, 1.0);
        assert!(rel(t[0], 0.270_670_566_473_225_4) < 1e-13);
        assert!(rel(t[1], 0.184_651_110_489_195_63) < 1e-13);
        assert!(rel(t[2], 1.471_517_764_685_769_3) < 1e-13);
        assert_eq!(t[3], 2.0);
        let k = k11_variance(&unit_a(), &[1.0]).unwrap();
        assert!(rel(k, 3.926_839_441_648_190_3) < 1e-13);
    }

    #[test]
    fn h_functions_at_one() {
        let e1 = (-1.0_f64).exp();
        assert!(rel(h_dec(1.0), e1) < 1e-15);
        assert!((h_dec_inv(e1).unwrap() - 1.0).abs() < 1e-12);
        assert!(rel(h_dec_derivative(1.0), 1.0 - 4.0 * e1) < 1e-14);
        assert!(rel(h_inc(1.0), 0.920_673_594_207_792_3) < 1e-14);
        assert!((h_inc_inv(0.920_673_594_207_792_3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn h_inc_limit_at_zero() {
        assert!((h_inc(1e-6) - 0.5).abs() < 1e-6);
        assert!(matches!(h_inc_inv(0.5), Err(Error::OutOfRange { .. })));
        assert!(matches!(h_dec_inv(0.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn h_dec_derivative_series_matches_direct_form() {
        for x in [0.05_f64, 0.099, 0.1] {
            let direct = (3.0 - 2.0 * x - (3.0 + x) * (-x).exp()) / x.powi(4);
            assert!(rel(h_dec_derivative(x), direct) < 1e-6);
        }
    }

    #[test]
    fn h_monotone_on_grid() {
        let xs: Vec<f64> = (0..1000).map(|i| 1e-3 + (20.0 - 1e-3) * i as f64 / 999.0).collect();
        for w in xs.windows(2) {
            assert!(h_dec(w[1]) < h_dec(w[0]));
            assert!(h_inc(w[1]) > h_inc(w[0]));
        }
    }

    #[test]
    fn psi_derivative_matches_finite_difference() {
        for spec in [unit_f(), unit_a(), unit_b(), curved()] {
            let h = 1e-6;
            let t = 1.1;
            let fd = (moment_functions(&spec, &[t + h]).unwrap().psi
                - moment_functions(&spec, &[t - h]).unwrap().psi)
                / (2.0 * h);
            assert!(rel(psi_derivative(&spec, &[t]).unwrap(), fd) < 1e-6);
        }
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(ModelSpec::new(Parametrization::F { a: -1.0, b: 1.0 }, 1.0, ThetaBox::scalar(0.5, 2.0)).is_err());
        assert!(ModelSpec::new(Parametrization::F { a: 1.0, b: 1.0 }, 1.0, ThetaBox::scalar(-0.5, 2.0)).is_err());
        assert!(ModelSpec::new(Parametrization::A { f: 1.0, b: 1.0 }, 1.0, ThetaBox::scalar(0.0, 2.0)).is_err());
        assert!(ModelSpec::new(Parametrization::F { a: 1.0, b: 1.0 }, 0.0, ThetaBox::scalar(0.5, 2.0)).is_err());
        assert!(ModelSpec::new(Parametrization::AF { b: 1.0 }, 1.0, ThetaBox::scalar(0.5, 2.0)).is_err());
        assert!(matches!(
            derived_quantities(&unit_f(), &[3.0]),
            Err(Error::OutsideBox { .. })
        ));
    }

    #[test]
    fn clamp_reports_movement() {
        let bx = ThetaBox::pair((0.5, 2.0), (0.5, 2.0));
        assert_eq!(bx.clamp(&[1.0, 1.0]), (vec![1.0, 1.0], false));
        assert_eq!(bx.clamp(&[0.1, 3.0]), (vec![0.5, 2.0], true));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn h_dec_round_trip(y in 1e-3_f64..1e3) {
                let x = h_dec_inv(y).unwrap();
                prop_assert!((h_dec(x) - y).abs() <= 1e-10 * y.max(1.0));
            }

            #[test]
            fn h_inc_round_trip(y in 0.5001_f64..1e3) {
                let x = h_inc_inv(y).unwrap();
                prop_assert!((h_inc(x) - y).abs() <= 1e-10 * y.max(1.0));
            }

            #[test]
            fn k11_exceeds_noise_term(f in 0.2_f64..3.0, a in 0.1_f64..5.0, b in 0.2_f64..3.0, s in 0.2_f64..3.0) {
                let t = k11_terms(Coeffs { f, a, b }, s);
                prop_assert_eq!(t[3], 2.0 * s.powi(4));
                prop_assert!(t.iter().sum::<f64>() > 2.0 * s.powi(4));
            }

            #[test]
            fn moments_positive(f in 0.2_f64..3.0, a in 0.01_f64..8.0, b in 0.2_f64..3.0, s in 0.2_f64..3.0) {
                let m = moment_functions_of(Coeffs { f, a, b }, s);
                prop_assert!(m.phi1 - s * s > 0.0);
                prop_assert!(m.phi2 > 0.0);
            }

            #[test]
            fn r_at_least_a(f in 0.2_f64..3.0, a in 0.5_f64..2.0, b in 0.2_f64..3.0, s in 0.2_f64..3.0) {
                let spec = ModelSpec::new(Parametrization::A { f, b }, s, ThetaBox::scalar(0.5, 2.0)).unwrap();
                let dq = derived_quantities(&spec, &[a]).unwrap();
                prop_assert!(dq.r > a);
                prop_assert!((dq.big_gamma - (dq.r - a)).abs() <= 1e-12 * dq.r);
            }
        }
    }
}
