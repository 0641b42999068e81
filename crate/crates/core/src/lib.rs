//! Estimation and adaptive filtering for a hidden Ornstein–Uhlenbeck process
//! observed through additive white noise.
//!
//! The pipeline runs bottom-up: [`simulate`] draws exact sample paths,
//! [`moments`] builds method-of-moments estimators on a short learning
//! interval, [`onestep`] turns them into an efficient estimator process,
//! [`adaptive`] plugs that process into the Kalman–Bucy filter, and
//! [`harness`] verifies the asymptotic claims by Monte Carlo.

// Negated comparisons reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Oracle constants are quoted with every printed digit.
#![cfg_attr(test, allow(clippy::excessive_precision))]

pub mod adaptive;
pub mod error;
pub mod harness;
pub mod kalman;
pub mod model;
pub mod moments;
pub mod onestep;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{Case, Coeffs, ModelSpec, Parametrization, ThetaBox};
