//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Monte Carlo criteria use master seed 0 and the default box `[θ₀/2, 2θ₀]`.

#![allow(clippy::excessive_precision)]

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;

use hidden_ou::adaptive::{adaptive_filter, Variant};
use hidden_ou::harness::{emit_report, run_mc, Experiment, McConfig, McReport, VerdictKind, CURVES_HEADER};
use hidden_ou::kalman::{riccati_closed, stationary_filter_unchecked, stationary_filter_with_derivative};
use hidden_ou::model::{
    derived_quantities, fisher_case_a, fisher_matrix, fisher_matrix_af, fisher_scalar, h_dec, h_dec_inv, h_inc,
    h_inc_inv, invert_2x2, k11_variance, moment_functions_of, Coeffs,
};
use hidden_ou::moments::{mme, mme_limit_variance, MomentStats};
use hidden_ou::onestep::{onestep_process, onestep_recurrent, EstimatorPath, LearningConfig};
use hidden_ou::simulate::{simulate_path, RngStream};
use hidden_ou::{Case, ModelSpec, Parametrization, ThetaBox};

fn line(id: &str, passed: bool, detail: &str) {
    println!("criterion {id}: {} ({detail})", if passed { "PASS" } else { "FAIL" });
}

/// Prints every verdict, then one line for the criterion; returns whether all checks passed.
fn judge(id: &str, report: &McReport) -> bool {
    for v in &report.verdicts {
        let tag = match (v.kind, v.passed) {
            (VerdictKind::Info, _) => "info",
            (_, true) => "pass",
            (_, false) => "fail",
        };
        println!("  [{tag}] {}: observed {:?} target {:?} ({})", v.name, v.observed, v.target, v.rule);
    }
    let passed = report.passed();
    line(id, passed, &format!("{} replications, {} failed", report.per_rep.len(), report.failures));
    passed
}

fn unit_config(experiment: Experiment, case: Case, theta0: Vec<f64>, horizon: f64, reps: usize) -> McConfig {
    let mut cfg = McConfig::new(experiment, case, theta0).with_knowns(1.0, 1.0, 1.0);
    cfg.horizon = horizon;
    cfg.reps = reps;
    cfg
}

fn unit_spec(p: Parametrization) -> ModelSpec {
    ModelSpec::new(p, 1.0, ThetaBox::scalar(0.25, 4.0)).unwrap()
}

fn rk4_riccati(c: Coeffs, sigma: f64, gamma0: f64, t_end: f64, steps: usize) -> Vec<f64> {
    let rhs = |g: f64| -2.0 * c.a * g - (c.f * c.f / (sigma * sigma)) * g * g + c.b * c.b;
    let h = t_end / steps as f64;
    let mut g = gamma0;
    let mut out = vec![g];
    for _ in 0..steps {
        let k1 = rhs(g);
        let k2 = rhs(g + 0.5 * h * k1);
        let k3 = rhs(g + 0.5 * h * k2);
        let k4 = rhs(g + h * k3);
        g += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out.push(g);
    }
    out
}

#[test]
fn criterion_1_riccati_closed_form_matches_rk4() {
    let start = Instant::now();
    let spec = unit_spec(Parametrization::F { a: 1.0, b: 1.0 });
    let dq = derived_quantities(&spec, &[1.0]).unwrap();
    let steps = 10_000;
    let mut worst = 0.0_f64;
    for g0 in [0.0, 1.0, 5.0] {
        let rk = rk4_riccati(dq.coeffs, 1.0, g0, 10.0, steps);
        for (i, g) in rk.iter().enumerate() {
            let t = 10.0 * i as f64 / steps as f64;
            worst = worst.max((riccati_closed(&dq, g0, t).unwrap() - g).abs());
        }
    }
    let elapsed = start.elapsed();
    let passed = worst < 1e-8 && elapsed < Duration::from_secs(1);
    line("1", passed, &format!("max gap {worst:e}, {elapsed:?}"));
    assert!(passed);
}

#[test]
fn criterion_2_filter_attains_riccati_variance() {
    let start = Instant::now();
    let mut cfg = unit_config(Experiment::FilterCheck, Case::F, vec![1.0], 5.0, 2000);
    cfg.dt = 1e-3;
    let report = run_mc(&cfg).unwrap();
    let elapsed = start.elapsed();
    let passed = judge("2", &report) && elapsed < Duration::from_secs(60);
    println!("  runtime {elapsed:?}");
    assert!(passed);
}

#[test]
fn criterion_3_moment_statistic_law() {
    let cfg = unit_config(Experiment::Mme, Case::F, vec![1.0], 1000.0, 500);
    let report = run_mc(&cfg).unwrap();
    // The variance target is the corrected closed form, frozen from an independent evaluation.
    assert!((report.theory["k11"] - 3.9268394416481903).abs() < 1e-12);
    assert!((report.theory["phi1"] - 1.3678794411714423).abs() < 1e-12);
    let checks = ["mean R1", "T Var(R1) vs K11", "KS of scaled R1 error"];
    let passed = judge("3", &report) && checks.iter().all(|c| report.verdict(c).is_some_and(|v| v.passed));
    assert!(passed);
}

#[test]
fn criterion_4_scalar_moment_estimator_variances() {
    let targets = [(Case::A, 17.66229056491393), (Case::F, 7.253909231457997), (Case::B, 7.253909231457997)];
    let mut all = true;
    for (case, target) in targets {
        let cfg = unit_config(Experiment::Mme, case, vec![1.0], 1000.0, 300);
        let report = run_mc(&cfg).unwrap();
        assert!((report.theory["mme_limit_variance"] / target - 1.0).abs() < 1e-12);
        let v = report.verdict("Var(sqrt(T)(theta* - theta0)) vs MME limit").unwrap();
        line(&format!("4 case {case}"), v.passed, &format!("variance {:?} vs {target}", v.observed));
        all &= v.passed;
    }
    line("4", all, "cases A, F, B");
    assert!(all);
}

fn onestep_report(case: Case) -> McReport {
    let cfg = unit_config(Experiment::Onestep, case, vec![1.0], 2000.0, 300);
    assert_eq!(cfg.delta, 0.6);
    run_mc(&cfg).unwrap()
}

#[test]
fn criterion_5_onestep_case_f() {
    let start = Instant::now();
    let report = onestep_report(Case::F);
    assert!((report.theory["inverse_fisher"] - 5.656854249492381).abs() < 1e-9);
    let passed = judge("5 case F", &report) && start.elapsed() < Duration::from_secs(600);
    assert!(passed);
}

#[test]
fn criterion_5_onestep_case_a() {
    let start = Instant::now();
    let report = onestep_report(Case::A);
    assert!((report.theory["inverse_fisher"] - 10.990188).abs() < 1e-5);
    let passed = judge("5 case A", &report) && start.elapsed() < Duration::from_secs(600);
    assert!(passed);
}

#[test]
fn criterion_6_af_pair_covariance() {
    let mut cfg = unit_config(Experiment::Onestep, Case::AF, vec![1.0, 1.0], 2000.0, 300);
    cfg.f = None;
    cfg.a = None;
    let report = run_mc(&cfg).unwrap();
    assert!((report.theory["inverse_fisher_11"] - 67.94112549695428).abs() < 1e-9);
    assert!((report.theory["inverse_fisher_12"] - 44.62741699796952).abs() < 1e-9);
    assert!((report.theory["inverse_fisher_22"] - 34.97056274847714).abs() < 1e-9);
    assert!(judge("6", &report));
}

#[test]
fn criterion_7_grid_mle() {
    let cfg = unit_config(Experiment::MleGrid, Case::F, vec![1.0], 1000.0, 200);
    let report = run_mc(&cfg).unwrap();
    assert!(judge("7", &report));
}

fn adaptive_report(horizon: f64) -> &'static McReport {
    static SHORT: OnceLock<McReport> = OnceLock::new();
    static LONG: OnceLock<McReport> = OnceLock::new();
    let cell = if horizon < 1500.0 { &SHORT } else { &LONG };
    cell.get_or_init(|| {
        let mut cfg = unit_config(Experiment::Adaptive, Case::A, vec![1.0], horizon, 300);
        cfg.v_grid = vec![0.5, 1.0];
        run_mc(&cfg).unwrap()
    })
}

fn tmse(report: &McReport, v: f64) -> f64 {
    report.curves.iter().find(|c| c.v == v).unwrap().empirical_tmse
}

#[test]
fn criterion_8a_adaptive_error_follows_inverse_v() {
    let mut all = true;
    for horizon in [1000.0, 2000.0] {
        let report = adaptive_report(horizon);
        let ratio = tmse(report, 0.5) / tmse(report, 1.0);
        let passed = (ratio / 2.0 - 1.0).abs() <= 0.30;
        line(&format!("8a T={horizon}"), passed, &format!("ratio {ratio:.4} vs 2"));
        all &= passed;
    }
    line("8a", all, "1/v law at both horizons");
    assert!(all);
}

#[test]
fn criterion_8b_adaptive_error_scales_with_horizon() {
    let mut all = true;
    for v in [0.5, 1.0] {
        let ratio = tmse(adaptive_report(2000.0), v) / tmse(adaptive_report(1000.0), v);
        let passed = (ratio - 1.0).abs() <= 0.25;
        line(&format!("8b v={v}"), passed, &format!("T MSE ratio 2000/1000 {ratio:.4} vs 1"));
        all &= passed;
    }
    line("8b", all, "T MSE constant in T");
    assert!(all);
}

#[test]
fn criterion_8c_adaptive_error_reported_against_both_limits() {
    let mut all = true;
    for horizon in [1000.0, 2000.0] {
        let report = adaptive_report(horizon);
        let v = report.verdict("T MSE at v=1 bracket").expect("bracket verdict recorded");
        assert_eq!(v.kind, VerdictKind::Info);
        assert!((report.theory["limit_double_cross"] - 1.0).abs() < 1e-12);
        assert!((report.theory["s_star_sq"] - 4.21895141649746).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        emit_report(report, dir.path()).unwrap();
        let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        let ok = curves.lines().next() == Some(CURVES_HEADER) && curves.lines().count() == 3 && v.observed.is_some();
        println!("  T={horizon}: T MSE(1) = {:?}, {}", v.observed, v.rule);
        all &= ok;
    }
    line("8c", all, "bracketing verdict and curves recorded");
    assert!(all);
}

#[test]
fn criterion_9_determinism_of_report_files() {
    let mut cfg = unit_config(Experiment::Onestep, Case::F, vec![1.0], 200.0, 8);
    cfg.v_grid = vec![0.5, 1.0];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&run_mc(&cfg).unwrap(), a.path()).unwrap();
    cfg.workers = Some(1);
    emit_report(&run_mc(&cfg).unwrap(), b.path()).unwrap();
    let same = ["report.json", "per_rep.csv", "curves.csv"].iter().all(|f| {
        let p = std::fs::read(a.path().join(f)).unwrap();
        let q = std::fs::read(b.path().join(f)).unwrap();
        // Worker count is part of the echoed configuration; compare the rest.
        f == &"report.json" || p == q
    });
    let ja: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("report.json")).unwrap()).unwrap();
    let mut jb: serde_json::Value = serde_json::from_slice(&std::fs::read(b.path().join("report.json")).unwrap()).unwrap();
    jb["config"]["workers"] = serde_json::Value::Null;
    let passed = same && ja == jb;
    line("9 determinism", passed, "serial and parallel reports agree");
    assert!(passed);
}

#[test]
fn criterion_9_recurrent_form_matches_integral_form() {
    let spec = unit_spec(Parametrization::F { a: 1.0, b: 1.0 });
    let traj = simulate_path(&spec, &[1.0], 400.0, 0.01, &RngStream::new(0, 0), false).unwrap();
    let mut cfg = LearningConfig::with_delta(0.6);
    cfg.epsilon_star = 0.0;
    cfg.stride = 1;
    let p = onestep_process(&traj, &spec, &cfg).unwrap();
    let q = onestep_recurrent(&traj, &spec, &cfg).unwrap();
    let gap = p.theta_star[0]
        .iter()
        .zip(&q.theta_star[0])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    line("9 recurrent form", gap < 1e-9, &format!("max gap {gap:e}"));
    assert!(gap < 1e-9);
}

#[test]
fn criterion_9_filter_derivative_matches_finite_difference() {
    let spec = unit_spec(Parametrization::A { f: 1.0, b: 1.0 });
    let traj = simulate_path(&spec, &[1.0], 30.0, 0.01, &RngStream::new(0, 1), false).unwrap();
    let base = stationary_filter_with_derivative(&traj.x, 0.01, &spec, &[1.0], 0.0, &[0.0]).unwrap();
    let h = 1e-4;
    let up = stationary_filter_unchecked(&traj.x, 0.01, &spec, &[1.0 + h], 0.0, &[0.0]).unwrap();
    let dn = stationary_filter_unchecked(&traj.x, 0.01, &spec, &[1.0 - h], 0.0, &[0.0]).unwrap();
    let gap = (0..base.big_m.len())
        .map(|i| ((up.big_m[i] - dn.big_m[i]) / (2.0 * h) - base.big_m_dot[0][i]).abs())
        .fold(0.0, f64::max);
    line("9 filter derivative", gap < 1e-3, &format!("max gap {gap:e}"));
    assert!(gap < 1e-3);
}

#[test]
fn criterion_9_frozen_parameter_adaptive_filter() {
    let spec = unit_spec(Parametrization::A { f: 1.0, b: 1.0 });
    let (dt, horizon, tau) = (0.01, 50.0, 10.0);
    let traj = simulate_path(&spec, &[1.3], horizon, dt, &RngStream::new(0, 2), false).unwrap();
    let n = ((horizon - tau) / dt).round() as usize;
    let prelim = hidden_ou::moments::MmeResult {
        theta_star: vec![1.3],
        clamped: false,
        residual: 0.0,
        diagnostic: None,
    };
    let path = EstimatorPath {
        preliminary: prelim,
        tau,
        dt,
        stride: 1,
        times: (1..=n).map(|k| tau + k as f64 * dt).collect(),
        theta_star: vec![vec![1.3; n]],
        fisher_used: vec![1.0],
        information_average: vec![1.0],
    };
    let ad = adaptive_filter(&traj, &spec, &path, Variant::SteadyState).unwrap();
    let tau_idx = (tau / dt).round() as usize;
    let st = stationary_filter_with_derivative(&traj.x[tau_idx..], dt, &spec, &[1.3], ad.init_value, &[0.0]).unwrap();
    let gap = ad.m_star.iter().zip(&st.big_m).map(|(m, big)| (m - big).abs()).fold(0.0, f64::max);
    line("9 frozen parameter", gap < 1e-12, &format!("max gap {gap:e}"));
    assert!(gap < 1e-12);
}

fn positive() -> impl Strategy<Value = f64> {
    0.2..5.0_f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn criterion_9_derived_identities(f in positive(), a in positive(), b in positive(), sigma in 0.3..3.0_f64) {
        let spec = ModelSpec::new(Parametrization::F { a, b }, sigma, ThetaBox::scalar(0.1, 6.0)).unwrap();
        let dq = derived_quantities(&spec, &[f]).unwrap();
        let q = f * f * b * b / (sigma * sigma);
        prop_assert!((dq.r * dq.r - (a * a + q)).abs() < 1e-10 * (1.0 + q + a * a));
        prop_assert!((dq.big_gamma * (dq.r + a) - q).abs() < 1e-10 * (1.0 + q));
        prop_assert!((dq.gamma_star - sigma * sigma * dq.big_gamma / (f * f)).abs() < 1e-10 * (1.0 + dq.gamma_star));
        // γ* solves the stationary Riccati equation.
        let res = -2.0 * a * dq.gamma_star - f * f / (sigma * sigma) * dq.gamma_star.powi(2) + b * b;
        prop_assert!(res.abs() < 1e-9 * (1.0 + b * b));
    }

    #[test]
    fn criterion_9_fisher_forms_agree(f in positive(), a in positive(), b in positive()) {
        let (direct, closed) = fisher_case_a(f, a, b, 1.0);
        prop_assert!((direct - closed).abs() < 1e-10 * direct.abs().max(1e-12));
        let spec = ModelSpec::new(Parametrization::AF { b }, 1.0, ThetaBox::pair((0.1, 6.0), (0.1, 6.0))).unwrap();
        let general = fisher_matrix(&spec, &[a, f]).unwrap();
        let closed = fisher_matrix_af(&spec, &[a, f]).unwrap();
        // The polarised sum cancels terms of size 1/a and (f b²)²/r down to O(q²),
        // so its rounding error is bounded by that scale, not by the entry.
        let r = (a * a + f * f * b * b).sqrt();
        let scale = 1.0 / a + (1.0 + f * b * b).powi(2) / r;
        for i in 0..2 {
            for j in 0..2 {
                let tol = 1e-9 * closed[i][i].abs().max(closed[j][j].abs()) + 1e-13 * scale;
                prop_assert!((general[i][j] - closed[i][j]).abs() < tol, "{i}{j}: {} vs {}", general[i][j], closed[i][j]);
            }
        }
        let sa = ModelSpec::new(Parametrization::A { f, b }, 1.0, ThetaBox::scalar(0.1, 6.0)).unwrap();
        prop_assert!((fisher_scalar(&sa, &[a]).unwrap() - direct).abs() < 1e-10 * direct);
        prop_assert!(invert_2x2(&closed).is_some());
    }

    #[test]
    fn criterion_9_h_inversion_round_trips(x in 0.01..30.0_f64) {
        let back = h_dec_inv(h_dec(x)).unwrap();
        prop_assert!((back - x).abs() < 1e-10 * x.max(1.0));
        let back = h_inc_inv(h_inc(x)).unwrap();
        prop_assert!((back - x).abs() < 1e-10 * x.max(1.0));
    }

    #[test]
    fn criterion_9_noiseless_moment_round_trips(t in 0.3..3.5_f64, case_ix in 0usize..3) {
        let (p, c) = match case_ix {
            0 => (Parametrization::F { a: 1.2, b: 0.8 }, Coeffs { f: t, a: 1.2, b: 0.8 }),
            1 => (Parametrization::A { f: 0.9, b: 1.1 }, Coeffs { f: 0.9, a: t, b: 1.1 }),
            _ => (Parametrization::B { f: 0.7, a: 0.6 }, Coeffs { f: 0.7, a: 0.6, b: t }),
        };
        let spec = ModelSpec::new(p, 1.0, ThetaBox::scalar(0.1, 6.0)).unwrap();
        let m = moment_functions_of(c, 1.0);
        let est = mme(&spec, &MomentStats { r1: m.phi1, r2: m.phi2, t_count: 1000 }).unwrap();
        prop_assert!((est.theta_star[0] - t).abs() < 1e-8);
        prop_assert!(k11_variance(&spec, &[t]).unwrap() > 2.0);
        prop_assert!(mme_limit_variance(&spec, &[t]).unwrap() > 0.0);
    }
}
