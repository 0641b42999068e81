//! Monte Carlo orchestration: replications, summaries, verdicts and reports.
//!
//! Replication `i` draws from `RngStream(seed, i)` and owns its trajectory.
//! Replications run in parallel but are reduced in index order, so reports
//! are identical for any worker count.

mod config;
mod report;
mod stats;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Experiment, McConfig, Tolerances};
pub use report::{emit_report, load_report, CURVES_HEADER};
pub use stats::{correlation, covariance, normality_check, summarize, Normality, Summary};

use crate::adaptive::{adaptive_filter, error_constants};
use crate::error::{Error, Result};
use crate::kalman::{kb_filter, riccati_closed, StationaryRecursion, StationaryState};
use crate::model::{derived_quantities, fisher_matrix_af, invert_2x2, k11_variance, moment_functions, Case, ModelSpec};
use crate::moments::{mme, mme_limit_variance, r_statistics};
use crate::onestep::{eta_process, grid_mle_and_bayes, log_likelihood, onestep_process, uniform_grid, inverse_fisher};
use crate::simulate::{simulate_path, unit_increments, RngStream};

/// Named scalar outputs of one replication, or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub index: usize,
    pub values: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    /// Counts towards the pass/fail outcome.
    Check,
    /// Reported only.
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub kind: VerdictKind,
    pub passed: bool,
    pub observed: Option<f64>,
    pub target: Option<f64>,
    pub rule: String,
}

/// One row of `curves.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub v: f64,
    pub empirical_tmse: f64,
    /// `(K₁² + K₂² + 2R₁₂)/v`.
    pub limit_double_cross: f64,
    /// `S⋆²/v`.
    pub limit_sstar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    pub per_rep: Vec<RepRecord>,
    pub failures: usize,
    pub summary: BTreeMap<String, Summary>,
    /// Pairwise sample covariances, keyed `a|b`.
    pub covariances: BTreeMap<String, f64>,
    pub normality: Option<Normality>,
    pub theory: BTreeMap<String, f64>,
    pub verdicts: Vec<Verdict>,
    pub curves: Vec<CurvePoint>,
}

impl McReport {
    /// True when every check verdict passed.
    pub fn passed(&self) -> bool {
        self.verdicts
            .iter()
            .filter(|v| v.kind == VerdictKind::Check)
            .all(|v| v.passed)
    }

    pub fn column(&self, key: &str) -> Vec<f64> {
        column(&self.per_rep, key)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

fn column(records: &[RepRecord], key: &str) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.error.is_none())
        .filter_map(|r| r.values.get(key).copied())
        .collect()
}

/// Key of a value indexed by a point of the `v` grid.
pub fn at_v(name: &str, v: f64) -> String {
    format!("{name}@{v}")
}

fn coordinate_key(name: &str, k: usize) -> String {
    if k == 0 {
        name.to_string()
    } else {
        format!("{name}_{}", k + 1)
    }
}

pub fn run_mc(cfg: &McConfig) -> Result<McReport> {
    let spec = cfg.validate()?;
    let theory = theory(cfg, &spec)?;
    let run = || -> Vec<RepRecord> {
        (0..cfg.reps)
            .into_par_iter()
            .map(|i| match replicate(cfg, &spec, i) {
                Ok(values) => RepRecord {
                    index: i,
                    values,
                    error: None,
                },
                Err(e) => RepRecord {
                    index: i,
                    values: BTreeMap::new(),
                    error: Some(e.to_string()),
                },
            })
            .collect()
    };
    let per_rep = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    Ok(aggregate(cfg.clone(), per_rep, theory))
}

/// Reduces replication records into a report, in index order.
pub fn aggregate(cfg: McConfig, per_rep: Vec<RepRecord>, theory: BTreeMap<String, f64>) -> McReport {
    let failures = per_rep.iter().filter(|r| r.error.is_some()).count();
    let mut keys: Vec<String> = per_rep.iter().flat_map(|r| r.values.keys().cloned()).collect();
    keys.sort();
    keys.dedup();
    let summary = keys
        .iter()
        .filter_map(|k| summarize(&column(&per_rep, k)).map(|s| (k.clone(), s)))
        .collect();
    let mut report = McReport {
        config: cfg,
        per_rep,
        failures,
        summary,
        covariances: BTreeMap::new(),
        normality: None,
        theory,
        verdicts: Vec::new(),
        curves: Vec::new(),
    };
    judge(&mut report);
    report
}

fn theory(cfg: &McConfig, spec: &ModelSpec) -> Result<BTreeMap<String, f64>> {
    let th = &cfg.theta0;
    let mut t = BTreeMap::new();
    let mf = moment_functions(spec, th)?;
    t.insert("phi1".into(), mf.phi1);
    t.insert("phi2".into(), mf.phi2);
    t.insert("k11".into(), k11_variance(spec, th)?);
    let scalar = spec.dim() == 1;
    if scalar {
        t.insert("mme_limit_variance".into(), mme_limit_variance(spec, th)?);
    }
    if spec.case() != Case::AB {
        let (info, inv) = inverse_fisher(spec, th)?;
        if scalar {
            t.insert("fisher".into(), info[0]);
            t.insert("inverse_fisher".into(), inv[0]);
        } else {
            let m = fisher_matrix_af(spec, th)?;
            let inv = invert_2x2(&m).expect("positive definite");
            t.insert("fisher_11".into(), m[0][0]);
            t.insert("fisher_12".into(), m[0][1]);
            t.insert("fisher_22".into(), m[1][1]);
            t.insert("inverse_fisher_11".into(), inv[0][0]);
            t.insert("inverse_fisher_12".into(), inv[0][1]);
            t.insert("inverse_fisher_22".into(), inv[1][1]);
        }
    }
    if scalar && cfg.experiment == Experiment::Adaptive {
        let ec = error_constants(spec, th)?;
        t.insert("k1".into(), ec.k1);
        t.insert("k2".into(), ec.k2);
        t.insert("r12".into(), ec.r12);
        t.insert("s_star_sq".into(), ec.s_star_sq);
        t.insert("limit_double_cross".into(), ec.limit_at_one);
        for &v in &cfg.v_grid {
            t.insert(at_v("limit_double_cross", v), ec.limit(v));
            t.insert(at_v("limit_sstar", v), ec.limit_sstar(v));
        }
    }
    if cfg.experiment == Experiment::FilterCheck {
        let dq = derived_quantities(spec, th)?;
        let prior = dq.coeffs.b * dq.coeffs.b / (2.0 * dq.coeffs.a);
        t.insert("gamma_T".into(), riccati_closed(&dq, prior, cfg.horizon)?);
    }
    Ok(t)
}

/// The single-trajectory pipeline of the configured experiment.
pub fn replicate(cfg: &McConfig, spec: &ModelSpec, index: usize) -> Result<BTreeMap<String, f64>> {
    let stream = RngStream::new(cfg.seed, index as u64);
    let th = &cfg.theta0;
    let big_t = cfg.horizon;
    let root_t = big_t.sqrt();
    let retain = cfg.experiment == Experiment::FilterCheck;
    let traj = simulate_path(spec, th, big_t, cfg.dt, &stream, retain)?;
    let mut out = BTreeMap::new();
    let mut put = |k: String, v: f64| -> Result<()> {
        if v.is_finite() {
            out.insert(k, v);
            Ok(())
        } else {
            Err(Error::Numerical(format!("{k} is not finite")))
        }
    };
    match cfg.experiment {
        Experiment::Mme => {
            let stats = r_statistics(&unit_increments(&traj, big_t)?)?;
            let phi1 = moment_functions(spec, th)?.phi1;
            put("r1".into(), stats.r1)?;
            put("r2".into(), stats.r2)?;
            put("sqrtT_r1_err".into(), (stats.t_count as f64).sqrt() * (stats.r1 - phi1))?;
            let est = mme(spec, &stats)?;
            put("clamped".into(), est.clamped as u8 as f64)?;
            for (k, v) in est.theta_star.iter().enumerate() {
                put(coordinate_key("theta_star", k), *v)?;
                put(coordinate_key("sqrtT_err", k), root_t * (v - th[k]))?;
            }
        }
        Experiment::Onestep => {
            let path = onestep_process(&traj, spec, &cfg.learning())?;
            let fin = path.final_value();
            for k in 0..fin.len() {
                put(coordinate_key("preliminary", k), path.preliminary.theta_star[k])?;
                put(coordinate_key("theta_star", k), fin[k])?;
                put(coordinate_key("sqrtT_err", k), root_t * (fin[k] - th[k]))?;
                put(coordinate_key("info_avg", k), path.information_average[k * fin.len() + k])?;
            }
            if spec.dim() == 1 {
                let eta = eta_process(&path, th[0], spec, big_t, &cfg.v_grid)?;
                for (v, e) in cfg.v_grid.iter().zip(eta) {
                    put(at_v("eta", *v), e)?;
                }
            }
        }
        Experiment::MleGrid => {
            let iv = spec.theta_box().0[0];
            let grid = uniform_grid(iv.lo, iv.hi, cfg.grid_points);
            let res = grid_mle_and_bayes(&traj, spec, &grid, None)?;
            put("mle".into(), res.mle)?;
            put("bayes".into(), res.bayes)?;
            put("sqrtT_mle_err".into(), root_t * (res.mle - th[0]))?;
            put("sqrtT_bayes_err".into(), root_t * (res.bayes - th[0]))?;
            let far = if th[0] - iv.lo > iv.hi - th[0] { iv.lo } else { iv.hi };
            let beats = log_likelihood(&traj.x, cfg.dt, spec, th)? > log_likelihood(&traj.x, cfg.dt, spec, &[far])?;
            put("truth_beats_far".into(), beats as u8 as f64)?;
            let path = onestep_process(&traj, spec, &cfg.learning())?;
            let fin = path.final_value()[0];
            put("onestep".into(), fin)?;
            put("sqrtT_onestep_err".into(), root_t * (fin - th[0]))?;
        }
        Experiment::Adaptive => {
            let mut learning = cfg.learning();
            learning.stride = 1;
            let path = onestep_process(&traj, spec, &learning)?;
            let filt = adaptive_filter(&traj, spec, &path, cfg.variant)?;
            // Filter at the true parameter, started from 0.
            let dq = derived_quantities(spec, th)?;
            let rec = StationaryRecursion::new(&dq);
            let mut state = StationaryState { m: 0.0, m_dot: [0.0; 2] };
            let mut truth = vec![0.0; traj.n_steps + 1];
            for i in 0..traj.n_steps {
                state = rec.step(&state, traj.x[i + 1] - traj.x[i], cfg.dt);
                truth[i + 1] = state.m / dq.coeffs.f;
            }
            for &v in &cfg.v_grid {
                let t = v * big_t;
                let i = traj.index_of(t)?;
                put(at_v("sq_err", v), (filt.value_at(t)? - truth[i]).powi(2))?;
            }
            for (k, v) in path.final_value().iter().enumerate() {
                put(coordinate_key("theta_star", k), *v)?;
            }
        }
        Experiment::FilterCheck => {
            let dq = derived_quantities(spec, th)?;
            let c = dq.coeffs;
            let prior = c.b * c.b / (2.0 * c.a);
            let filt = kb_filter(&traj.x, cfg.dt, spec, th, 0.0, prior)?;
            let y = traj.y.as_ref().expect("hidden path retained");
            let n = traj.n_steps;
            put("sq_err".into(), (y[n] - filt.m[n]).powi(2))?;
            let s = spec.sigma();
            let innov: Vec<f64> = (0..n)
                .map(|i| (traj.x[i + 1] - traj.x[i] - c.f * filt.m[i] * cfg.dt) / s)
                .collect();
            let ms = innov.iter().map(|v| v * v).sum::<f64>() / n as f64;
            put("innovation_var_per_dt".into(), ms / cfg.dt)?;
        }
    }
    Ok(out)
}

fn rel_gap(observed: f64, target: f64) -> f64 {
    (observed / target - 1.0).abs()
}

fn variance_verdict(name: &str, s: Option<&Summary>, target: f64, tol: f64) -> Verdict {
    let observed = s.and_then(|s| s.variance);
    Verdict {
        name: name.into(),
        kind: VerdictKind::Check,
        passed: observed.is_some_and(|o| rel_gap(o, target) <= tol),
        observed,
        target: Some(target),
        rule: format!("within {:.0}% relative", tol * 100.0),
    }
}

fn mean_verdict(name: &str, s: Option<&Summary>, target: f64, band: f64) -> Verdict {
    let observed = s.map(|s| s.mean);
    let passed = s.is_some_and(|s| s.se_mean.is_some_and(|se| (s.mean - target).abs() <= band * se));
    Verdict {
        name: name.into(),
        kind: VerdictKind::Check,
        passed,
        observed,
        target: Some(target),
        rule: format!("within {band} standard errors"),
    }
}

fn ratio_verdict(name: &str, observed: Option<f64>, target: f64, tol: f64) -> Verdict {
    Verdict {
        name: name.into(),
        kind: VerdictKind::Check,
        passed: observed.is_some_and(|o| rel_gap(o, target) <= tol),
        observed,
        target: Some(target),
        rule: format!("within {:.0}% relative", tol * 100.0),
    }
}

fn judge(report: &mut McReport) {
    let cfg = report.config.clone();
    let tol = cfg.tolerances;
    let theory = report.theory.clone();
    let summary = report.summary.clone();
    let get = |k: &str| summary.get(k);
    let mut verdicts = Vec::new();
    let reps = report.per_rep.len().max(1);
    let share = report.failures as f64 / reps as f64;
    verdicts.push(Verdict {
        name: "failure share".into(),
        kind: VerdictKind::Check,
        passed: share <= tol.max_failure_share,
        observed: Some(share),
        target: Some(tol.max_failure_share),
        rule: "at most".into(),
    });
    let dim = cfg.theta0.len();
    let big_t = cfg.horizon;
    match cfg.experiment {
        Experiment::Mme => {
            verdicts.push(mean_verdict("mean R1", get("r1"), theory["phi1"], tol.mean_se_band));
            verdicts.push(ratio_verdict(
                "T Var(R1) vs K11",
                get("sqrtT_r1_err").and_then(|s| s.variance),
                theory["k11"],
                tol.moment_variance,
            ));
            let scaled = report.column("sqrtT_r1_err");
            match normality_check(&scaled, theory["k11"]) {
                Ok(n) => {
                    verdicts.push(Verdict {
                        name: "KS of scaled R1 error".into(),
                        kind: VerdictKind::Check,
                        passed: n.ks_statistic < n.ks_critical_01,
                        observed: Some(n.ks_statistic),
                        target: Some(n.ks_critical_01),
                        rule: "below the 1% critical value".into(),
                    });
                    report.normality = Some(n);
                }
                Err(e) => verdicts.push(Verdict {
                    name: "KS of scaled R1 error".into(),
                    kind: VerdictKind::Check,
                    passed: false,
                    observed: None,
                    target: None,
                    rule: e.to_string(),
                }),
            }
            if dim == 1 {
                verdicts.push(variance_verdict(
                    "Var(sqrt(T)(theta* - theta0)) vs MME limit",
                    get("sqrtT_err"),
                    theory["mme_limit_variance"],
                    tol.variance,
                ));
            } else {
                for k in 0..dim {
                    let key = coordinate_key("theta_star", k);
                    verdicts.push(mean_verdict(&format!("mean {key}"), get(&key), cfg.theta0[k], tol.mean_se_band));
                }
                pair_covariances(report, "sqrtT_err");
            }
        }
        Experiment::Onestep => {
            if dim == 1 {
                verdicts.push(variance_verdict(
                    "Var(sqrt(T)(theta_star(1) - theta0)) vs 1/I",
                    get("sqrtT_err"),
                    theory["inverse_fisher"],
                    tol.variance,
                ));
                for &v in &cfg.v_grid {
                    let key = at_v("eta", v);
                    verdicts.push(variance_verdict(&format!("Var {key}"), get(&key), v, tol.variance));
                    verdicts.push(mean_verdict(&format!("mean {key}"), get(&key), 0.0, tol.mean_se_band));
                }
                for (i, &v1) in cfg.v_grid.iter().enumerate() {
                    for &v2 in &cfg.v_grid[i + 1..] {
                        let (k1, k2) = (at_v("eta", v1), at_v("eta", v2));
                        let c = covariance(&report.column(&k1), &report.column(&k2));
                        if let Some(c) = c {
                            report.covariances.insert(format!("{k1}|{k2}"), c);
                        }
                        verdicts.push(ratio_verdict(&format!("Cov {k1} {k2}"), c, v1.min(v2), tol.variance));
                    }
                }
                let scaled = report.column("sqrtT_err");
                if let Ok(n) = normality_check(&scaled, theory["inverse_fisher"]) {
                    verdicts.push(Verdict {
                        name: "KS of scaled one-step error".into(),
                        kind: VerdictKind::Info,
                        passed: n.ks_statistic < n.ks_critical_01,
                        observed: Some(n.ks_statistic),
                        target: Some(n.ks_critical_01),
                        rule: "below the 1% critical value".into(),
                    });
                    report.normality = Some(n);
                }
            } else {
                let cov = pair_covariances(report, "sqrtT_err");
                for (name, key) in [("11", 0), ("12", 1), ("22", 2)] {
                    verdicts.push(ratio_verdict(
                        &format!("Cov entry {name} vs inverse Fisher matrix"),
                        cov.map(|c| c[key]),
                        theory[&format!("inverse_fisher_{name}")],
                        tol.wide_variance,
                    ));
                }
            }
        }
        Experiment::MleGrid => {
            verdicts.push(variance_verdict(
                "Var(sqrt(T)(MLE - theta0)) vs 1/I",
                get("sqrtT_mle_err"),
                theory["inverse_fisher"],
                tol.wide_variance,
            ));
            let corr = correlation(&report.column("onestep"), &report.column("mle"));
            verdicts.push(Verdict {
                name: "corr(one-step, MLE)".into(),
                kind: VerdictKind::Check,
                passed: corr.is_some_and(|c| c > tol.min_correlation),
                observed: corr,
                target: Some(tol.min_correlation),
                rule: "greater than".into(),
            });
            let beats = get("truth_beats_far").map(|s| s.mean);
            verdicts.push(Verdict {
                name: "share with loglik(theta0) > loglik(far)".into(),
                kind: VerdictKind::Check,
                passed: beats.is_some_and(|b| b >= tol.min_consistency_share),
                observed: beats,
                target: Some(tol.min_consistency_share),
                rule: "at least".into(),
            });
        }
        Experiment::Adaptive => {
            let tmse = |v: f64| get(&at_v("sq_err", v)).map(|s| big_t * s.mean);
            if dim == 1 {
                for &v in &cfg.v_grid {
                    if let Some(e) = tmse(v) {
                        report.curves.push(CurvePoint {
                            v,
                            empirical_tmse: e,
                            limit_double_cross: theory[&at_v("limit_double_cross", v)],
                            limit_sstar: theory[&at_v("limit_sstar", v)],
                        });
                    }
                }
                let lo = cfg.v_grid.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = cfg.v_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    let ratio = tmse(lo).zip(tmse(hi)).map(|(a, b)| a / b);
                    verdicts.push(ratio_verdict(
                        &format!("T MSE ratio v={lo} over v={hi}"),
                        ratio,
                        hi / lo,
                        tol.filter_limit,
                    ));
                }
                let emp = tmse(hi);
                let a = theory[&at_v("limit_double_cross", hi)];
                let b = theory[&at_v("limit_sstar", hi)];
                let (p, q) = (a.min(b), a.max(b));
                let place = match emp {
                    Some(e) if e < p => "below both limits",
                    Some(e) if e > q => "above both limits",
                    Some(_) => "between the two limits",
                    None => "unavailable",
                };
                let nearer = emp.map(|e| if (e - a).abs() <= (e - b).abs() { "K1^2+K2^2+2R12" } else { "S*^2" });
                verdicts.push(Verdict {
                    name: format!("T MSE at v={hi} bracket"),
                    kind: VerdictKind::Info,
                    passed: emp.is_some_and(|e| e >= p && e <= q),
                    observed: emp,
                    target: Some(a),
                    rule: format!("{place}; nearer {}", nearer.unwrap_or("neither")),
                });
            } else {
                for &v in &cfg.v_grid {
                    verdicts.push(Verdict {
                        name: format!("T MSE at v={v} finite"),
                        kind: VerdictKind::Check,
                        passed: tmse(v).is_some_and(f64::is_finite),
                        observed: tmse(v),
                        target: None,
                        rule: "finite".into(),
                    });
                }
            }
        }
        Experiment::FilterCheck => {
            verdicts.push(mean_verdict("E(Y_T - m_T)^2 vs gamma(T)", get("sq_err"), theory["gamma_T"], tol.mean_se_band));
            let iv = get("innovation_var_per_dt");
            verdicts.push(Verdict {
                name: "innovation variance per unit time".into(),
                kind: VerdictKind::Info,
                passed: iv.is_some_and(|s| (s.mean - 1.0).abs() < 0.01),
                observed: iv.map(|s| s.mean),
                target: Some(1.0),
                rule: "within 1%".into(),
            });
        }
    }
    report.verdicts = verdicts;
}

/// Records and returns the covariance entries (11, 12, 22) of a pair of columns.
fn pair_covariances(report: &mut McReport, base: &str) -> Option<[f64; 3]> {
    let x = report.column(&coordinate_key(base, 0));
    let y = report.column(&coordinate_key(base, 1));
    let c = [covariance(&x, &x)?, covariance(&x, &y)?, covariance(&y, &y)?];
    for (name, v) in ["11", "12", "22"].iter().zip(c) {
        report.covariances.insert(format!("{base}|{name}"), v);
    }
    Some(c)
}
