//! Command-line front end: single-trajectory pipelines and Monte Carlo runs.
//!
//! Exit codes: 0 success or all checks passed, 2 a check failed, 1 an error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hidden_ou::adaptive::{adaptive_filter, Variant};
use hidden_ou::harness::{emit_report, run_mc, Experiment, McConfig, VerdictKind};
use hidden_ou::kalman::{kb_filter, stationary_filter_with_derivative};
use hidden_ou::model::derived_quantities;
use hidden_ou::moments::{mme, r_statistics};
use hidden_ou::onestep::{grid_mle_and_bayes, onestep_process, uniform_grid};
use hidden_ou::simulate::{simulate_path, unit_increments, RngStream};
use hidden_ou::{Case, Error, Result};

#[derive(Parser)]
#[command(name = "hidden-ou", version, about = "Estimation and adaptive filtering for a partially observed OU system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory and write `trajectory.csv`.
    Simulate(Common),
    /// Run the Kalman-Bucy and stationary filters at theta0; writes `filter.csv` and `stationary_filter.csv`.
    Filter(Common),
    /// Method-of-moments estimate on one trajectory.
    Mme(Common),
    /// One-step estimator process on one trajectory; writes `onestep.csv`.
    Onestep(Common),
    /// Grid likelihood, MLE and Bayes estimate on one trajectory; writes `loglik.csv`.
    MleGrid(Common),
    /// Adaptive filter on one trajectory; writes `adaptive.csv`.
    Adaptive(Common),
    /// Monte Carlo experiment; writes `report.json`, `per_rep.csv` and `curves.csv`.
    Mc(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value file mirroring the Monte Carlo configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment run by `mc`: mme, onestep, mle_grid, adaptive or filter_check.
    #[arg(long)]
    experiment: Option<Experiment>,
    #[arg(long)]
    case: Option<Case>,
    /// True parameter, comma separated for two coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta0: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true)]
    f: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Observation horizon.
    #[arg(long = "T")]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    v_grid: Option<Vec<f64>>,
    /// Adaptive filter variant: steady_state, closed_form_gamma or full_riccati.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    workers: Option<usize>,
    /// Replication index of a single-trajectory run.
    #[arg(long, default_value_t = 0)]
    rep: u64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, default_experiment: Experiment) -> Result<McConfig> {
        let mut cfg = match &self.config {
            Some(path) => McConfig::from_file(path)?,
            None => {
                let case = self.case.ok_or_else(|| Error::Config("--case is required without --config".into()))?;
                let theta0 = self
                    .theta0
                    .clone()
                    .ok_or_else(|| Error::Config("--theta0 is required without --config".into()))?;
                McConfig::new(default_experiment, case, theta0)
            }
        };
        if let Some(e) = self.experiment {
            cfg.experiment = e;
        }
        if let Some(c) = self.case {
            cfg.case = c;
        }
        if let Some(t) = &self.theta0 {
            cfg.theta0 = t.clone();
        }
        cfg.f = self.f.or(cfg.f);
        cfg.a = self.a.or(cfg.a);
        cfg.b = self.b.or(cfg.b);
        cfg.sigma = self.sigma.unwrap_or(cfg.sigma);
        cfg.horizon = self.horizon.unwrap_or(cfg.horizon);
        cfg.dt = self.dt.unwrap_or(cfg.dt);
        cfg.delta = self.delta.unwrap_or(cfg.delta);
        cfg.reps = self.reps.unwrap_or(cfg.reps);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        if let Some(v) = &self.v_grid {
            cfg.v_grid = v.clone();
        }
        cfg.variant = self.variant.unwrap_or(cfg.variant);
        cfg.workers = self.workers.or(cfg.workers);
        if let Some(o) = &self.out {
            cfg.outputs = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &McConfig) -> Result<PathBuf> {
    let dir = cfg.outputs.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json values serialise"));
}

fn single(cfg: &McConfig, rep: u64, retain_hidden: bool) -> Result<(hidden_ou::ModelSpec, hidden_ou::simulate::Trajectory, PathBuf)> {
    let spec = cfg.spec()?;
    let traj = simulate_path(&spec, &cfg.theta0, cfg.horizon, cfg.dt, &RngStream::new(cfg.seed, rep), retain_hidden)?;
    Ok((spec, traj, out_dir(cfg)?))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.resolve(Experiment::FilterCheck)?;
            let (_, traj, dir) = single(&cfg, c.rep, true)?;
            let file = dir.join("trajectory.csv");
            traj.write_csv(&file)?;
            print(json!({ "steps": traj.n_steps, "x_T": traj.x[traj.n_steps], "file": path_str(&file) }));
        }
        Command::Filter(c) => {
            let cfg = c.resolve(Experiment::FilterCheck)?;
            let (spec, traj, dir) = single(&cfg, c.rep, true)?;
            let dq = derived_quantities(&spec, &cfg.theta0)?;
            let prior = dq.coeffs.b * dq.coeffs.b / (2.0 * dq.coeffs.a);
            let kb = kb_filter(&traj.x, cfg.dt, &spec, &cfg.theta0, 0.0, prior)?;
            let st = stationary_filter_with_derivative(&traj.x, cfg.dt, &spec, &cfg.theta0, 0.0, &vec![0.0; spec.dim()])?;
            let (f1, f2) = (dir.join("filter.csv"), dir.join("stationary_filter.csv"));
            kb.write_csv(&f1)?;
            st.write_csv(&f2)?;
            let n = traj.n_steps;
            let y_t = traj.y.as_ref().map(|y| y[n]);
            print(json!({ "m_T": kb.m[n], "gamma_T": kb.gamma[n], "y_T": y_t, "files": [path_str(&f1), path_str(&f2)] }));
        }
        Command::Mme(c) => {
            let cfg = c.resolve(Experiment::Mme)?;
            let (spec, traj, _) = single(&cfg, c.rep, false)?;
            let stats = r_statistics(&unit_increments(&traj, cfg.horizon)?)?;
            let est = mme(&spec, &stats)?;
            print(json!({ "stats": stats, "estimate": est }));
        }
        Command::Onestep(c) => {
            let cfg = c.resolve(Experiment::Onestep)?;
            let (spec, traj, dir) = single(&cfg, c.rep, false)?;
            let path = onestep_process(&traj, &spec, &cfg.learning())?;
            let file = dir.join("onestep.csv");
            path.write_csv(&file)?;
            print(json!({
                "preliminary": path.preliminary,
                "tau": path.tau,
                "theta_star_T": path.final_value(),
                "file": path_str(&file),
            }));
        }
        Command::MleGrid(c) => {
            let cfg = c.resolve(Experiment::MleGrid)?;
            let (spec, traj, dir) = single(&cfg, c.rep, false)?;
            let iv = spec.theta_box().0[0];
            let res = grid_mle_and_bayes(&traj, &spec, &uniform_grid(iv.lo, iv.hi, cfg.grid_points), None)?;
            let file = dir.join("loglik.csv");
            res.write_csv(&file)?;
            print(json!({ "mle": res.mle, "bayes": res.bayes, "file": path_str(&file) }));
        }
        Command::Adaptive(c) => {
            let cfg = c.resolve(Experiment::Adaptive)?;
            let (spec, traj, dir) = single(&cfg, c.rep, true)?;
            let mut learning = cfg.learning();
            learning.stride = 1;
            let path = onestep_process(&traj, &spec, &learning)?;
            let filt = adaptive_filter(&traj, &spec, &path, cfg.variant)?;
            let dq = derived_quantities(&spec, &cfg.theta0)?;
            let truth = stationary_filter_with_derivative(&traj.x, cfg.dt, &spec, &cfg.theta0, 0.0, &vec![0.0; spec.dim()])?;
            let start = traj.index_of(path.tau)?;
            let m_true: Vec<f64> = truth.big_m[start..].iter().map(|m| m / dq.coeffs.f).collect();
            let y = traj.y.as_ref().map(|y| &y[start..]);
            let file = dir.join("adaptive.csv");
            filt.write_csv(&file, Some(&m_true), y)?;
            print(json!({ "variant": cfg.variant, "tau": path.tau, "m_star_T": filt.m_star.last(), "file": path_str(&file) }));
        }
        Command::Mc(c) => {
            let cfg = c.resolve(Experiment::Mme)?;
            let report = run_mc(&cfg)?;
            let dir = out_dir(&cfg)?;
            emit_report(&report, &dir)?;
            for v in &report.verdicts {
                let tag = match (v.kind, v.passed) {
                    (VerdictKind::Info, _) => "INFO",
                    (VerdictKind::Check, true) => "PASS",
                    (VerdictKind::Check, false) => "FAIL",
                };
                let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |x| format!("{x:.6}"));
                println!("{tag} {}: observed {} target {} ({})", v.name, fmt(v.observed), fmt(v.target), v.rule);
            }
            println!("failures: {} of {}; report in {}", report.failures, cfg.reps, dir.display());
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
