//! Experiment configuration, readable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::adaptive::Variant;
use crate::error::{Error, Result};
use crate::model::{Case, Interval, Knowns, ModelSpec, ThetaBox};
use crate::onestep::LearningConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Mme,
    Onestep,
    MleGrid,
    Adaptive,
    FilterCheck,
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "mme" => Ok(Experiment::Mme),
            "onestep" => Ok(Experiment::Onestep),
            "mle_grid" => Ok(Experiment::MleGrid),
            "adaptive" => Ok(Experiment::Adaptive),
            "filter_check" => Ok(Experiment::FilterCheck),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    }
}

/// Relative and absolute tolerances behind every verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Relative, on replication variances against theory.
    pub variance: f64,
    /// Relative, on the moment-statistic variance.
    pub moment_variance: f64,
    /// Relative, on the grid-MLE variance and on matrix entries.
    pub wide_variance: f64,
    /// Relative, on filter-error ratios.
    pub filter_limit: f64,
    /// Half-width of mean bands in standard errors.
    pub mean_se_band: f64,
    /// Lower bound on the one-step/MLE correlation.
    pub min_correlation: f64,
    /// Minimal share of replications where the truth beats a far parameter.
    pub min_consistency_share: f64,
    /// Maximal share of failed replications.
    pub max_failure_share: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            variance: 0.20,
            moment_variance: 0.15,
            wide_variance: 0.25,
            filter_limit: 0.30,
            mean_se_band: 3.0,
            min_correlation: 0.9,
            min_consistency_share: 0.95,
            max_failure_share: 0.05,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub experiment: Experiment,
    pub case: Case,
    #[serde(deserialize_with = "one_or_many")]
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub f: Option<f64>,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default = "defaults::sigma")]
    pub sigma: f64,
    /// Parameter box, one `[lo, hi]` per coordinate; defaults to `[θ₀/2, 2θ₀]`.
    #[serde(default)]
    pub theta_box: Option<Vec<[f64; 2]>>,
    #[serde(rename = "T", default = "defaults::horizon")]
    pub horizon: f64,
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default = "defaults::epsilon_star")]
    pub epsilon_star: f64,
    #[serde(default = "defaults::reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::v_grid")]
    pub v_grid: Vec<f64>,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
    #[serde(default)]
    pub variant: Variant,
    /// Points of the likelihood grid.
    #[serde(default = "defaults::grid_points")]
    pub grid_points: usize,
    /// Worker threads; all available cores when unset.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

mod defaults {
    pub fn sigma() -> f64 {
        1.0
    }
    pub fn horizon() -> f64 {
        2000.0
    }
    pub fn dt() -> f64 {
        0.01
    }
    pub fn delta() -> f64 {
        0.6
    }
    pub fn epsilon_star() -> f64 {
        0.5
    }
    pub fn reps() -> usize {
        300
    }
    pub fn v_grid() -> Vec<f64> {
        vec![0.25, 0.5, 1.0]
    }
    pub fn grid_points() -> usize {
        151
    }
}

impl McConfig {
    /// A configuration with every optional field at its default.
    pub fn new(experiment: Experiment, case: Case, theta0: Vec<f64>) -> Self {
        McConfig {
            experiment,
            case,
            theta0,
            f: None,
            a: None,
            b: None,
            sigma: defaults::sigma(),
            theta_box: None,
            horizon: defaults::horizon(),
            dt: defaults::dt(),
            delta: defaults::delta(),
            epsilon_star: defaults::epsilon_star(),
            reps: defaults::reps(),
            seed: 0,
            v_grid: defaults::v_grid(),
            outputs: None,
            variant: Variant::default(),
            grid_points: defaults::grid_points(),
            workers: None,
            tolerances: Tolerances::default(),
        }
    }

    /// Sets the known coefficients to `value` for every coordinate not estimated.
    pub fn with_knowns(mut self, f: f64, a: f64, b: f64) -> Self {
        self.f = Some(f);
        self.a = Some(a);
        self.b = Some(b);
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn theta_box(&self) -> ThetaBox {
        match &self.theta_box {
            Some(b) => ThetaBox(b.iter().map(|[lo, hi]| Interval::new(*lo, *hi)).collect()),
            None => ThetaBox(
                self.theta0
                    .iter()
                    .map(|&t| {
                        let (p, q) = (0.5 * t, 2.0 * t);
                        Interval::new(p.min(q), p.max(q))
                    })
                    .collect(),
            ),
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let knowns = Knowns {
            f: self.f,
            a: self.a,
            b: self.b,
        };
        ModelSpec::from_case(self.case, knowns, self.sigma, self.theta_box())
    }

    pub fn learning(&self) -> LearningConfig {
        LearningConfig {
            delta: self.delta,
            epsilon_star: self.epsilon_star,
            ..LearningConfig::default()
        }
        .with_output_every(0.1, self.dt)
    }

    /// Checks the invariants and returns the validated model.
    pub fn validate(&self) -> Result<ModelSpec> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.dt > 0.0) {
            return Err(Error::Config("T and dt must be positive".into()));
        }
        let spec = self.spec()?;
        if self.theta0.len() != spec.dim() {
            return Err(Error::WrongArity {
                expected: spec.dim(),
                got: self.theta0.len(),
            });
        }
        let strictly_inside = spec
            .theta_box()
            .0
            .iter()
            .zip(&self.theta0)
            .all(|(iv, t)| iv.lo < *t && *t < iv.hi);
        if !strictly_inside {
            return Err(Error::Config(format!("theta0 {:?} must lie strictly inside the box", self.theta0)));
        }
        if matches!(self.experiment, Experiment::Onestep | Experiment::Adaptive | Experiment::MleGrid) {
            let tau = self.learning().tau(self.horizon)?;
            let eps = tau / self.horizon;
            if let Some(v) = self.v_grid.iter().find(|v| !(**v > eps && **v <= 1.0)) {
                return Err(Error::Config(format!("v = {v} outside ({eps}, 1]")));
            }
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_toml_with_defaults() {
        let cfg = McConfig::from_toml_str(
            r#"
experiment = "onestep"
case = "F"
theta0 = 1.0
a = 1.0
b = 1.0
T = 500
reps = 20
"#,
        )
        .unwrap();
        assert_eq!(cfg.theta0, vec![1.0]);
        assert_eq!(cfg.horizon, 500.0);
        assert_eq!(cfg.dt, 0.01);
        assert_eq!(cfg.v_grid, vec![0.25, 0.5, 1.0]);
        assert_eq!(cfg.theta_box(), ThetaBox::scalar(0.5, 2.0));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(McConfig::from_toml_str("experiment = \"mme\"\ncase = \"F\"\ntheta0 = 1.0\nbogus = 1").is_err());
        let mut cfg = McConfig::new(Experiment::Onestep, Case::F, vec![1.0]).with_knowns(1.0, 1.0, 1.0);
        cfg.v_grid = vec![0.01];
        assert!(cfg.validate().is_err());
        cfg.v_grid = vec![1.0];
        cfg.reps = 0;
        assert!(cfg.validate().is_err());
        cfg.reps = 1;
        cfg.theta_box = Some(vec![[1.0, 2.0]]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = McConfig::new(Experiment::Adaptive, Case::AF, vec![1.0, 1.0]).with_knowns(1.0, 1.0, 1.0);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(McConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
