//! Replication summaries and the normality diagnostic.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Mean, unbiased variance and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: Option<f64>,
    pub se_mean: Option<f64>,
}

pub fn summarize(xs: &[f64]) -> Option<Summary> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let variance = (n > 1).then(|| xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64);
    Some(Summary {
        n,
        mean,
        variance,
        se_mean: variance.map(|v| (v / n as f64).sqrt()),
    })
}

/// Unbiased sample covariance of paired samples.
pub fn covariance(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    Some(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1) as f64)
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let c = covariance(xs, ys)?;
    let vx = covariance(xs, xs)?;
    let vy = covariance(ys, ys)?;
    Some(c / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normality {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    /// Standardised third central moment.
    pub skewness: f64,
    /// Standardised fourth central moment (3 for a Gaussian).
    pub kurtosis: f64,
    /// Sup-distance between the empirical CDF and N(0, target variance).
    pub ks_statistic: f64,
    /// Asymptotic 1% critical value `1.63/√n`.
    pub ks_critical_01: f64,
}

pub fn normality_check(samples: &[f64], target_variance: f64) -> Result<Normality> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::InsufficientData(format!("normality check needs 100 samples, got {n}")));
    }
    if !(target_variance > 0.0) {
        return Err(Error::Domain(format!("target variance must be positive, got {target_variance}")));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let central = |p: i32| samples.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / nf;
    let m2 = central(2);
    if !(m2 > 0.0) {
        return Err(Error::DegenerateSample("samples have zero variance".into()));
    }
    let dist = Normal::new(0.0, target_variance.sqrt()).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = dist.cdf(x);
            ((i + 1) as f64 / nf - cdf).max(cdf - i as f64 / nf)
        })
        .fold(0.0, f64::max);
    Ok(Normality {
        n,
        mean,
        variance: m2 * nf / (nf - 1.0),
        skewness: central(3) / m2.powf(1.5),
        kurtosis: central(4) / (m2 * m2),
        ks_statistic: ks,
        ks_critical_01: 1.63 / nf.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::RngStream;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn summary_of_small_sample() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.variance, Some(1.0));
        assert!(summarize(&[]).is_none());
        assert_eq!(summarize(&[4.0]).unwrap().variance, None);
        assert!((correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 0.99).abs() < 0.01);
    }

    #[test]
    fn constant_samples_are_degenerate() {
        assert!(matches!(normality_check(&[1.0; 200], 1.0), Err(Error::DegenerateSample(_))));
        assert!(matches!(normality_check(&[1.0; 20], 1.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn self_test_against_own_generator() {
        let n = 10_000;
        let runs = 1000;
        let mut below = 0;
        let mut kurt = Vec::new();
        for run in 0..runs {
            let mut rng = RngStream::new(99, run).rng();
            let xs: Vec<f64> = (0..n).map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            let res = normality_check(&xs, 4.0).unwrap();
            if res.ks_statistic < res.ks_critical_01 {
                below += 1;
            }
            kurt.push(res.kurtosis);
        }
        assert!(below as f64 >= 0.99 * runs as f64, "{below}");
        let s = summarize(&kurt).unwrap();
        // Kurtosis of n Gaussian draws has sd sqrt(24/n).
        assert!((s.mean - 3.0).abs() < 3.0 * (24.0 / n as f64).sqrt());
    }

    #[test]
    fn ks_detects_wrong_variance() {
        let mut rng = RngStream::new(98, 0).rng();
        let xs: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let res = normality_check(&xs, 4.0).unwrap();
        assert!(res.ks_statistic > res.ks_critical_01);
    }
}
