//! Ensemble statistics: summaries, two-sample tests and regressions.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Sample mean, unbiased variance and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

impl Summary {
    pub fn new(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                n,
                mean: f64::NAN,
                variance: f64::NAN,
                std_error: f64::NAN,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            n,
            mean,
            variance,
            std_error: (variance / n as f64).sqrt(),
        }
    }

    /// Standard error of the sample variance under a Gaussian model.
    pub fn variance_std_error(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        self.variance * (2.0 / (self.n - 1) as f64).sqrt()
    }
}

/// `x / s` with `0 / 0 = 0`.
fn safe_ratio(x: f64, s: f64) -> f64 {
    if s > 0.0 {
        x / s
    } else if x == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(x)
    }
}

/// Two-sample z statistic on the means.
pub fn two_sample_z(a: &Summary, b: &Summary) -> f64 {
    safe_ratio(a.mean - b.mean, (a.std_error.powi(2) + b.std_error.powi(2)).sqrt())
}

/// `var(a) / var(b)`, equal to 1 when both vanish.
pub fn variance_ratio(a: &Summary, b: &Summary) -> f64 {
    if a.variance == 0.0 && b.variance == 0.0 {
        1.0
    } else if b.variance == 0.0 {
        f64::INFINITY
    } else {
        a.variance / b.variance
    }
}

/// Monte-Carlo estimate of a quantity with a known exact value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub exact: f64,
    pub z: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn new(samples: &[f64], exact: f64) -> Self {
        let s = Summary::new(samples);
        Self {
            estimate: s.mean,
            std_error: s.std_error,
            exact,
            z: safe_ratio(s.mean - exact, s.std_error),
            samples: s.n,
        }
    }

    pub fn passes(&self, z_max: f64) -> bool {
        self.z.abs() <= z_max
    }
}

/// Least-squares line with the standard error of its slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_error: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "regression needs two or more paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("regression abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let slope_std_error = if xs.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        slope_std_error,
        r_squared,
    })
}

/// Fit `log y = slope * log x + c`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log regression needs positive data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Pearson goodness-of-fit test of counts against probabilities.
/// Returns `(statistic, p_value)`.
pub fn chi_square_test(counts: &[u64], probs: &[f64]) -> Result<(f64, f64)> {
    if counts.len() != probs.len() || counts.len() < 2 {
        return Err(Error::InvalidArgument("chi-square test needs two or more matching cells".into()));
    }
    let total: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * total as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64)
        .map_err(|e| Error::InvalidArgument(format!("chi-square distribution: {e}")))?;
    Ok((stat, 1.0 - dist.cdf(stat)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_known_sample() {
        let s = Summary::new(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!((s.std_error - (5.0 / 12.0f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn loglog_recovers_power_law() {
        let xs = [0.4, 0.2, 0.1, 0.05];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        let fit = loglog_fit(&xs, &ys).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_z_and_ratio() {
        let a = Summary::new(&[1.0, 1.0]);
        assert_eq!(two_sample_z(&a, &a), 0.0);
        assert_eq!(variance_ratio(&a, &a), 1.0);
    }

    #[test]
    fn chi_square_exact_counts() {
        let (stat, p) = chi_square_test(&[50, 50], &[0.5, 0.5]).unwrap();
        assert_eq!(stat, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
    }
}
