//! Point and probabilistic error metrics over aligned rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihoods::gaussian_log_density;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "SMSE")]
    pub smse: f64,
    #[serde(rename = "MLL")]
    pub mll: f64,
}

fn check(y: &[f64], mu: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != mu.len() {
        return Err(Error::Data(format!("{} targets for {} predictions", y.len(), mu.len())));
    }
    Ok(())
}

pub fn mae(y: &[f64], mu: &[f64]) -> Result<f64> {
    check(y, mu)?;
    Ok(y.iter().zip(mu).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean squared error over the population variance of the targets.
pub fn smse(y: &[f64], mu: &[f64]) -> Result<f64> {
    check(y, mu)?;
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Data("test targets have zero variance; SMSE undefined".into()));
    }
    Ok(y.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n / var)
}

/// Negative mean Gaussian log predictive density; `var` must already include
/// the observation noise.
pub fn mll(y: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    check(y, mu)?;
    check(y, var)?;
    if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Data(format!("non-positive predictive variance {v}")));
    }
    let lp: f64 = (0..y.len()).map(|i| gaussian_log_density(y[i], mu[i], var[i])).sum();
    Ok(-lp / y.len() as f64)
}

pub fn all(y: &[f64], mu: &[f64], var: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        mae: mae(y, mu)?,
        smse: smse(y, mu)?,
        mll: mll(y, mu, var)?,
    })
}
