//! Standard errors for `(β̂, θ̂)`: plug-in sandwich and subject-level bootstrap.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Cohort;
use crate::error::{GivehrError, Result};
use crate::numeric::{norm_quantile, sample_covariance, solve_checked};
use crate::outcome::{
    baseline_increments, bread, build_design, equation_contributions, fit_givehr, risk_set_centers,
    subject_contributions, GivehrConfig, GivehrFit,
};
use crate::simulate::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMethod {
    Bootstrap,
    Sandwich,
    None,
}

impl fmt::Display for SeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeMethod::Bootstrap => "bootstrap",
            SeMethod::Sandwich => "sandwich",
            SeMethod::None => "none",
        })
    }
}

impl FromStr for SeMethod {
    type Err = GivehrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" => Ok(SeMethod::Bootstrap),
            "sandwich" => Ok(SeMethod::Sandwich),
            "none" => Ok(SeMethod::None),
            other => Err(GivehrError::Config(format!(
                "unknown SE method `{other}` (expected bootstrap, sandwich or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub method: SeMethod,
    /// Coefficients covered, in order; θ entries that are not identified are absent.
    pub names: Vec<String>,
    pub covariance: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub replicates: Option<usize>,
    pub failed: usize,
    pub ci_level: f64,
}

impl VarianceEstimate {
    fn from_covariance(
        method: SeMethod,
        names: Vec<String>,
        cov: DMatrix<f64>,
        ci_level: f64,
    ) -> Self {
        let sym = (&cov + cov.transpose()) * 0.5;
        let se = (0..sym.nrows())
            .map(|k| sym[(k, k)].max(0.0).sqrt())
            .collect();
        let covariance = (0..sym.nrows())
            .map(|r| sym.row(r).iter().copied().collect())
            .collect();
        Self {
            method,
            names,
            covariance,
            se,
            replicates: None,
            failed: 0,
            ci_level,
        }
    }

    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.se[k])
    }

    /// Normal-theory interval `estimate ± z·SE` for a named coefficient.
    pub fn interval(&self, name: &str, estimate: f64) -> Option<(f64, f64)> {
        let z = norm_quantile(0.5 + self.ci_level / 2.0);
        self.se_of(name)
            .map(|se| (estimate - z * se, estimate + z * se))
    }

    pub fn with_ci_level(mut self, level: f64) -> Self {
        self.ci_level = level;
        self
    }
}

fn kept_names(fit: &GivehrFit) -> Vec<String> {
    let p = fit.outcome.beta.len();
    fit.names
        .iter()
        .enumerate()
        .filter(|(k, _)| *k < p || fit.outcome.theta_identified[*k - p])
        .map(|(_, n)| n.clone())
        .collect()
}

fn kept_estimates(fit: &GivehrFit) -> DVector<f64> {
    fit.outcome.kept_vector()
}

/// Per-subject score used in the sandwich meat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Meat {
    /// The subject's own estimating-equation term.
    #[default]
    EstimatingEquation,
    /// The same term minus its compensator under the fitted baseline.
    Martingale,
}

/// Plug-in sandwich `S⁻¹ (Σ_i φ_i φ_iᵀ) S⁻ᵀ`, treating stage 1–2 estimates as fixed.
pub fn sandwich_variance(fit: &GivehrFit, cohort: &Cohort) -> Result<VarianceEstimate> {
    sandwich_variance_with(fit, cohort, Meat::default())
}

pub fn sandwich_variance_with(
    fit: &GivehrFit,
    cohort: &Cohort,
    meat_kind: Meat,
) -> Result<VarianceEstimate> {
    let design = build_design(cohort, &fit.visiting, &fit.observation)?;
    let centers = risk_set_centers(&design)?;
    let phi = match meat_kind {
        Meat::EstimatingEquation => equation_contributions(&design, &centers, &fit.outcome),
        Meat::Martingale => {
            let increments = baseline_increments(&design, &centers, &fit.outcome);
            subject_contributions(&design, &centers, &fit.outcome, &increments)
        }
    };
    let s = bread(&design, &centers);
    let k = s.nrows();
    let mut meat = DMatrix::zeros(k, k);
    for f in &phi {
        meat += f * f.transpose();
    }
    let mut s_inv = DMatrix::zeros(k, k);
    for j in 0..k {
        let e = DVector::from_fn(k, |i, _| if i == j { 1.0 } else { 0.0 });
        let (col, _) = solve_checked(&s, &e, "sandwich bread", 1e14)?;
        s_inv.set_column(j, &col);
    }
    let cov = &s_inv * meat * s_inv.transpose();
    Ok(VarianceEstimate::from_covariance(
        SeMethod::Sandwich,
        kept_names(fit),
        cov,
        0.95,
    ))
}

/// Resample indices for bootstrap replicate `b`.
pub fn resample_indices(n: usize, seed: u64, b: u64) -> Vec<usize> {
    let mut rng = stream(seed, b, 15);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Cluster bootstrap: `reps` subject resamples, each refitted through all three stages.
///
/// A replicate fails if any stage errors or if its set of identified θ entries differs
/// from the full-data fit. More than 10% failures is an error.
pub fn bootstrap_variance(
    cohort: &Cohort,
    config: &GivehrConfig,
    reps: usize,
    seed: u64,
    reference: &GivehrFit,
) -> Result<VarianceEstimate> {
    if reps < 2 {
        return Err(GivehrError::Config(
            "bootstrap needs at least 2 replicates".into(),
        ));
    }
    let names = kept_names(reference);
    let outcomes: Vec<Option<DVector<f64>>> = (0..reps as u64)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(cohort.n(), seed, b);
            let sample = cohort.resample(&idx);
            match fit_givehr(&sample, config) {
                Ok(fit) if fit.outcome.theta_identified == reference.outcome.theta_identified => {
                    Some(kept_estimates(&fit))
                }
                Ok(_) => {
                    warn!("bootstrap replicate {b}: identified θ set changed; dropped");
                    None
                }
                Err(e) => {
                    warn!("bootstrap replicate {b} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_none()).count();
    if failed * 10 > reps {
        return Err(GivehrError::BootstrapFailure {
            failed,
            total: reps,
        });
    }
    let rows: Vec<DVector<f64>> = outcomes.into_iter().flatten().collect();
    let cov = sample_covariance(&rows);
    let mut est = VarianceEstimate::from_covariance(SeMethod::Bootstrap, names, cov, 0.95);
    est.replicates = Some(rows.len());
    est.failed = failed;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resampling_is_deterministic() {
        assert_eq!(resample_indices(50, 3, 7), resample_indices(50, 3, 7));
        assert_ne!(resample_indices(50, 3, 7), resample_indices(50, 3, 8));
        assert!(resample_indices(50, 3, 7).iter().all(|&i| i < 50));
    }

    #[test]
    fn interval_uses_normal_quantile() {
        let v = VarianceEstimate::from_covariance(
            SeMethod::Sandwich,
            vec!["F".into()],
            DMatrix::from_element(1, 1, 4.0),
            0.95,
        );
        let (lo, hi) = v.interval("F", 1.0).unwrap();
        assert!((hi - 1.0 - 1.959963984540054 * 2.0).abs() < 1e-9);
        assert!((1.0 - lo - (hi - 1.0)).abs() < 1e-12);
    }
}
