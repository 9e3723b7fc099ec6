//! Replication studies: bias, RMSE and mean standard error per estimator.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fit_lmm, iirr_weighted, summary_regression, Estimator};
use crate::dataset::Cohort;
use crate::error::{GivehrError, Result};
use crate::inference::{sandwich_variance, SeMethod};
use crate::outcome::{fit_givehr, GivehrConfig};
use crate::simulate::{generate, replicate_seed, Scenario, ScenarioSpec};

/// Parameters tracked in every replication, with their true values.
pub const TARGETS: [&str; 2] = ["F", "X"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Generator settings; the seed field is ignored in favour of per-replicate seeds.
    pub scenario: ScenarioSpec,
    /// Covariate roles used for fitting (defaults to the generator's roles).
    #[serde(default)]
    pub roles: Option<crate::dataset::CovariateSpec>,
    pub estimators: Vec<Estimator>,
    pub reps: usize,
    pub seed: u64,
    /// `sandwich` adds GIVEHR standard errors; baselines never report SEs.
    pub se: SeMethod,
}

impl BenchmarkConfig {
    pub fn new(
        scenario: Scenario,
        n: usize,
        estimators: Vec<Estimator>,
        reps: usize,
        seed: u64,
    ) -> Self {
        Self {
            scenario: ScenarioSpec::new(scenario, n, seed),
            roles: None,
            estimators,
            reps,
            seed,
            se: SeMethod::None,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimator: String,
    /// Estimates of `TARGETS`, `None` if the fit failed or the column was dropped.
    pub estimates: Vec<Option<f64>>,
    pub se: Vec<Option<f64>>,
    pub error: Option<String>,
    /// Estimating-equation residual at the solution (GIVEHR only).
    pub equation_residual: Option<f64>,
    /// Largest risk-set centering residual (GIVEHR only).
    pub centering_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: String,
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    pub reps: usize,
    pub failed: usize,
    pub bias: f64,
    pub rmse: f64,
    pub empirical_se: f64,
    pub mean_se: Option<f64>,
    /// Set when every replicate failed.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn row(&self, estimator: &str, parameter: &str) -> Option<&BenchmarkRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.parameter == parameter)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# givehr {} seed={} config_sha256={}",
            self.version, self.seed, self.config_hash
        )?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "scenario",
            "estimator",
            "parameter",
            "truth",
            "reps",
            "failed",
            "bias",
            "rmse",
            "empirical_se",
            "mean_se",
            "flagged",
        ])?;
        for r in &self.rows {
            csv.write_record([
                r.scenario.clone(),
                r.estimator.clone(),
                r.parameter.clone(),
                r.truth.to_string(),
                r.reps.to_string(),
                r.failed.to_string(),
                r.bias.to_string(),
                r.rmse.to_string(),
                r.empirical_se.to_string(),
                r.mean_se.map(|v| v.to_string()).unwrap_or_default(),
                r.flagged.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replications {
    pub table: BenchmarkTable,
    pub records: Vec<ReplicateRecord>,
}

fn fit_one(cohort: &Cohort, estimator: Estimator, se: SeMethod) -> ReplicateRecord {
    let mut record = ReplicateRecord {
        replicate: 0,
        estimator: estimator.id(),
        estimates: vec![None; TARGETS.len()],
        se: vec![None; TARGETS.len()],
        error: None,
        equation_residual: None,
        centering_residual: None,
    };
    let result: Result<()> = (|| {
        match estimator {
            Estimator::Givehr => {
                let fit = fit_givehr(cohort, &GivehrConfig::default())?;
                for (k, t) in TARGETS.iter().enumerate() {
                    record.estimates[k] = fit.coefficient(t);
                }
                record.equation_residual = Some(fit.diagnostics.equation_residual);
                record.centering_residual = Some(fit.diagnostics.centering_residual);
                if se == SeMethod::Sandwich {
                    let v = sandwich_variance(&fit, cohort)?;
                    for (k, t) in TARGETS.iter().enumerate() {
                        record.se[k] = v.se_of(t);
                    }
                }
            }
            other => {
                let fit = match other {
                    Estimator::Summary(s) => summary_regression(cohort, s)?,
                    Estimator::Lmm(v) => fit_lmm(cohort, v)?,
                    Estimator::Iirr => iirr_weighted(cohort)?,
                    Estimator::Givehr => unreachable!(),
                };
                for (k, t) in TARGETS.iter().enumerate() {
                    record.estimates[k] = fit.coefficient(t);
                }
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        record.error = Some(e.to_string());
        record.estimates = vec![None; TARGETS.len()];
        record.se = vec![None; TARGETS.len()];
    }
    record
}

/// Generate `reps` cohorts and fit every estimator on each.
///
/// Replicate `r` uses the generator seed `replicate_seed(seed, r)`, so results do not
/// depend on scheduling or thread count.
pub fn run_replications(config: &BenchmarkConfig) -> Result<Replications> {
    if config.reps == 0 {
        return Err(GivehrError::Config(
            "replication count must be positive".into(),
        ));
    }
    if config.se == SeMethod::Bootstrap {
        return Err(GivehrError::Config(
            "benchmark supports `sandwich` or `none` standard errors".into(),
        ));
    }
    let per_rep: Vec<Result<Vec<ReplicateRecord>>> = (0..config.reps)
        .into_par_iter()
        .map(|r| {
            let mut spec = config.scenario.clone();
            spec.seed = replicate_seed(config.seed, r as u64);
            let (mut cohort, _) = generate(&spec)?;
            if let Some(roles) = &config.roles {
                cohort.spec = roles.clone();
            }
            Ok(config
                .estimators
                .iter()
                .map(|&e| {
                    let mut rec = fit_one(&cohort, e, config.se);
                    rec.replicate = r;
                    if let Some(err) = &rec.error {
                        warn!("replicate {r}, {}: {err}", rec.estimator);
                    }
                    rec
                })
                .collect())
        })
        .collect();
    let mut records = Vec::with_capacity(config.reps * config.estimators.len());
    for r in per_rep {
        records.extend(r?);
    }
    let truths = [config.scenario.beta_f, config.scenario.beta_x];
    let mut rows = Vec::new();
    for est in &config.estimators {
        let id = est.id();
        for (k, param) in TARGETS.iter().enumerate() {
            let mine: Vec<&ReplicateRecord> =
                records.iter().filter(|r| r.estimator == id).collect();
            let values: Vec<f64> = mine.iter().filter_map(|r| r.estimates[k]).collect();
            let ses: Vec<f64> = mine.iter().filter_map(|r| r.se[k]).collect();
            rows.push(summarize(
                &config.scenario.scenario,
                &id,
                param,
                truths[k],
                &values,
                &ses,
                mine.len(),
            ));
        }
    }
    Ok(Replications {
        table: BenchmarkTable {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_hash: config.hash(),
            rows,
        },
        records,
    })
}

/// Bias, RMSE and empirical SE of `values` around `truth`.
pub fn summarize(
    scenario: &Scenario,
    estimator: &str,
    parameter: &str,
    truth: f64,
    values: &[f64],
    ses: &[f64],
    attempted: usize,
) -> BenchmarkRow {
    let k = values.len();
    let (bias, rmse, emp) = if k == 0 {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = values.iter().sum::<f64>() / k as f64;
        let mse = values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / k as f64;
        let var = if k > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64
        } else {
            0.0
        };
        (mean - truth, mse.sqrt(), var.sqrt())
    };
    BenchmarkRow {
        scenario: scenario.to_string(),
        estimator: estimator.to_string(),
        parameter: parameter.to_string(),
        truth,
        reps: k,
        failed: attempted - k,
        bias,
        rmse,
        empirical_se: emp,
        mean_se: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
        flagged: k == 0,
    }
}
