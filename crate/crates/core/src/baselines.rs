//! Comparator estimators: summary-statistic regressions, linear mixed models
//! (standard, visit-aware, observation-aware) and inverse intensity rate ratio weighting.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{covariate_into, Cohort};
use crate::error::{GivehrError, Result};
use crate::numeric::{independent_columns, least_squares};
use crate::optim::{minimize, numerical_gradient, BfgsOptions};
use crate::visiting::{fit_rate_model, visiting_design};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub method: String,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Design columns removed as collinear.
    pub dropped: Vec<String>,
    pub n_subjects: usize,
}

impl BaselineFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.coefficients[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SummaryStat {
    Mean,
    Median,
    Min,
    Max,
}

impl SummaryStat {
    pub fn as_str(self) -> &'static str {
        match self {
            SummaryStat::Mean => "mean",
            SummaryStat::Median => "median",
            SummaryStat::Min => "min",
            SummaryStat::Max => "max",
        }
    }

    /// Summary of a non-empty sample.
    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            SummaryStat::Mean => values.iter().sum::<f64>() / values.len() as f64,
            SummaryStat::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            SummaryStat::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            SummaryStat::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let k = v.len();
                if k % 2 == 1 {
                    v[k / 2]
                } else {
                    0.5 * (v[k / 2 - 1] + v[k / 2])
                }
            }
        }
    }
}

fn outcome_fixed_names(cohort: &Cohort) -> Vec<String> {
    cohort.spec.outcome_fixed.columns.clone()
}

/// Outcome-fixed covariates without any intercept column.
fn outcome_fixed_row(cohort: &Cohort, i: usize, t: f64, buf: &mut Vec<f64>) -> Result<()> {
    let role = &cohort.spec.outcome_fixed;
    covariate_into(&cohort.subjects[i], role, t, buf)?;
    if role.intercept {
        buf.remove(0);
    }
    Ok(())
}

/// Drop collinear columns of `x`, returning the reduced matrix and the dropped names.
fn reduce_columns(x: DMatrix<f64>, names: Vec<String>) -> (DMatrix<f64>, Vec<String>, Vec<String>) {
    let keep = independent_columns(&x, 1e-8);
    if keep.len() == x.ncols() {
        return (x, names, Vec::new());
    }
    let dropped: Vec<String> = (0..x.ncols())
        .filter(|j| !keep.contains(j))
        .map(|j| names[j].clone())
        .collect();
    warn!("dropping collinear design columns: {}", dropped.join(", "));
    let reduced = x.select_columns(&keep);
    let kept = keep.iter().map(|&j| names[j].clone()).collect();
    (reduced, kept, dropped)
}

/// Per-subject summary of observed outcomes regressed on baseline outcome covariates by OLS.
pub fn summary_regression(cohort: &Cohort, stat: SummaryStat) -> Result<BaselineFit> {
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    let mut buf = Vec::new();
    for (i, s) in cohort.subjects.iter().enumerate() {
        let values: Vec<f64> = s.outcome.iter().flatten().copied().collect();
        if values.is_empty() {
            continue;
        }
        outcome_fixed_row(cohort, i, 0.0, &mut buf)?;
        let mut row = vec![1.0];
        row.extend_from_slice(&buf);
        rows.push(row);
        ys.push(stat.apply(&values));
    }
    let dropped_subjects = cohort.n() - rows.len();
    if rows.len() < 2 {
        return Err(GivehrError::InvalidInput(format!(
            "summary regression needs at least 2 subjects with outcomes, found {}",
            rows.len()
        )));
    }
    if dropped_subjects > 0 {
        warn!(
            "summary regression: {dropped_subjects} subject(s) without observed outcomes dropped"
        );
    }
    let p = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
    let mut names = vec!["(Intercept)".to_string()];
    names.extend(outcome_fixed_names(cohort));
    let (x, names, dropped) = reduce_columns(x, names);
    let coef = least_squares(&x, &DVector::from_vec(ys), None)?;
    Ok(BaselineFit {
        method: format!("summary-{}", stat.as_str()),
        names,
        coefficients: coef.iter().copied().collect(),
        converged: true,
        iterations: 0,
        dropped,
        n_subjects: rows.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LmmVariant {
    Standard,
    /// Adds the number of earlier visits.
    VisitAware,
    /// Adds the number of earlier observed measurements.
    ObsAware,
}

impl LmmVariant {
    pub fn id(self) -> &'static str {
        match self {
            LmmVariant::Standard => "lmm",
            LmmVariant::VisitAware => "va-lmm",
            LmmVariant::ObsAware => "oa-lmm",
        }
    }
}

/// Per-subject cross products for the marginal Gaussian likelihood.
struct LmmSubject {
    n: usize,
    xtx: DMatrix<f64>,
    xtz: DMatrix<f64>,
    ztz: DMatrix<f64>,
    xty: DVector<f64>,
    zty: DVector<f64>,
    yty: f64,
}

struct LmmData {
    subjects: Vec<LmmSubject>,
    p: usize,
    q: usize,
    total: usize,
}

/// Lower-triangular factor from `(log d₁, l₂₁, log d₂, …)` in row-major vech order.
fn unpack_cholesky(q: usize, v: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for r in 0..q {
        for c in 0..=r {
            l[(r, c)] = if r == c { v[k].exp() } else { v[k] };
            k += 1;
        }
    }
    l
}

impl LmmData {
    /// `−2 log L / N` profiled over `β`, with `β̂`.
    fn profile(&self, theta: &[f64]) -> Option<(f64, DVector<f64>)> {
        let (p, q) = (self.p, self.q);
        let s2 = (2.0 * theta[0]).exp();
        let l = unpack_cholesky(q, &theta[1..]);
        let mut xvx = DMatrix::<f64>::zeros(p, p);
        let mut xvy = DVector::<f64>::zeros(p);
        let mut yvy = 0.0;
        let mut logdet = 0.0;
        for s in &self.subjects {
            let a = l.transpose() * &s.ztz * &l;
            let m = DMatrix::<f64>::identity(q, q) * s2 + a;
            let chol = m.cholesky()?;
            let ld: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            logdet += (s.n as f64 - q as f64) * s2.ln() + ld;
            let zl_x = l.transpose() * s.xtz.transpose();
            let zl_y = l.transpose() * &s.zty;
            let mx = chol.solve(&zl_x);
            let my = chol.solve(&zl_y);
            xvx += (&s.xtx - zl_x.transpose() * &mx) / s2;
            xvy += (&s.xty - zl_x.transpose() * &my) / s2;
            yvy += (s.yty - zl_y.dot(&my)) / s2;
        }
        let beta = xvx.clone().cholesky()?.solve(&xvy);
        let quad = yvy - beta.dot(&xvy);
        let val = (logdet + quad) / self.total as f64;
        val.is_finite().then_some((val, beta))
    }
}

/// Linear mixed model by maximum likelihood.
///
/// Fixed effects `(1, t, X^Y[, count])`, random effects on `Z^Y` with unstructured covariance.
pub fn fit_lmm(cohort: &Cohort, variant: LmmVariant) -> Result<BaselineFit> {
    let spec = &cohort.spec;
    let q = spec.outcome_random.dim();
    let mut names = vec!["(Intercept)".to_string(), "t".to_string()];
    names.extend(outcome_fixed_names(cohort));
    match variant {
        LmmVariant::Standard => {}
        LmmVariant::VisitAware => names.push("H_N".into()),
        LmmVariant::ObsAware => names.push("H_R".into()),
    }
    let mut xrows: Vec<Vec<f64>> = Vec::new();
    let mut zrows: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    let mut owner = Vec::new();
    let (mut bx, mut bz) = (Vec::new(), Vec::new());
    for (i, s) in cohort.subjects.iter().enumerate() {
        let mut prior_obs = 0.0;
        for j in 0..s.m() {
            let t = s.visits[j];
            if let Some(y) = s.outcome[j] {
                outcome_fixed_row(cohort, i, t, &mut bx)?;
                covariate_into(s, &spec.outcome_random, t, &mut bz)?;
                let mut row = vec![1.0, t];
                row.extend_from_slice(&bx);
                match variant {
                    LmmVariant::Standard => {}
                    LmmVariant::VisitAware => row.push(j as f64),
                    LmmVariant::ObsAware => row.push(prior_obs),
                }
                xrows.push(row);
                zrows.push(bz.clone());
                ys.push(y);
                owner.push(i);
            }
            if s.obs_indicator[j] == 1 {
                prior_obs += 1.0;
            }
        }
    }
    let total = ys.len();
    if total < 2 || !owner.windows(2).any(|w| w[0] == w[1]) {
        return Err(GivehrError::InvalidInput(
            "mixed model needs at least one subject with two observed outcomes".into(),
        ));
    }
    let x_full = DMatrix::from_fn(total, names.len(), |r, c| xrows[r][c]);
    let (x, names, dropped) = reduce_columns(x_full, names);
    let p = x.ncols();
    let z = DMatrix::from_fn(total, q, |r, c| zrows[r][c]);
    let y = DVector::from_vec(ys);

    let mut subjects = Vec::new();
    let mut start = 0;
    while start < total {
        let mut end = start + 1;
        while end < total && owner[end] == owner[start] {
            end += 1;
        }
        let xs = x.rows(start, end - start);
        let zs = z.rows(start, end - start);
        let ysub = y.rows(start, end - start);
        subjects.push(LmmSubject {
            n: end - start,
            xtx: xs.transpose() * xs,
            xtz: xs.transpose() * zs,
            ztz: zs.transpose() * zs,
            xty: xs.transpose() * ysub,
            zty: zs.transpose() * ysub,
            yty: ysub.dot(&ysub),
        });
        start = end;
    }
    let n_subjects = subjects.len();
    let data = LmmData {
        subjects,
        p,
        q,
        total,
    };

    let ols = least_squares(&x, &y, None)?;
    let resid_var = (&y - &x * &ols).norm_squared() / total as f64;
    let dim = 1 + q * (q + 1) / 2;
    let mut theta0 = DVector::zeros(dim);
    theta0[0] = 0.5 * (0.5 * resid_var).max(1e-6).ln();
    let mut k = 1;
    for r in 0..q {
        for c in 0..=r {
            if r == c {
                theta0[k] = 0.5 * (0.5 * resid_var / q as f64).max(1e-6).ln();
            }
            k += 1;
        }
    }
    let objective = |th: &DVector<f64>| data.profile(th.as_slice()).map_or(f64::INFINITY, |v| v.0);
    let result = minimize(
        |th| (objective(th), numerical_gradient(objective, th)),
        theta0,
        BfgsOptions {
            max_iter: 300,
            grad_tol: 1e-6,
        },
    );
    if !result.converged && !(result.grad_norm < 1e-4) {
        return Err(GivehrError::NonConvergence {
            what: format!("{} likelihood", variant.id()),
            iterations: result.iterations,
            grad_norm: result.grad_norm,
        });
    }
    let (_, beta) =
        data.profile(result.x.as_slice())
            .ok_or_else(|| GivehrError::NonConvergence {
                what: format!("{} likelihood", variant.id()),
                iterations: result.iterations,
                grad_norm: f64::NAN,
            })?;
    Ok(BaselineFit {
        method: variant.id().to_string(),
        names,
        coefficients: beta.iter().copied().collect(),
        converged: result.converged,
        iterations: result.iterations,
        dropped,
        n_subjects,
    })
}

/// Weighted least squares of observed `Y` on `(1, t, X^Y)` with weights `exp(−γ̂ᵀX^V)`.
pub fn iirr_weighted(cohort: &Cohort) -> Result<BaselineFit> {
    let rate = fit_rate_model(cohort)?;
    let xv = visiting_design(cohort)?;
    let lin = &xv * &rate.gamma;
    let mut names = vec!["(Intercept)".to_string(), "t".to_string()];
    names.extend(outcome_fixed_names(cohort));
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    let mut buf = Vec::new();
    let mut used = vec![false; cohort.n()];
    for (i, s) in cohort.subjects.iter().enumerate() {
        let w = (-lin[i]).exp();
        for (j, y) in s.outcome.iter().enumerate() {
            if let Some(y) = y {
                let t = s.visits[j];
                outcome_fixed_row(cohort, i, t, &mut buf)?;
                let mut row = vec![1.0, t];
                row.extend_from_slice(&buf);
                rows.push(row);
                ys.push(*y);
                ws.push(w);
                used[i] = true;
            }
        }
    }
    if rows.len() < names.len() {
        return Err(GivehrError::InvalidInput(
            "too few observed outcomes for weighted regression".into(),
        ));
    }
    let x = DMatrix::from_fn(rows.len(), names.len(), |r, c| rows[r][c]);
    let (x, names, dropped) = reduce_columns(x, names);
    let coef = least_squares(&x, &DVector::from_vec(ys), Some(&DVector::from_vec(ws)))?;
    Ok(BaselineFit {
        method: "iirr".into(),
        names,
        coefficients: coef.iter().copied().collect(),
        converged: true,
        iterations: rate.convergence.iterations,
        dropped,
        n_subjects: used.iter().filter(|&&u| u).count(),
    })
}

/// Registered estimator ids.
pub const REGISTERED: [&str; 9] = [
    "givehr",
    "summary-mean",
    "summary-median",
    "summary-min",
    "summary-max",
    "lmm",
    "va-lmm",
    "oa-lmm",
    "iirr",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    Givehr,
    Summary(SummaryStat),
    Lmm(LmmVariant),
    Iirr,
}

impl Estimator {
    pub fn id(self) -> String {
        match self {
            Estimator::Givehr => "givehr".into(),
            Estimator::Summary(s) => format!("summary-{}", s.as_str()),
            Estimator::Lmm(v) => v.id().into(),
            Estimator::Iirr => "iirr".into(),
        }
    }

    pub fn all() -> Vec<Estimator> {
        REGISTERED
            .iter()
            .map(|s| s.parse().expect("registered id"))
            .collect()
    }

    /// Parse a comma-separated list; `all` expands to every registered id.
    pub fn parse_list(list: &str) -> Result<Vec<Estimator>> {
        let mut out = Vec::new();
        for id in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if id == "all" {
                out.extend(Estimator::all());
            } else {
                out.push(id.parse()?);
            }
        }
        if out.is_empty() {
            return Err(GivehrError::Config("empty estimator list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Estimator {
    type Err = GivehrError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "givehr" => Estimator::Givehr,
            "summary-mean" => Estimator::Summary(SummaryStat::Mean),
            "summary-median" => Estimator::Summary(SummaryStat::Median),
            "summary-min" => Estimator::Summary(SummaryStat::Min),
            "summary-max" => Estimator::Summary(SummaryStat::Max),
            "lmm" => Estimator::Lmm(LmmVariant::Standard),
            "va-lmm" => Estimator::Lmm(LmmVariant::VisitAware),
            "oa-lmm" => Estimator::Lmm(LmmVariant::ObsAware),
            "iirr" => Estimator::Iirr,
            other => {
                return Err(GivehrError::UnknownEstimator {
                    id: other.to_string(),
                    registered: REGISTERED.join(", "),
                })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let v = [1.0, 5.0, 3.0];
        assert_eq!(SummaryStat::Max.apply(&v), 5.0);
        assert_eq!(SummaryStat::Min.apply(&v), 1.0);
        assert_eq!(SummaryStat::Median.apply(&v), 3.0);
        assert_eq!(SummaryStat::Mean.apply(&v), 3.0);
        assert_eq!(SummaryStat::Median.apply(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn registry_round_trip() {
        for id in REGISTERED {
            assert_eq!(id.parse::<Estimator>().unwrap().id(), id);
        }
        match "foo".parse::<Estimator>() {
            Err(GivehrError::UnknownEstimator { registered, .. }) => {
                assert!(registered.contains("iirr"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cholesky_unpacking() {
        let l = unpack_cholesky(2, &[0.0, 0.5, 2f64.ln()]);
        assert_eq!(l[(0, 0)], 1.0);
        assert_eq!(l[(1, 0)], 0.5);
        assert!((l[(1, 1)] - 2.0).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
    }
}
