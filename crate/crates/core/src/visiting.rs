//! Stage 1: the visiting process.
//!
//! Visits follow a multiplicative intensity `η_i exp(γᵀX_i) λ₀(t)` with a
//! lognormal frailty `η_i = exp(μ₀ + σU_i)`, `U_i ~ N(0, 1)`, `E η_i = 1`.
//! This module estimates `γ` from the Andersen–Gill score, `Λ₀` by Breslow,
//! `σ²` by moments on the visit counts, and the Laplace posterior of each `U_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Cohort, Role};
use crate::error::{GivehrError, Result, Stage};
use crate::numeric::null_direction;
use crate::step::StepFunction;

const SCORE_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 100;
const EB_TOL: f64 = 1e-10;

/// Laplace (normal) approximation of the posterior of `U_i` given the visit count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbPosterior {
    pub mu_u: f64,
    pub s_u_sq: f64,
}

impl EbPosterior {
    pub const PRIOR: EbPosterior = EbPosterior {
        mu_u: 0.0,
        s_u_sq: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectVisiting {
    pub id: String,
    pub m: usize,
    /// `Λ̂₀(C_i)`; zero marks a subject censored before the first pooled visit.
    pub cum_baseline: f64,
    pub nu: f64,
    pub mu_u: f64,
    pub s_u_sq: f64,
}

impl SubjectVisiting {
    pub fn eb(&self) -> EbPosterior {
        EbPosterior {
            mu_u: self.mu_u,
            s_u_sq: self.s_u_sq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub score_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitingFit {
    pub gamma: Vec<f64>,
    pub baseline: StepFunction,
    pub sigma_eta_sq: f64,
    pub sigma_sq: f64,
    pub mu0: f64,
    pub subjects: Vec<SubjectVisiting>,
    pub convergence: Convergence,
}

impl VisitingFit {
    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct RateModelFit {
    pub gamma: DVector<f64>,
    pub convergence: Convergence,
}

/// Baseline visiting design, one row per subject.
pub fn visiting_design(cohort: &Cohort) -> Result<DMatrix<f64>> {
    let role = &cohort.spec.visiting;
    let p = role.dim();
    let mut x = DMatrix::zeros(cohort.n(), p);
    for (i, s) in cohort.subjects.iter().enumerate() {
        for name in &role.columns {
            let series = s
                .covariates
                .get(name)
                .ok_or_else(|| GivehrError::MissingSeries {
                    subject: s.id.clone(),
                    name: name.clone(),
                })?;
            if !series.is_constant() {
                return Err(GivehrError::InvalidInput(format!(
                    "visiting covariate `{name}` varies over time for subject `{}`",
                    s.id
                )));
            }
        }
        let v = cohort.covariate_at(i, Role::Visiting, 0.0)?;
        x.row_mut(i).copy_from(&v.transpose());
    }
    Ok(x)
}

/// Distinct visit times with their multiplicity and the summed covariates of the visiting subjects.
struct EventTable {
    times: Vec<f64>,
    counts: Vec<f64>,
    xsum: Vec<DVector<f64>>,
}

fn event_table(cohort: &Cohort, x: &DMatrix<f64>) -> EventTable {
    let mut events: Vec<(f64, usize)> = cohort
        .subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.visits.iter().map(move |&t| (t, i)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let p = x.ncols();
    let mut table = EventTable {
        times: Vec::new(),
        counts: Vec::new(),
        xsum: Vec::new(),
    };
    for (t, i) in events {
        if table.times.last() != Some(&t) {
            table.times.push(t);
            table.counts.push(0.0);
            table.xsum.push(DVector::zeros(p));
        }
        let k = table.times.len() - 1;
        table.counts[k] += 1.0;
        table.xsum[k] += x.row(i).transpose();
    }
    table
}

/// Subjects ordered by decreasing censoring time, for sweeping risk sets backwards in time.
fn by_censoring_desc(cohort: &Cohort) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cohort.n()).collect();
    idx.sort_by(|&a, &b| {
        cohort.subjects[b]
            .censoring_time
            .total_cmp(&cohort.subjects[a].censoring_time)
    });
    idx
}

struct PartialLikelihood {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn partial_likelihood(
    cohort: &Cohort,
    x: &DMatrix<f64>,
    events: &EventTable,
    order: &[usize],
    gamma: &DVector<f64>,
) -> Result<PartialLikelihood> {
    let p = x.ncols();
    let eta = x * gamma;
    let shift = eta.max();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut out = PartialLikelihood {
        loglik: 0.0,
        score: DVector::zeros(p),
        info: DMatrix::zeros(p, p),
    };
    let mut next = 0;
    for k in (0..events.times.len()).rev() {
        let t = events.times[k];
        while next < order.len() && cohort.subjects[order[next]].censoring_time >= t {
            let j = order[next];
            let w = (eta[j] - shift).exp();
            let xj = x.row(j).transpose();
            s0 += w;
            s1.axpy(w, &xj, 1.0);
            s2.ger(w, &xj, &xj, 1.0);
            next += 1;
        }
        if s0 <= 0.0 {
            return Err(GivehrError::EmptyRiskSet(t));
        }
        let d = events.counts[k];
        let xbar = &s1 / s0;
        out.loglik += gamma.dot(&events.xsum[k]) - d * (s0.ln() + shift);
        out.score += &events.xsum[k] - &xbar * d;
        out.info += (&s2 / s0 - &xbar * xbar.transpose()) * d;
    }
    Ok(out)
}

/// Andersen–Gill score at `gamma` (zero at the estimate).
pub fn rate_score(cohort: &Cohort, gamma: &DVector<f64>) -> Result<DVector<f64>> {
    let x = visiting_design(cohort)?;
    let events = event_table(cohort, &x);
    let order = by_censoring_desc(cohort);
    Ok(partial_likelihood(cohort, &x, &events, &order, gamma)?.score)
}

/// Solve the Andersen–Gill score equation by Newton–Raphson with step halving from `γ = 0`.
pub fn fit_rate_model(cohort: &Cohort) -> Result<RateModelFit> {
    if cohort.total_visits() == 0 {
        return Err(GivehrError::NoVisits);
    }
    let x = visiting_design(cohort)?;
    let p = x.ncols();
    let mut gamma = DVector::zeros(p);
    if p == 0 {
        return Ok(RateModelFit {
            gamma,
            convergence: Convergence {
                iterations: 0,
                score_norm: 0.0,
            },
        });
    }
    let events = event_table(cohort, &x);
    let order = by_censoring_desc(cohort);
    let mut pl = partial_likelihood(cohort, &x, &events, &order, &gamma)?;
    for iter in 0..MAX_NEWTON {
        let score_norm = pl.score.norm();
        if score_norm <= SCORE_TOL {
            return Ok(RateModelFit {
                gamma,
                convergence: Convergence {
                    iterations: iter,
                    score_norm,
                },
            });
        }
        let eig = pl.info.clone().symmetric_eigen();
        let (eig_min, eig_max) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        let chol = pl.info.clone().cholesky();
        let Some(chol) = chol.filter(|_| eig_min > 1e-10 * eig_max.max(1.0)) else {
            return Err(GivehrError::Singular {
                what: "visiting information matrix".into(),
                condition: if eig_min > 0.0 {
                    eig_max / eig_min
                } else {
                    f64::INFINITY
                },
                direction: null_direction(&pl.info),
            });
        };
        let delta = chol.solve(&pl.score);
        let mut step = 1.0;
        loop {
            let trial = &gamma + &delta * step;
            let next = partial_likelihood(cohort, &x, &events, &order, &trial)?;
            if next.loglik.is_finite() && next.loglik >= pl.loglik - 1e-12 * pl.loglik.abs() {
                gamma = trial;
                pl = next;
                break;
            }
            step *= 0.5;
            if step < 1e-10 {
                return Err(GivehrError::NonConvergence {
                    what: "visiting Newton-Raphson (step halving exhausted)".into(),
                    iterations: iter,
                    grad_norm: score_norm,
                });
            }
        }
    }
    let score_norm = pl.score.norm();
    if score_norm <= SCORE_TOL {
        return Ok(RateModelFit {
            gamma,
            convergence: Convergence {
                iterations: MAX_NEWTON,
                score_norm,
            },
        });
    }
    Err(GivehrError::NonConvergence {
        what: "visiting Newton-Raphson".into(),
        iterations: MAX_NEWTON,
        grad_norm: score_norm,
    })
}

/// Breslow estimator of the cumulative baseline visit intensity.
pub fn breslow_baseline(cohort: &Cohort, gamma: &DVector<f64>) -> Result<StepFunction> {
    let x = visiting_design(cohort)?;
    let events = event_table(cohort, &x);
    let order = by_censoring_desc(cohort);
    let w: Vec<f64> = (0..cohort.n())
        .map(|j| x.row(j).transpose().dot(gamma).exp())
        .collect();
    let mut jumps = vec![0.0; events.times.len()];
    let mut s0 = 0.0;
    let mut next = 0;
    for k in (0..events.times.len()).rev() {
        let t = events.times[k];
        while next < order.len() && cohort.subjects[order[next]].censoring_time >= t {
            s0 += w[order[next]];
            next += 1;
        }
        if s0 <= 0.0 {
            return Err(GivehrError::EmptyRiskSet(t));
        }
        jumps[k] = events.counts[k] / s0;
    }
    Ok(StepFunction::from_increments(events.times, &jumps))
}

/// `ν̂_i = exp(γ̂ᵀX_i) Λ̂₀(C_i)` for every subject.
pub fn expected_counts(
    cohort: &Cohort,
    gamma: &DVector<f64>,
    baseline: &StepFunction,
) -> Result<Vec<f64>> {
    let x = visiting_design(cohort)?;
    Ok(cohort
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| x.row(i).transpose().dot(gamma).exp() * baseline.eval(s.censoring_time))
        .collect())
}

/// Moment estimator from visit counts and expected counts: `(σ²_η, σ², μ₀)`.
pub fn frailty_moments(m: &[usize], nu: &[f64]) -> Result<(f64, f64, f64)> {
    let denom: f64 = nu.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return Err(GivehrError::NoFollowUp);
    }
    let numer: f64 = m
        .iter()
        .zip(nu)
        .map(|(&mi, &v)| {
            let mi = mi as f64;
            mi * mi - mi - v * v
        })
        .sum();
    let sigma_eta_sq = (numer / denom).max(0.0);
    let sigma_sq = sigma_eta_sq.ln_1p();
    Ok((sigma_eta_sq, sigma_sq, -sigma_sq / 2.0))
}

pub fn frailty_variance(
    cohort: &Cohort,
    gamma: &DVector<f64>,
    baseline: &StepFunction,
) -> Result<(f64, f64, f64)> {
    let nu = expected_counts(cohort, gamma, baseline)?;
    let m: Vec<usize> = cohort.subjects.iter().map(|s| s.m()).collect();
    frailty_moments(&m, &nu)
}

/// Mode and curvature of `ℓ(u) = m(μ₀+σu) − ν e^{μ₀+σu} − u²/2`.
///
/// Newton's method safeguarded by a bracket; `ℓ'` is strictly decreasing so the bracket
/// always contains the unique root.
pub fn eb_posterior(m: usize, nu: f64, sigma: f64, mu0: f64) -> EbPosterior {
    if sigma == 0.0 || nu == 0.0 && m == 0 {
        return EbPosterior::PRIOR;
    }
    let m = m as f64;
    let grad = |u: f64| sigma * (m - nu * (mu0 + sigma * u).exp()) - u;
    let g0 = grad(0.0);
    let (mut lo, mut hi) = if g0 >= 0.0 {
        // On u ≥ 0 the root also satisfies ν e^{μ₀+σu} ≤ m.
        let cap = if m > 0.0 && nu > 0.0 {
            ((m / nu).ln() - mu0) / sigma
        } else {
            f64::INFINITY
        };
        (0.0, (sigma * m).min(cap.max(0.0)))
    } else {
        (-sigma * nu * mu0.exp(), 0.0)
    };
    let mut u = if g0 >= 0.0 { 0.5 * hi } else { 0.5 * lo };
    for _ in 0..200 {
        let e = nu * (mu0 + sigma * u).exp();
        let g = sigma * (m - e) - u;
        if g > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let h = -sigma * sigma * e - 1.0;
        let mut next = u - g / h;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        let done = (next - u).abs() < EB_TOL || hi - lo < EB_TOL;
        u = next;
        if done {
            break;
        }
    }
    let curvature = sigma * sigma * nu * (mu0 + sigma * u).exp();
    EbPosterior {
        mu_u: u,
        s_u_sq: 1.0 / (curvature + 1.0),
    }
}

/// Stage 1: rate model, Breslow baseline, frailty variance, and EB posteriors.
pub fn fit_stage1(cohort: &Cohort) -> Result<VisitingFit> {
    let inner = || -> Result<VisitingFit> {
        let rate = fit_rate_model(cohort)?;
        let baseline = breslow_baseline(cohort, &rate.gamma)?;
        let nu = expected_counts(cohort, &rate.gamma, &baseline)?;
        let m: Vec<usize> = cohort.subjects.iter().map(|s| s.m()).collect();
        let (sigma_eta_sq, sigma_sq, mu0) = frailty_moments(&m, &nu)?;
        let sigma = sigma_sq.sqrt();
        let subjects = cohort
            .subjects
            .iter()
            .zip(nu)
            .map(|(s, nu)| {
                let cum_baseline = baseline.eval(s.censoring_time);
                let eb = if cum_baseline > 0.0 {
                    eb_posterior(s.m(), nu, sigma, mu0)
                } else {
                    EbPosterior::PRIOR
                };
                SubjectVisiting {
                    id: s.id.clone(),
                    m: s.m(),
                    cum_baseline,
                    nu,
                    mu_u: eb.mu_u,
                    s_u_sq: eb.s_u_sq,
                }
            })
            .collect();
        Ok(VisitingFit {
            gamma: rate.gamma.iter().copied().collect(),
            baseline,
            sigma_eta_sq,
            sigma_sq,
            mu0,
            subjects,
            convergence: rate.convergence,
        })
    };
    inner().map_err(|e| e.at(Stage::Visiting))
}
