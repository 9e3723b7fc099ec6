//! Compensated outcome process at the true generator parameters.
//!
//! With every nuisance quantity known, `M_i(τ)` has mean zero. The posterior of
//! `U_i` given the visit count can be integrated exactly (numerically) or
//! replaced by its Laplace approximation, which isolates the approximation
//! error from the estimating equation itself.
//!
//! Assumes a constant baseline visit intensity, a linear outcome baseline
//! `β₀ + β_t t`, and covariates that are constant over follow-up.

use serde::{Deserialize, Serialize};

use crate::dataset::{change_points, covariate_at, Cohort, Role};
use crate::error::{GivehrError, Result};
use crate::numeric::norm_cdf;
use crate::observation::ObservationParams;
use crate::visiting::{eb_posterior, EbPosterior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosteriorMethod {
    Exact,
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub gamma: Vec<f64>,
    pub baseline_rate: f64,
    pub sigma: f64,
    pub observation: ObservationParams,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub beta0: f64,
    pub beta_t: f64,
}

/// `(E Φ((a + bU)/d), E[UΦ]/E[Φ])` under the exact posterior of `U` given `m` visits.
pub fn exact_weighting(
    m: usize,
    nu: f64,
    sigma: f64,
    mu0: f64,
    a: f64,
    b: f64,
    d: f64,
) -> (f64, f64) {
    let mode = eb_posterior(m, nu, sigma, mu0).mu_u;
    let mf = m as f64;
    let logpost = |u: f64| mf * (mu0 + sigma * u) - nu * (mu0 + sigma * u).exp() - 0.5 * u * u;
    let l0 = logpost(mode);
    const HALF: usize = 600;
    let h = 12.0 / HALF as f64;
    let (mut z, mut e_phi, mut e_uphi) = (0.0, 0.0, 0.0);
    for k in 0..=2 * HALF {
        let u = mode - 12.0 + k as f64 * h;
        let w = if k == 0 || k == 2 * HALF {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let dens = w * (logpost(u) - l0).exp();
        let phi = norm_cdf((a + b * u) / d);
        z += dens;
        e_phi += dens * phi;
        e_uphi += dens * u * phi;
    }
    (e_phi / z, e_uphi / e_phi)
}

/// `M_i(τ) = Σ_j R_ij (Y_ij − βᵀX^Y − θᵀZ^Y κ_i) − ω̄_i m_i (β₀ + β_t C_i / 2)`.
pub fn compensated_process(
    cohort: &Cohort,
    i: usize,
    truth: &OracleTruth,
    method: PosteriorMethod,
) -> Result<f64> {
    let s = &cohort.subjects[i];
    let roles = [
        Role::ObsFixed,
        Role::ObsRandom,
        Role::OutcomeFixed,
        Role::OutcomeRandom,
    ];
    if !change_points(s, &cohort.spec, &roles).is_empty() {
        return Err(GivehrError::InvalidInput(
            "oracle mode requires covariates constant over follow-up".into(),
        ));
    }
    if s.m() == 0 {
        return Ok(0.0);
    }
    let spec = &cohort.spec;
    let xv = covariate_at(s, spec, Role::Visiting, 0.0)?;
    let xo = covariate_at(s, spec, Role::ObsFixed, 0.0)?;
    let zo = covariate_at(s, spec, Role::ObsRandom, 0.0)?;
    let xy = covariate_at(s, spec, Role::OutcomeFixed, 0.0)?;
    let zy = covariate_at(s, spec, Role::OutcomeRandom, 0.0)?;
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let sigma = truth.sigma;
    let mu0 = -sigma * sigma / 2.0;
    let nu = dot(&truth.gamma, xv.as_slice()).exp() * truth.baseline_rate * s.censoring_time;
    let (omega, kappa) = match method {
        PosteriorMethod::Exact => {
            let obs = &truth.observation;
            let a = dot(&obs.alpha, xo.as_slice());
            let b = dot(&obs.delta, zo.as_slice());
            let quad: f64 = (0..zo.len())
                .flat_map(|r| (0..zo.len()).map(move |c| (r, c)))
                .map(|(r, c)| zo[r] * obs.sigma_q[r][c] * zo[c])
                .sum();
            exact_weighting(s.m(), nu, sigma, mu0, a, b, (1.0 + quad).sqrt())
        }
        PosteriorMethod::Laplace => {
            let eb: EbPosterior = eb_posterior(s.m(), nu, sigma, mu0);
            let k = truth.observation.kernel(xo.as_slice(), zo.as_slice(), eb);
            (k.mean_prob, k.ratio)
        }
    };
    let fixed = dot(&truth.beta, xy.as_slice()) + kappa * dot(&truth.theta, zy.as_slice());
    let observed: f64 = s.outcome.iter().flatten().map(|y| y - fixed).sum();
    let compensator = omega * s.m() as f64 * (truth.beta0 + truth.beta_t * s.censoring_time / 2.0);
    Ok(observed - compensator)
}
