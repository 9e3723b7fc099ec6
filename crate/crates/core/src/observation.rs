//! Stage 2: the observation process.
//!
//! Given a visit, the outcome is recorded with probability
//! `Φ(αᵀX^O + δᵀZ^O U + qᵀZ^O)`, `q ~ N(0, Σ_q)`. Integrating `U` over its
//! normal EB posterior and `q` over its prior gives closed forms through
//! probit–normal conjugacy; the same kernel yields the observation-weighted
//! posterior mean `κ` used by the outcome stage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{covariate_into, Cohort};
use crate::error::{GivehrError, Result, Stage};
use crate::numeric::{inverse_mills, norm_cdf, norm_log_cdf};
use crate::optim::{minimize, BfgsOptions};
use crate::visiting::{EbPosterior, VisitingFit};

/// Outputs of the probit–normal kernel for `X ~ N(mu_x, var_x)`:
/// `mean_prob = E Φ((a + bX)/d)` and `ratio = E[XΦ(·)]/E[Φ(·)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbitKernel {
    pub k: f64,
    pub mean_prob: f64,
    pub ratio: f64,
}

pub fn probit_kernel(a: f64, b: f64, d: f64, mu_x: f64, var_x: f64) -> ProbitKernel {
    debug_assert!(d > 0.0 && var_x >= 0.0);
    let denom = (b * b * var_x + d * d).sqrt();
    let k = (a + b * mu_x) / denom;
    ProbitKernel {
        k,
        mean_prob: norm_cdf(k),
        ratio: mu_x + b * var_x / denom * inverse_mills(k),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationParams {
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    /// Full symmetric matrix, row-major.
    pub sigma_q: Vec<Vec<f64>>,
}

impl ObservationParams {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            alpha: vec![0.0; p],
            delta: vec![0.0; q],
            sigma_q: vec![vec![0.0; q]; q],
        }
    }

    pub fn sigma_q_matrix(&self) -> DMatrix<f64> {
        let q = self.delta.len();
        DMatrix::from_fn(q, q, |i, j| self.sigma_q[i][j])
    }

    fn quad(&self, z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, zi) in z.iter().enumerate() {
            for (j, zj) in z.iter().enumerate() {
                acc += zi * self.sigma_q[i][j] * zj;
            }
        }
        acc
    }

    /// Kernel at one visit: `a = αᵀx`, `b = δᵀz`, `d² = 1 + zᵀΣ_q z`, posterior `(μ_U, s²_U)`.
    pub fn kernel(&self, x_o: &[f64], z_o: &[f64], eb: EbPosterior) -> ProbitKernel {
        let a: f64 = self.alpha.iter().zip(x_o).map(|(u, v)| u * v).sum();
        let b: f64 = self.delta.iter().zip(z_o).map(|(u, v)| u * v).sum();
        let d = (1.0 + self.quad(z_o)).sqrt();
        probit_kernel(a, b, d, eb.mu_u, eb.s_u_sq)
    }
}

/// Marginal observation probability `ω̄ = Φ(k)`.
pub fn marginal_obs_prob(
    x_o: &[f64],
    z_o: &[f64],
    eb: EbPosterior,
    params: &ObservationParams,
) -> f64 {
    params.kernel(x_o, z_o, eb).mean_prob
}

/// Observation-weighted posterior mean of `U`.
pub fn kappa(x_o: &[f64], z_o: &[f64], eb: EbPosterior, params: &ObservationParams) -> f64 {
    params.kernel(x_o, z_o, eb).ratio
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFit {
    pub params: ObservationParams,
    pub loglik: f64,
    pub iterations: usize,
    /// Gradient norm of the per-visit mean negative log-likelihood at the optimum.
    pub grad_norm: f64,
    /// Lower-triangular Cholesky factor of `Σ_q`, row-major.
    pub cholesky: Vec<Vec<f64>>,
    /// False when the frailty variance is zero, in which case `δ` is fixed at 0.
    pub delta_identified: bool,
}

/// Per-visit design of the observation model.
#[derive(Debug, Clone)]
pub struct ObservationData {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub s2: Vec<f64>,
    pub r: Vec<u8>,
}

impl ObservationData {
    pub fn build(cohort: &Cohort, eb: &[EbPosterior]) -> Result<Self> {
        let n_vis = cohort.total_visits();
        let (p, q) = (cohort.spec.obs_fixed.dim(), cohort.spec.obs_random.dim());
        let mut data = ObservationData {
            x: DMatrix::zeros(n_vis, p),
            z: DMatrix::zeros(n_vis, q),
            mu: Vec::with_capacity(n_vis),
            s2: Vec::with_capacity(n_vis),
            r: Vec::with_capacity(n_vis),
        };
        let (mut bx, mut bz) = (Vec::new(), Vec::new());
        let mut row = 0;
        for (s, e) in cohort.subjects.iter().zip(eb) {
            for (j, &t) in s.visits.iter().enumerate() {
                covariate_into(s, &cohort.spec.obs_fixed, t, &mut bx)?;
                covariate_into(s, &cohort.spec.obs_random, t, &mut bz)?;
                data.x.row_mut(row).copy_from_slice(&bx);
                data.z.row_mut(row).copy_from_slice(&bz);
                data.mu.push(e.mu_u);
                data.s2.push(e.s_u_sq);
                data.r.push(s.obs_indicator[j]);
                row += 1;
            }
        }
        Ok(data)
    }

    fn len(&self) -> usize {
        self.r.len()
    }
}

/// Sum over visits of `R log ω̄ + (1 − R) log(1 − ω̄)`.
pub fn composite_loglik(
    cohort: &Cohort,
    eb: &[EbPosterior],
    params: &ObservationParams,
) -> Result<f64> {
    let data = ObservationData::build(cohort, eb)?;
    Ok(loglik_of(&data, params))
}

fn loglik_of(data: &ObservationData, params: &ObservationParams) -> f64 {
    let a = &data.x * DVector::from_column_slice(&params.alpha);
    let b = &data.z * DVector::from_column_slice(&params.delta);
    let zs = &data.z * params.sigma_q_matrix();
    let mut total = 0.0;
    for i in 0..data.len() {
        let d = (1.0 + zs.row(i).dot(&data.z.row(i))).sqrt();
        let k = probit_kernel(a[i], b[i], d, data.mu[i], data.s2[i]).k;
        total += if data.r[i] == 1 {
            norm_log_cdf(k)
        } else {
            norm_log_cdf(-k)
        };
    }
    total
}

/// Unconstrained parameterization `(α, δ?, vech(L))` with log-diagonal `L`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    p: usize,
    q: usize,
    fit_delta: bool,
}

impl Layout {
    fn n_delta(&self) -> usize {
        if self.fit_delta {
            self.q
        } else {
            0
        }
    }

    fn len(&self) -> usize {
        self.p + self.n_delta() + self.q * (self.q + 1) / 2
    }

    fn chol_offset(&self) -> usize {
        self.p + self.n_delta()
    }

    fn unpack(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let alpha = theta.rows(0, self.p).into_owned();
        let delta = if self.fit_delta {
            theta.rows(self.p, self.q).into_owned()
        } else {
            DVector::zeros(self.q)
        };
        let mut l = DMatrix::zeros(self.q, self.q);
        let mut pos = self.chol_offset();
        for j in 0..self.q {
            for k in 0..=j {
                l[(j, k)] = if j == k { theta[pos].exp() } else { theta[pos] };
                pos += 1;
            }
        }
        (alpha, delta, l)
    }

    fn pack(&self, alpha: &DVector<f64>, delta: &DVector<f64>, l: &DMatrix<f64>) -> DVector<f64> {
        let mut theta = DVector::zeros(self.len());
        theta.rows_mut(0, self.p).copy_from(alpha);
        if self.fit_delta {
            theta.rows_mut(self.p, self.q).copy_from(delta);
        }
        let mut pos = self.chol_offset();
        for j in 0..self.q {
            for k in 0..=j {
                theta[pos] = if j == k { l[(j, k)].ln() } else { l[(j, k)] };
                pos += 1;
            }
        }
        theta
    }
}

/// Mean negative composite log-likelihood and its analytic gradient.
fn objective(data: &ObservationData, layout: Layout, theta: &DVector<f64>) -> (f64, DVector<f64>) {
    let (alpha, delta, l) = layout.unpack(theta);
    let n = data.len();
    let (p, q) = (layout.p, layout.q);
    let mut f = 0.0;
    let mut g = DVector::zeros(layout.len());
    let a_all = &data.x * &alpha;
    let b_all = &data.z * &delta;
    let w_all = &data.z * &l;
    for i in 0..n {
        let (a, b) = (a_all[i], b_all[i]);
        let (mu, s2) = (data.mu[i], data.s2[i]);
        let w = w_all.row(i);
        let d2 = 1.0 + w.norm_squared();
        let big_d2 = d2 + b * b * s2;
        let big_d = big_d2.sqrt();
        let num = a + b * mu;
        let k = num / big_d;
        let (ll, dk) = if data.r[i] == 1 {
            (norm_log_cdf(k), inverse_mills(k))
        } else {
            (norm_log_cdf(-k), -inverse_mills(-k))
        };
        f -= ll;
        let dk_da = 1.0 / big_d;
        for j in 0..p {
            g[j] -= dk * dk_da * data.x[(i, j)];
        }
        if q > 0 {
            let big_d3 = big_d2 * big_d;
            if layout.fit_delta {
                let dk_db = mu / big_d - num * b * s2 / big_d3;
                for j in 0..q {
                    g[p + j] -= dk * dk_db * data.z[(i, j)];
                }
            }
            let dk_dd2 = -num / (2.0 * big_d3);
            let mut pos = layout.chol_offset();
            for j in 0..q {
                for kk in 0..=j {
                    let mut d = 2.0 * data.z[(i, j)] * w[kk];
                    if j == kk {
                        d *= l[(j, kk)];
                    }
                    g[pos] -= dk * dk_dd2 * d;
                    pos += 1;
                }
            }
        }
    }
    let scale = 1.0 / n.max(1) as f64;
    (f * scale, g * scale)
}

fn params_from(layout: Layout, theta: &DVector<f64>) -> (ObservationParams, DMatrix<f64>) {
    let (alpha, delta, l) = layout.unpack(theta);
    let sigma = &l * l.transpose();
    let q = layout.q;
    let params = ObservationParams {
        alpha: alpha.iter().copied().collect(),
        delta: delta.iter().copied().collect(),
        sigma_q: (0..q)
            .map(|i| (0..q).map(|j| sigma[(i, j)]).collect())
            .collect(),
    };
    (params, l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for ObservationOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 1000,
        }
    }
}

fn check_separation(data: &ObservationData) -> Result<()> {
    if data.len() == 0 {
        return Err(GivehrError::NoVisits);
    }
    let first = data.r[0];
    if data.r.iter().all(|&r| r == first) {
        return Err(GivehrError::Separation(first));
    }
    Ok(())
}

/// Maximize the composite likelihood over `(α, δ, L)`.
///
/// `delta_identified = false` fixes `δ = 0`: with a degenerate frailty every posterior
/// mean is zero and `δ` enters only through its square, confounded with `Σ_q`.
pub fn fit_observation_data(
    data: &ObservationData,
    init: Option<&ObservationParams>,
    delta_identified: bool,
    opts: ObservationOptions,
) -> Result<ObservationFit> {
    check_separation(data)?;
    let (p, q) = (data.x.ncols(), data.z.ncols());
    let bfgs = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
    };
    let layout = Layout {
        p,
        q,
        fit_delta: delta_identified,
    };
    let theta0 = match init {
        Some(init) => {
            let sig = init.sigma_q_matrix() + DMatrix::identity(q, q) * 1e-8;
            let l = sig
                .cholesky()
                .map(|c| c.l())
                .unwrap_or_else(|| DMatrix::identity(q, q) * 0.1);
            layout.pack(
                &DVector::from_vec(init.alpha.clone()),
                &DVector::from_vec(init.delta.clone()),
                &l,
            )
        }
        None => {
            let plain = Layout {
                p,
                q: 0,
                fit_delta: false,
            };
            let plain_data = ObservationData {
                z: DMatrix::zeros(data.len(), 0),
                ..data.clone()
            };
            let res = minimize(
                |t| objective(&plain_data, plain, t),
                DVector::zeros(p),
                bfgs,
            );
            layout.pack(&res.x, &DVector::zeros(q), &(DMatrix::identity(q, q) * 0.1))
        }
    };
    let res = minimize(|t| objective(data, layout, t), theta0, bfgs);
    if !res.converged || !res.f.is_finite() {
        return Err(GivehrError::NonConvergence {
            what: "composite likelihood quasi-Newton".into(),
            iterations: res.iterations,
            grad_norm: res.grad_norm,
        });
    }
    let (params, l) = params_from(layout, &res.x);
    Ok(ObservationFit {
        loglik: loglik_of(data, &params),
        params,
        iterations: res.iterations,
        grad_norm: res.grad_norm,
        cholesky: (0..q)
            .map(|i| (0..q).map(|j| l[(i, j)]).collect())
            .collect(),
        delta_identified,
    })
}

/// Stage 2 on a cohort, taking the EB posteriors from stage 1 as known.
pub fn fit_observation(
    cohort: &Cohort,
    visiting: &VisitingFit,
    init: Option<&ObservationParams>,
) -> Result<ObservationFit> {
    let inner = || -> Result<ObservationFit> {
        let eb: Vec<EbPosterior> = visiting.subjects.iter().map(|s| s.eb()).collect();
        let data = ObservationData::build(cohort, &eb)?;
        fit_observation_data(
            &data,
            init,
            visiting.sigma_sq > 0.0,
            ObservationOptions::default(),
        )
    };
    inner().map_err(|e| e.at(Stage::Observation))
}

/// Gradient of the mean negative composite log-likelihood in the unconstrained parameters
/// (exposed to check the analytic gradient against finite differences).
pub fn objective_and_gradient(
    data: &ObservationData,
    theta: &DVector<f64>,
    fit_delta: bool,
) -> (f64, DVector<f64>) {
    let layout = Layout {
        p: data.x.ncols(),
        q: data.z.ncols(),
        fit_delta,
    };
    objective(data, layout, theta)
}
