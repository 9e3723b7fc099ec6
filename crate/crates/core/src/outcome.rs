//! Stage 3: the outcome model and the full three-stage fit.
//!
//! Each subject's follow-up is cut into segments on which its covariates, and
//! therefore its weight `p_i(t) = ω̄_i(t) m_i / Λ̂₀(C_i)` and design
//! `V_i(t) = (X^Y(t), Z^Y(t) κ_i(t))`, are constant. Risk-set averages at the
//! pooled visit times are accumulated segment by segment.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{change_points, covariate_into, validate, Cohort, Role};
use crate::error::{GivehrError, Result, Stage};
use crate::numeric::solve_checked;
use crate::observation::{
    fit_observation_data, ObservationData, ObservationFit, ObservationOptions, ObservationParams,
};
use crate::step::StepFunction;
use crate::visiting::{fit_stage1, VisitingFit};

pub mod oracle;

const THETA_DEGENERATE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub beta: Vec<f64>,
    /// Entries that are not identified are reported as 0.
    pub theta: Vec<f64>,
    pub theta_identified: Vec<bool>,
}

impl OutcomeParams {
    /// `(β, θ)` restricted to identified entries, in design-column order.
    pub fn kept_vector(&self) -> DVector<f64> {
        let kept_theta = self
            .theta
            .iter()
            .zip(&self.theta_identified)
            .filter(|(_, &k)| k)
            .map(|(t, _)| *t);
        DVector::from_iterator(
            self.beta.len() + self.theta_identified.iter().filter(|&&k| k).count(),
            self.beta.iter().copied().chain(kept_theta),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitPoint {
    pub subject: usize,
    pub time: f64,
    /// Index of `time` in the pooled visit-time grid.
    pub time_index: usize,
    pub weight: f64,
    /// Full design `(X^Y, B)`, including any dropped θ columns.
    pub design: Vec<f64>,
    pub observed: bool,
    pub outcome: Option<f64>,
}

#[derive(Debug, Clone)]
struct Segment {
    lo: usize,
    hi: usize,
    weight: f64,
    design: Vec<f64>,
}

/// Everything stage 3 needs: pooled times, visit points and per-subject segments.
#[derive(Debug, Clone)]
pub struct Stage3Design {
    pub times: Vec<f64>,
    pub points: Vec<VisitPoint>,
    segments: Vec<Vec<Segment>>,
    pub included: Vec<bool>,
    pub dim_beta: usize,
    pub dim_theta: usize,
    /// Design columns used in the solve (θ columns that are identically zero are dropped).
    pub kept: Vec<usize>,
    pub names: Vec<String>,
}

impl Stage3Design {
    pub fn n_included(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    fn kept_design(&self, full: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.kept.len(), self.kept.iter().map(|&c| full[c]))
    }

    pub fn theta_identified(&self) -> Vec<bool> {
        (0..self.dim_theta)
            .map(|k| self.kept.contains(&(self.dim_beta + k)))
            .collect()
    }
}

/// Weight and design at one time for a subject, from plug-in stage 1–2 fits.
struct PointEvaluator<'a> {
    cohort: &'a Cohort,
    obs: &'a ObservationParams,
    bufs: [Vec<f64>; 4],
}

impl<'a> PointEvaluator<'a> {
    fn new(cohort: &'a Cohort, obs: &'a ObservationParams) -> Self {
        Self {
            cohort,
            obs,
            bufs: Default::default(),
        }
    }

    fn eval(
        &mut self,
        i: usize,
        t: f64,
        visiting: &VisitingFit,
        factor: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let s = &self.cohort.subjects[i];
        let spec = &self.cohort.spec;
        let [xo, zo, xy, zy] = &mut self.bufs;
        covariate_into(s, &spec.obs_fixed, t, xo)?;
        covariate_into(s, &spec.obs_random, t, zo)?;
        covariate_into(s, &spec.outcome_fixed, t, xy)?;
        covariate_into(s, &spec.outcome_random, t, zy)?;
        let kern = self.obs.kernel(xo, zo, visiting.subjects[i].eb());
        let mut design = Vec::with_capacity(xy.len() + zy.len());
        design.extend_from_slice(xy);
        design.extend(zy.iter().map(|z| z * kern.ratio));
        Ok((kern.mean_prob * factor, design))
    }
}

pub fn coefficient_names(cohort: &Cohort) -> Vec<String> {
    let mut names = cohort.spec.outcome_fixed.names();
    names.extend(
        cohort
            .spec
            .outcome_random
            .names()
            .into_iter()
            .map(|n| format!("theta:{n}")),
    );
    names
}

/// Visit points, segments and pooled time grid for stage 3.
pub fn build_design(
    cohort: &Cohort,
    visiting: &VisitingFit,
    observation: &ObservationFit,
) -> Result<Stage3Design> {
    let mut times: Vec<f64> = cohort
        .subjects
        .iter()
        .flat_map(|s| s.visits.iter().copied())
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let dim_beta = cohort.spec.outcome_fixed.dim();
    let dim_theta = cohort.spec.outcome_random.dim();
    let mut eval = PointEvaluator::new(cohort, &observation.params);
    let roles = [
        Role::ObsFixed,
        Role::ObsRandom,
        Role::OutcomeFixed,
        Role::OutcomeRandom,
    ];
    let mut points = Vec::with_capacity(cohort.total_visits());
    let mut segments = Vec::with_capacity(cohort.n());
    let mut included = Vec::with_capacity(cohort.n());
    let mut excluded = 0usize;
    for (i, s) in cohort.subjects.iter().enumerate() {
        let sv = &visiting.subjects[i];
        if sv.cum_baseline <= 0.0 {
            excluded += 1;
            included.push(false);
            segments.push(Vec::new());
            continue;
        }
        included.push(true);
        let factor = s.m() as f64 / sv.cum_baseline;
        let end = times.partition_point(|&t| t <= s.censoring_time);
        let mut bounds: Vec<usize> = change_points(s, &cohort.spec, &roles)
            .into_iter()
            .map(|c| times.partition_point(|&t| t < c).min(end))
            .collect();
        bounds.push(end);
        let mut segs = Vec::with_capacity(bounds.len());
        let mut lo = 0;
        for hi in bounds {
            if hi > lo {
                let (weight, design) = eval.eval(i, times[lo], visiting, factor)?;
                segs.push(Segment {
                    lo,
                    hi,
                    weight,
                    design,
                });
                lo = hi;
            }
        }
        segments.push(segs);
        for (j, &t) in s.visits.iter().enumerate() {
            let (weight, design) = eval.eval(i, t, visiting, factor)?;
            points.push(VisitPoint {
                subject: i,
                time: t,
                time_index: times.partition_point(|&u| u < t),
                weight,
                design,
                observed: s.obs_indicator[j] == 1,
                outcome: s.outcome[j],
            });
        }
    }
    if excluded > 0 {
        warn!("{excluded} subject(s) censored before the first pooled visit excluded from stage 3");
    }
    let mut kept: Vec<usize> = (0..dim_beta).collect();
    for k in 0..dim_theta {
        let c = dim_beta + k;
        let nonzero = segments
            .iter()
            .flatten()
            .any(|seg| seg.design[c].abs() > THETA_DEGENERATE);
        if nonzero {
            kept.push(c);
        } else {
            warn!("compensation column {k} is identically zero; theta[{k}] not identified");
        }
    }
    Ok(Stage3Design {
        times,
        points,
        segments,
        included,
        dim_beta,
        dim_theta,
        kept,
        names: coefficient_names(cohort),
    })
}

/// Weighted risk-set averages of the kept design columns at every pooled time.
#[derive(Debug, Clone)]
pub struct RiskSetCenters {
    pub sum_weight: Vec<f64>,
    /// `T × dim(kept)` matrix of `V̄(t)`.
    pub vbar: DMatrix<f64>,
}

pub fn risk_set_centers(design: &Stage3Design) -> Result<RiskSetCenters> {
    let nt = design.times.len();
    let dk = design.kept.len();
    let mut sum_w = vec![0.0; nt];
    let mut sum_wv = DMatrix::zeros(nt, dk);
    for seg in design.segments.iter().flatten() {
        let v = design.kept_design(&seg.design) * seg.weight;
        for idx in seg.lo..seg.hi {
            sum_w[idx] += seg.weight;
            for c in 0..dk {
                sum_wv[(idx, c)] += v[c];
            }
        }
    }
    for idx in 0..nt {
        if sum_w[idx] <= 0.0 {
            return Err(GivehrError::EmptyRiskSet(design.times[idx]));
        }
        let inv = 1.0 / sum_w[idx];
        sum_wv.row_mut(idx).scale_mut(inv);
    }
    Ok(RiskSetCenters {
        sum_weight: sum_w,
        vbar: sum_wv,
    })
}

/// Largest absolute entry of `Σ_i p_i(t)(V_i(t) − V̄(t))` over all pooled times.
pub fn centering_residual(design: &Stage3Design, centers: &RiskSetCenters) -> f64 {
    let nt = design.times.len();
    let dk = design.kept.len();
    let mut acc = DMatrix::zeros(nt, dk);
    for seg in design.segments.iter().flatten() {
        let v = design.kept_design(&seg.design);
        for idx in seg.lo..seg.hi {
            for c in 0..dk {
                acc[(idx, c)] += seg.weight * (v[c] - centers.vbar[(idx, c)]);
            }
        }
    }
    acc.amax()
}

struct Normal {
    s: DMatrix<f64>,
    t: DVector<f64>,
}

fn normal_system(design: &Stage3Design, centers: &RiskSetCenters) -> Normal {
    let dk = design.kept.len();
    let mut s = DMatrix::zeros(dk, dk);
    let mut t = DVector::zeros(dk);
    for pt in design.points.iter().filter(|p| p.observed) {
        let v = design.kept_design(&pt.design);
        let h = &v - centers.vbar.row(pt.time_index).transpose();
        s.ger(1.0, &h, &v, 1.0);
        t.axpy(pt.outcome.unwrap_or(0.0), &h, 1.0);
    }
    Normal { s, t }
}

/// Estimating-equation value `Σ H_i(t)(Y − ψᵀV) R dN` at `psi` (kept columns).
pub fn estimating_equation(
    design: &Stage3Design,
    centers: &RiskSetCenters,
    psi: &DVector<f64>,
) -> DVector<f64> {
    let mut u = DVector::zeros(design.kept.len());
    for pt in design.points.iter().filter(|p| p.observed) {
        let v = design.kept_design(&pt.design);
        let h = &v - centers.vbar.row(pt.time_index).transpose();
        u.axpy(pt.outcome.unwrap_or(0.0) - psi.dot(&v), &h, 1.0);
    }
    u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub condition_number: f64,
    pub equation_residual: f64,
}

/// Solve the risk-set-centered estimating equation (closed form, rank-revealing).
pub fn solve_wls(
    design: &Stage3Design,
    centers: &RiskSetCenters,
    max_condition: f64,
) -> Result<(OutcomeParams, SolveDiagnostics)> {
    let sys = normal_system(design, centers);
    let what = "outcome estimating-equation matrix";
    let (mut psi, condition) = solve_checked(&sys.s, &sys.t, what, max_condition)?;
    let mut u = estimating_equation(design, centers, &psi);
    for _ in 0..2 {
        let (step, _) = solve_checked(&sys.s, &u, what, max_condition)?;
        let candidate = &psi + step;
        let cu = estimating_equation(design, centers, &candidate);
        if cu.amax() >= u.amax() {
            break;
        }
        psi = candidate;
        u = cu;
    }
    let residual = u.amax();
    let mut beta = vec![0.0; design.dim_beta];
    let mut theta = vec![0.0; design.dim_theta];
    for (k, &c) in design.kept.iter().enumerate() {
        if c < design.dim_beta {
            beta[c] = psi[k];
        } else {
            theta[c - design.dim_beta] = psi[k];
        }
    }
    Ok((
        OutcomeParams {
            beta,
            theta,
            theta_identified: design.theta_identified(),
        },
        SolveDiagnostics {
            condition_number: condition,
            equation_residual: residual,
        },
    ))
}

/// Breslow-type increments `dÂ(t) = Σ (Y − ψᵀV) R dN / Σ p_i(t)` at the pooled times.
pub fn baseline_increments(
    design: &Stage3Design,
    centers: &RiskSetCenters,
    params: &OutcomeParams,
) -> StepFunction {
    let psi = params.kept_vector();
    let mut inc = vec![0.0; design.times.len()];
    for pt in design.points.iter().filter(|p| p.observed) {
        let v = design.kept_design(&pt.design);
        inc[pt.time_index] += pt.outcome.unwrap_or(0.0) - psi.dot(&v);
    }
    for (d, w) in inc.iter_mut().zip(&centers.sum_weight) {
        *d /= w;
    }
    StepFunction::from_increments(design.times.clone(), &inc)
}

/// Per-subject estimating-equation terms `Σ_j H_i(t_ij) (Y_ij − ψᵀV_ij) R_ij` (kept columns).
pub fn equation_contributions(
    design: &Stage3Design,
    centers: &RiskSetCenters,
    params: &OutcomeParams,
) -> Vec<DVector<f64>> {
    let psi = params.kept_vector();
    let mut phi = vec![DVector::zeros(design.kept.len()); design.segments.len()];
    for pt in design.points.iter().filter(|p| p.observed) {
        let v = design.kept_design(&pt.design);
        let h = &v - centers.vbar.row(pt.time_index).transpose();
        phi[pt.subject].axpy(pt.outcome.unwrap_or(0.0) - psi.dot(&v), &h, 1.0);
    }
    phi
}

/// Per-subject martingale-residual contributions `∫ H_i dM̂_i` (kept columns).
///
/// The first part is the subject's estimating-equation term; the second subtracts the
/// compensator `∫ H_i(t) p_i(t) dÂ(t)`. The contributions sum to the estimating equation.
pub fn subject_contributions(
    design: &Stage3Design,
    centers: &RiskSetCenters,
    params: &OutcomeParams,
    increments: &StepFunction,
) -> Vec<DVector<f64>> {
    let dk = design.kept.len();
    let psi = params.kept_vector();
    let da = increments.increments();
    let nt = design.times.len();
    let mut cum_da = vec![0.0; nt + 1];
    let mut cum_vda = DMatrix::<f64>::zeros(nt + 1, dk);
    for idx in 0..nt {
        cum_da[idx + 1] = cum_da[idx] + da[idx];
        for c in 0..dk {
            cum_vda[(idx + 1, c)] = cum_vda[(idx, c)] + centers.vbar[(idx, c)] * da[idx];
        }
    }
    let mut phi = vec![DVector::zeros(dk); design.segments.len()];
    for pt in design.points.iter().filter(|p| p.observed) {
        let v = design.kept_design(&pt.design);
        let h = &v - centers.vbar.row(pt.time_index).transpose();
        phi[pt.subject].axpy(pt.outcome.unwrap_or(0.0) - psi.dot(&v), &h, 1.0);
    }
    for (i, segs) in design.segments.iter().enumerate() {
        for seg in segs {
            let v = design.kept_design(&seg.design);
            let mass = cum_da[seg.hi] - cum_da[seg.lo];
            for c in 0..dk {
                let vbar_mass = cum_vda[(seg.hi, c)] - cum_vda[(seg.lo, c)];
                phi[i][c] -= seg.weight * (v[c] * mass - vbar_mass);
            }
        }
    }
    phi
}

/// `S = Σ_{observed} H Vᵀ` on the kept columns (the unscaled sandwich bread).
pub fn bread(design: &Stage3Design, centers: &RiskSetCenters) -> DMatrix<f64> {
    normal_system(design, centers).s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GivehrConfig {
    pub max_condition: f64,
    pub observation: ObservationOptions,
}

impl Default for GivehrConfig {
    fn default() -> Self {
        Self {
            max_condition: 1e12,
            observation: ObservationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub condition_number: f64,
    pub equation_residual: f64,
    pub centering_residual: f64,
    pub n_included: usize,
    pub n_excluded: usize,
    pub dropped_theta: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GivehrFit {
    pub visiting: VisitingFit,
    pub observation: ObservationFit,
    pub outcome: OutcomeParams,
    pub names: Vec<String>,
    pub baseline_increments: StepFunction,
    pub diagnostics: FitDiagnostics,
}

impl GivehrFit {
    /// `(β̂, θ̂)` in coefficient-name order.
    pub fn coefficients(&self) -> Vec<f64> {
        self.outcome
            .beta
            .iter()
            .chain(&self.outcome.theta)
            .copied()
            .collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.coefficients()[k])
    }
}

/// Stage 3 given the upstream fits.
pub fn fit_stage3(
    cohort: &Cohort,
    visiting: VisitingFit,
    observation: ObservationFit,
    config: &GivehrConfig,
) -> Result<GivehrFit> {
    let inner = || -> Result<(OutcomeParams, StepFunction, FitDiagnostics, Vec<String>)> {
        let design = build_design(cohort, &visiting, &observation)?;
        let centers = risk_set_centers(&design)?;
        let (params, solve) = solve_wls(&design, &centers, config.max_condition)?;
        let increments = baseline_increments(&design, &centers, &params);
        let dropped = (0..design.dim_theta)
            .filter(|&k| !params.theta_identified[k])
            .map(|k| design.names[design.dim_beta + k].clone())
            .collect();
        let diagnostics = FitDiagnostics {
            condition_number: solve.condition_number,
            equation_residual: solve.equation_residual,
            centering_residual: centering_residual(&design, &centers),
            n_included: design.n_included(),
            n_excluded: cohort.n() - design.n_included(),
            dropped_theta: dropped,
        };
        Ok((params, increments, diagnostics, design.names))
    };
    let (outcome, baseline_increments, diagnostics, names) =
        inner().map_err(|e| e.at(Stage::Outcome))?;
    Ok(GivehrFit {
        visiting,
        observation,
        outcome,
        names,
        baseline_increments,
        diagnostics,
    })
}

/// The three-stage estimator.
pub fn fit_givehr(cohort: &Cohort, config: &GivehrConfig) -> Result<GivehrFit> {
    let report = validate(cohort);
    if let Some(v) = report.violations.first() {
        return Err(GivehrError::InvalidInput(format!(
            "cohort fails validation ({} violation(s)); first: subject `{}`: {}",
            report.violations.len(),
            v.subject,
            v.message
        )));
    }
    if cohort.spec.outcome_fixed.dim() == 0 {
        return Err(GivehrError::Config(
            "outcome_fixed role has no columns".into(),
        ));
    }
    let visiting = fit_stage1(cohort)?;
    let eb: Vec<_> = visiting.subjects.iter().map(|s| s.eb()).collect();
    let observation = {
        let data = ObservationData::build(cohort, &eb).map_err(|e| e.at(Stage::Observation))?;
        fit_observation_data(&data, None, visiting.sigma_sq > 0.0, config.observation)
            .map_err(|e| e.at(Stage::Observation))?
    };
    fit_stage3(cohort, visiting, observation, config)
}
