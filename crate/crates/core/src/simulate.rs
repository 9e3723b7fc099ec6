//! Cohort generators for the simulation settings A.1–A.4, B.1–B.6 and C.1–C.6.
//!
//! Outcome: `Y = β₀ + β_t t + β_F F + β_X X + b₀ + b₁F + ε` with
//! `b ~ N(μ_b, diag(1, 2))`. In A.4 and all B/C settings the random-effect mean
//! is loaded on the latent variable, `μ_b = (0.5, 0.2)ᵀ·latent`.
//!
//! Every subject draws from independent ChaCha streams keyed by
//! `(seed, subject, purpose)`, so changing one mechanism (say, the latent slope
//! `a`) leaves the other draws untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Cohort, CovariateSeries, CovariateSpec, RoleSpec, SubjectData};
use crate::error::{GivehrError, Result};
use crate::numeric::norm_cdf;
use crate::observation::ObservationParams;
use crate::outcome::oracle::OracleTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    A1,
    A2,
    A3,
    A4,
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
}

impl Scenario {
    pub const ALL: [Scenario; 16] = [
        Scenario::A1,
        Scenario::A2,
        Scenario::A3,
        Scenario::A4,
        Scenario::B1,
        Scenario::B2,
        Scenario::B3,
        Scenario::B4,
        Scenario::B5,
        Scenario::B6,
        Scenario::C1,
        Scenario::C2,
        Scenario::C3,
        Scenario::C4,
        Scenario::C5,
        Scenario::C6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::A1 => "A1",
            Scenario::A2 => "A2",
            Scenario::A3 => "A3",
            Scenario::A4 => "A4",
            Scenario::B1 => "B1",
            Scenario::B2 => "B2",
            Scenario::B3 => "B3",
            Scenario::B4 => "B4",
            Scenario::B5 => "B5",
            Scenario::B6 => "B6",
            Scenario::C1 => "C1",
            Scenario::C2 => "C2",
            Scenario::C3 => "C3",
            Scenario::C4 => "C4",
            Scenario::C5 => "C5",
            Scenario::C6 => "C6",
        }
    }

    /// Settings whose random-effect mean loads on a latent variable.
    pub fn has_latent(self) -> bool {
        !matches!(self, Scenario::A1 | Scenario::A2 | Scenario::A3)
    }

    fn visiting(self) -> Visiting {
        use Scenario::*;
        match self {
            A1 => Visiting::Regular,
            A2 => Visiting::MeasuredA,
            A3 => Visiting::GammaA3,
            A4 => Visiting::LognormalA4,
            B1 | C1 => Visiting::LatentOnly,
            B2 | C2 => Visiting::MeasuredLatent,
            B3 | C3 => Visiting::GammaFrailty,
            B4 | C4 => Visiting::PreviousOutcome,
            B5 | C5 => Visiting::Threshold,
            B6 | C6 => Visiting::Mixture,
        }
    }

    fn observation(self) -> Observation {
        use Scenario::*;
        match self {
            A1 => Observation::Constant,
            A2 | A3 => Observation::LogitA,
            A4 => Observation::ProbitA4,
            B1 | B2 | B3 | B4 | B5 | B6 => Observation::ProbitB,
            _ => Observation::LogitC,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = GivehrError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '.')
            .collect::<String>()
            .to_ascii_uppercase();
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == norm)
            .ok_or_else(|| GivehrError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Visiting {
    Regular,
    MeasuredA,
    GammaA3,
    LognormalA4,
    LatentOnly,
    MeasuredLatent,
    GammaFrailty,
    PreviousOutcome,
    Threshold,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Observation {
    Constant,
    LogitA,
    ProbitA4,
    ProbitB,
    LogitC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub tau: f64,
    pub beta0: f64,
    pub beta_t: f64,
    pub beta_f: f64,
    pub beta_x: f64,
    /// Loading of the random-effect mean on the latent variable.
    pub theta0: [f64; 2],
    /// Diagonal of `Σ_b`.
    pub sigma_b: [f64; 2],
    pub sigma_eps: f64,
    /// Latent dependence on `X`: `latent = a·X + residual`.
    pub latent_slope: f64,
    /// Spacing of the regular visits in A.1.
    pub regular_interval: f64,
    /// If set, `C_i ~ Uniform(censor_min, τ)`; otherwise `C_i = τ`.
    pub censor_min: Option<f64>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, n: usize, seed: u64) -> Self {
        Self {
            scenario,
            n,
            tau: 60.0,
            beta0: -2.0,
            beta_t: 0.1,
            beta_f: -0.5,
            beta_x: 0.5,
            theta0: [0.5, 0.2],
            sigma_b: [1.0, 2.0],
            sigma_eps: 1.0,
            latent_slope: 0.0,
            regular_interval: 5.0,
            censor_min: None,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 || !(self.tau > 0.0) || self.sigma_b.iter().any(|&v| v < 0.0) {
            return Err(GivehrError::InvalidInput(
                "scenario requires n ≥ 1, tau > 0 and a PSD Σ_b".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    /// `U_i` (A.4) or `E_i` (B/C); zero where the setting has no latent variable.
    pub latent: f64,
    /// `latent − a·X_i`.
    pub latent_residual: f64,
    pub eta: f64,
    pub b: [f64; 2],
    /// Component used by the mixture settings.
    pub component: Option<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub spec: ScenarioSpec,
    pub subjects: Vec<SubjectTruth>,
    /// `β` in the order of the simulated outcome-fixed role `(F, X)`.
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
}

impl SimTruth {
    /// True stage-1/2/3 parameters for oracle evaluation (A.4 without latent slope only).
    pub fn oracle_truth(&self) -> Option<OracleTruth> {
        let s = &self.spec;
        if s.scenario != Scenario::A4 || s.latent_slope != 0.0 || s.censor_min.is_some() {
            return None;
        }
        Some(OracleTruth {
            gamma: vec![1.0, 1.0],
            baseline_rate: (-3.5f64).exp(),
            sigma: 1.0,
            observation: ObservationParams {
                alpha: vec![2.0, 1.0, -1.0],
                delta: vec![-0.2, -0.6],
                sigma_q: vec![vec![0.0; 2]; 2],
            },
            beta: vec![s.beta_f, s.beta_x],
            theta: s.theta0.to_vec(),
            beta0: s.beta0,
            beta_t: s.beta_t,
        })
    }
}

/// Role assignment used for simulated cohorts.
///
/// `X^Y` carries no intercept: a constant is absorbed by the nonparametric baseline.
pub fn simulation_spec() -> CovariateSpec {
    CovariateSpec {
        visiting: RoleSpec::new(&["F", "X"], false),
        obs_fixed: RoleSpec::new(&["F", "X"], true),
        obs_random: RoleSpec::new(&["F"], true),
        outcome_fixed: RoleSpec::new(&["F", "X"], false),
        outcome_random: RoleSpec::new(&["F"], true),
    }
}

/// Role assignment with the `F·X` product added to the observation and outcome designs,
/// which absorbs the latent-slope interaction exactly.
pub fn interaction_spec() -> CovariateSpec {
    CovariateSpec {
        visiting: RoleSpec::new(&["F", "X"], false),
        obs_fixed: RoleSpec::new(&["F", "X", "FX"], true),
        obs_random: RoleSpec::new(&["F"], true),
        outcome_fixed: RoleSpec::new(&["F", "X", "FX"], false),
        outcome_random: RoleSpec::new(&["F"], true),
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `r` derived from a study seed.
pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    splitmix64(seed ^ splitmix64(r.wrapping_add(1)))
}

/// Independent generator for `(seed, index, purpose)`.
pub fn stream(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(16).wrapping_add(purpose));
    rng
}

mod purpose {
    pub const COVARIATES: u64 = 0;
    pub const EFFECTS: u64 = 1;
    pub const VISITS: u64 = 2;
    pub const OBSERVATION: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const MIXTURE: u64 = 5;
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Arrival times of a Poisson process on `(0, end]` by Ogata thinning against a constant
/// majorant `bound ≥ rate(t)`.
pub fn thinning<R: Rng + ?Sized>(
    rng: &mut R,
    end: f64,
    bound: f64,
    mut rate: impl FnMut(f64) -> f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    if !(bound > 0.0) {
        return out;
    }
    let gap = Exp::new(bound).expect("positive rate");
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t > end {
            return out;
        }
        let accept = rate(t) / bound;
        if accept >= 1.0 || rng.random::<f64>() < accept {
            out.push(t);
        }
    }
}

/// 60th percentile of `β_F F + β_X X + b₀ + b₁F` in the population of B/C settings.
fn threshold_offset(spec: &ScenarioSpec) -> f64 {
    let a = spec.latent_slope;
    let comp = |f: f64| {
        let c = spec.theta0[0] + spec.theta0[1] * f;
        let mean = spec.beta_f * f;
        let var = (spec.beta_x + c * a).powi(2) + c * c + spec.sigma_b[0] + f * spec.sigma_b[1];
        (mean, var.sqrt())
    };
    let ((m0, s0), (m1, s1)) = (comp(0.0), comp(1.0));
    let cdf = |q: f64| 0.5 * norm_cdf((q - m0) / s0) + 0.5 * norm_cdf((q - m1) / s1);
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < 0.6 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Draw<'a> {
    spec: &'a ScenarioSpec,
    f: f64,
    x: f64,
    latent: f64,
    b: [f64; 2],
    threshold: f64,
}

impl Draw<'_> {
    fn mean_outcome(&self, t: f64) -> f64 {
        let s = self.spec;
        s.beta0
            + s.beta_t * t
            + s.beta_f * self.f
            + s.beta_x * self.x
            + self.b[0]
            + self.b[1] * self.f
    }

    fn obs_prob(&self, kind: Observation) -> f64 {
        let (f, x, l) = (self.f, self.x, self.latent);
        let logistic = |v: f64| 1.0 / (1.0 + (-v).exp());
        match kind {
            Observation::Constant => 0.5,
            Observation::LogitA => logistic(-0.5 * f - 0.5 * x),
            Observation::ProbitA4 => norm_cdf(2.0 + f - x + (-0.2 - 0.6 * f) * l),
            Observation::ProbitB => norm_cdf(0.2 + 0.4 * f + 0.3 * x + 0.8 * l + 0.5 * f * l),
            Observation::LogitC => logistic(f + x),
        }
    }
}

/// Visit times and the outcome noise already drawn at them (previous-outcome visiting).
fn draw_visits(
    d: &Draw,
    kind: Visiting,
    end: f64,
    rng: &mut ChaCha8Rng,
    noise: &mut ChaCha8Rng,
    eta_out: &mut f64,
) -> (Vec<f64>, Vec<f64>) {
    let (f, x, l) = (d.f, d.x, d.latent);
    let poisson = |rng: &mut ChaCha8Rng, rate: f64| thinning(rng, end, rate, |_| rate);
    let times = match kind {
        Visiting::Regular => {
            let h = d.spec.regular_interval;
            (1..)
                .map(|k| k as f64 * h)
                .take_while(|&t| t <= end + 1e-12)
                .collect()
        }
        Visiting::MeasuredA => poisson(rng, (-3.5 + f + x).exp()),
        Visiting::GammaA3 => {
            let shape = 1.0 / (0.3 * d.b[1]).exp();
            let eta = Gamma::new(shape, 1.0).expect("valid gamma").sample(rng);
            *eta_out = eta;
            poisson(rng, eta * (-3.5 + f + x).exp())
        }
        Visiting::LognormalA4 => {
            let eta = (-0.5 + l).exp();
            *eta_out = eta;
            poisson(rng, eta * (-3.5 + f + x).exp())
        }
        Visiting::LatentOnly => poisson(rng, (-2.5 + 0.8 * l).exp()),
        Visiting::MeasuredLatent => poisson(rng, (-2.5 + 0.3 * f + 0.3 * x + 0.8 * l).exp()),
        Visiting::GammaFrailty => {
            let phi = (1.0 - 0.6 * l).exp();
            let eta = Gamma::new(phi, 1.0 / phi).expect("valid gamma").sample(rng);
            *eta_out = eta;
            poisson(rng, eta * (-2.5 + 0.3 * f + 0.3 * x).exp())
        }
        Visiting::PreviousOutcome => {
            let sigma = d.spec.sigma_eps;
            let mut prev = d.mean_outcome(0.0) + sigma * normal(noise);
            let mut t = 0.0;
            let mut times = Vec::new();
            let mut eps = Vec::new();
            loop {
                let rate = (-3.0 + 0.8 * prev).exp();
                t += Exp::new(rate).expect("positive rate").sample(rng);
                if t > end {
                    break;
                }
                let e = normal(noise);
                prev = d.mean_outcome(t) + sigma * e;
                times.push(t);
                eps.push(e);
            }
            return (times, eps);
        }
        Visiting::Threshold => {
            let offset = d.threshold;
            thinning(rng, end, 1.0, |t| {
                let above = d.mean_outcome(t) > d.spec.beta0 + d.spec.beta_t * t + offset;
                if above {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Visiting::Mixture => unreachable!("mixture resolved before drawing visits"),
    };
    let eps = times.iter().map(|_| normal(noise)).collect();
    (times, eps)
}

/// Draw one cohort and its ground truth.
pub fn generate(spec: &ScenarioSpec) -> Result<(Cohort, SimTruth)> {
    spec.check()?;
    let seed = spec.seed;
    let threshold = threshold_offset(spec);
    let mut subjects = Vec::with_capacity(spec.n);
    let mut truths = Vec::with_capacity(spec.n);
    let components = [
        Scenario::B1,
        Scenario::B2,
        Scenario::B3,
        Scenario::B4,
        Scenario::B5,
    ];
    for i in 0..spec.n {
        let idx = i as u64;
        let mut rc = stream(seed, idx, purpose::COVARIATES);
        let f = if rc.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let x = normal(&mut rc);
        let residual = normal(&mut rc);
        let censoring = match spec.censor_min {
            Some(lo) => lo + (spec.tau - lo) * rc.random::<f64>(),
            None => spec.tau,
        };
        let has_latent = spec.scenario.has_latent();
        let latent = if has_latent {
            spec.latent_slope * x + residual
        } else {
            0.0
        };
        let mut re = stream(seed, idx, purpose::EFFECTS);
        let mut b = [0.0; 2];
        for k in 0..2 {
            let mean = if has_latent {
                spec.theta0[k] * latent
            } else {
                0.0
            };
            b[k] = mean + spec.sigma_b[k].sqrt() * normal(&mut re);
        }
        let draw = Draw {
            spec,
            f,
            x,
            latent,
            b,
            threshold,
        };
        let (kind, component) = match spec.scenario.visiting() {
            Visiting::Mixture => {
                let mut rm = stream(seed, idx, purpose::MIXTURE);
                let c = components[rm.random_range(0..components.len())];
                (c.visiting(), Some(c))
            }
            k => (k, None),
        };
        let mut rv = stream(seed, idx, purpose::VISITS);
        let mut rn = stream(seed, idx, purpose::NOISE);
        let mut eta = 1.0;
        let (visits, eps) = draw_visits(&draw, kind, censoring, &mut rv, &mut rn, &mut eta);
        let mut ro = stream(seed, idx, purpose::OBSERVATION);
        let p_obs = draw.obs_prob(spec.scenario.observation());
        let mut obs_indicator = Vec::with_capacity(visits.len());
        let mut outcome = Vec::with_capacity(visits.len());
        for (&t, &e) in visits.iter().zip(&eps) {
            let r = u8::from(ro.random::<f64>() < p_obs);
            obs_indicator.push(r);
            outcome.push((r == 1).then(|| draw.mean_outcome(t) + spec.sigma_eps * e));
        }
        let id = format!("s{:05}", i + 1);
        let mut covariates = BTreeMap::new();
        covariates.insert("F".to_string(), CovariateSeries::Baseline { value: f });
        covariates.insert("X".to_string(), CovariateSeries::Baseline { value: x });
        covariates.insert("FX".to_string(), CovariateSeries::Baseline { value: f * x });
        subjects.push(SubjectData {
            id: id.clone(),
            censoring_time: censoring,
            visits,
            obs_indicator,
            outcome,
            covariates,
        });
        truths.push(SubjectTruth {
            id,
            latent,
            latent_residual: if has_latent { residual } else { 0.0 },
            eta,
            b,
            component,
        });
    }
    let cohort = Cohort {
        subjects,
        spec: simulation_spec(),
        max_followup: spec.tau,
    };
    let truth = SimTruth {
        spec: spec.clone(),
        subjects: truths,
        beta: vec![spec.beta_f, spec.beta_x],
        theta: if spec.scenario.has_latent() {
            spec.theta0.to_vec()
        } else {
            vec![0.0, 0.0]
        },
    };
    Ok((cohort, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_parsing() {
        assert_eq!("A.4".parse::<Scenario>().unwrap(), Scenario::A4);
        assert_eq!("c6".parse::<Scenario>().unwrap(), Scenario::C6);
        assert!(matches!(
            "D1".parse::<Scenario>(),
            Err(GivehrError::UnknownScenario(_))
        ));
    }

    #[test]
    fn regular_visits_in_a1() {
        let (cohort, _) = generate(&ScenarioSpec::new(Scenario::A1, 10, 3)).unwrap();
        for s in &cohort.subjects {
            assert_eq!(s.m(), 12);
            assert_eq!(s.visits[0], 5.0);
            assert_eq!(s.visits[11], 60.0);
        }
    }

    #[test]
    fn threshold_is_the_sixtieth_percentile() {
        let spec = ScenarioSpec::new(Scenario::B5, 1, 0);
        let q = threshold_offset(&spec);
        let s0 = (0.25f64 + 0.25 + 1.0).sqrt();
        let s1 = (0.25f64 + 0.49 + 1.0 + 2.0).sqrt();
        let p = 0.5 * norm_cdf(q / s0) + 0.5 * norm_cdf((q + 0.5) / s1);
        assert!((p - 0.6).abs() < 1e-12);
    }

    #[test]
    fn streams_are_independent_of_other_purposes() {
        let mut a = stream(7, 3, 0);
        let mut b = stream(7, 3, 1);
        let mut c = stream(7, 3, 0);
        let (x, y, z): (u64, u64, u64) = (a.random(), b.random(), c.random());
        assert_eq!(x, z);
        assert_ne!(x, y);
    }
}
