mod common;

use givehr::baselines::{
    fit_lmm, iirr_weighted, summary_regression, Estimator, LmmVariant, SummaryStat,
};
use givehr::dataset::{Cohort, CovariateSpec, RoleSpec};
use givehr::error::GivehrError;
use givehr::simulate::{generate, stream, Scenario, ScenarioSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use common::subject;

fn roles(visiting: &[&str]) -> CovariateSpec {
    CovariateSpec {
        visiting: RoleSpec::new(visiting, false),
        obs_fixed: RoleSpec::new(&[], true),
        obs_random: RoleSpec::new(&[], false),
        outcome_fixed: RoleSpec::new(&["F", "X"], false),
        outcome_random: RoleSpec::new(&[], true),
    }
}

/// Six visits per subject at t = 1..6, every outcome observed, no random effects.
fn balanced(n: usize, seed: u64) -> Cohort {
    let subjects = (0..n)
        .map(|i| {
            let mut rng = stream(seed, i as u64, 0);
            let f = (i % 2) as f64;
            let x: f64 = rng.sample(StandardNormal);
            let times: Vec<f64> = (1..=6).map(f64::from).collect();
            let y: Vec<Option<f64>> = times
                .iter()
                .map(|&t| {
                    let e: f64 = rng.sample(StandardNormal);
                    Some(1.0 + 0.2 * t - 0.5 * f + 0.5 * x + e)
                })
                .collect();
            subject(
                &format!("{i}"),
                7.0,
                &times,
                &[1; 6],
                &y,
                &[("F", f), ("X", x)],
            )
        })
        .collect();
    Cohort {
        subjects,
        spec: roles(&[]),
        max_followup: 7.0,
    }
}

fn pooled_ols(cohort: &Cohort, weights: impl Fn(usize) -> f64) -> DVector<f64> {
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (i, s) in cohort.subjects.iter().enumerate() {
        let w = weights(i).sqrt();
        for (t, y) in s.visits.iter().zip(&s.outcome) {
            if let Some(y) = y {
                rows.push([
                    w,
                    w * t,
                    w * s.covariates["F"].eval(0.0),
                    w * s.covariates["X"].eval(0.0),
                ]);
                ys.push(w * y);
            }
        }
    }
    let a = DMatrix::from_fn(rows.len(), 4, |r, c| rows[r][c]);
    a.svd(true, true)
        .solve(&DVector::from_vec(ys), 1e-14)
        .unwrap()
}

#[test]
fn lmm_without_random_effects_matches_ols() {
    let cohort = balanced(300, 1);
    let fit = fit_lmm(&cohort, LmmVariant::Standard).unwrap();
    let ols = pooled_ols(&cohort, |_| 1.0);
    for (k, name) in ["(Intercept)", "t", "F", "X"].iter().enumerate() {
        let got = fit.coefficient(name).unwrap();
        assert!((got - ols[k]).abs() < 1e-4, "{name}: {got} vs {}", ols[k]);
    }
}

#[test]
fn iirr_with_flat_rate_is_pooled_ols() {
    let cohort = balanced(100, 2);
    let fit = iirr_weighted(&cohort).unwrap();
    let ols = pooled_ols(&cohort, |_| 1.0);
    for (got, want) in fit.coefficients.iter().zip(ols.iter()) {
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn iirr_weights_by_inverse_rate() {
    let (cohort, _) = generate(&ScenarioSpec::new(Scenario::A2, 300, 6)).unwrap();
    let fit = iirr_weighted(&cohort).unwrap();
    let gamma = givehr::visiting::fit_rate_model(&cohort).unwrap().gamma;
    let oracle = pooled_ols(&cohort, |i| {
        let s = &cohort.subjects[i];
        (-(gamma[0] * s.covariates["F"].eval(0.0) + gamma[1] * s.covariates["X"].eval(0.0))).exp()
    });
    for (got, want) in fit.coefficients.iter().zip(oracle.iter()) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn summary_mean_is_ols_of_subject_means() {
    let cohort = balanced(80, 3);
    let fit = summary_regression(&cohort, SummaryStat::Mean).unwrap();
    let a = DMatrix::from_fn(80, 3, |r, c| match c {
        0 => 1.0,
        1 => cohort.subjects[r].covariates["F"].eval(0.0),
        _ => cohort.subjects[r].covariates["X"].eval(0.0),
    });
    let b = DVector::from_fn(80, |r, _| {
        let ys: Vec<f64> = cohort.subjects[r]
            .outcome
            .iter()
            .flatten()
            .copied()
            .collect();
        ys.iter().sum::<f64>() / ys.len() as f64
    });
    let ols = a.svd(true, true).solve(&b, 1e-14).unwrap();
    for (got, want) in fit.coefficients.iter().zip(ols.iter()) {
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn single_observation_makes_all_summaries_agree() {
    let mut cohort = balanced(40, 4);
    for s in &mut cohort.subjects {
        for j in 1..s.m() {
            s.obs_indicator[j] = 0;
            s.outcome[j] = None;
        }
    }
    let fits: Vec<_> = [
        SummaryStat::Mean,
        SummaryStat::Median,
        SummaryStat::Min,
        SummaryStat::Max,
    ]
    .into_iter()
    .map(|s| summary_regression(&cohort, s).unwrap().coefficients)
    .collect();
    assert!(fits.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(SummaryStat::Max.apply(&[1.0, 5.0, 3.0]), 5.0);
}

#[test]
fn visit_count_is_collinear_under_regular_visits() {
    let (cohort, _) = generate(&ScenarioSpec::new(Scenario::A1, 200, 5)).unwrap();
    let fit = fit_lmm(&cohort, LmmVariant::VisitAware).unwrap();
    assert_eq!(fit.dropped, vec!["H_N".to_string()]);
    assert!(fit.coefficient("F").is_some());
    let fit = fit_lmm(&cohort, LmmVariant::ObsAware).unwrap();
    assert!(fit.dropped.is_empty());
    assert!(fit.coefficient("H_R").is_some());
}

#[test]
fn lmm_recovers_effects_with_random_slopes() {
    let (cohort, _) = generate(&ScenarioSpec::new(Scenario::A2, 1000, 8)).unwrap();
    let fit = fit_lmm(&cohort, LmmVariant::Standard).unwrap();
    assert!(fit.converged);
    assert!((fit.coefficient("F").unwrap() + 0.5).abs() < 0.35);
    assert!((fit.coefficient("X").unwrap() - 0.5).abs() < 0.2);
    assert!((fit.coefficient("t").unwrap() - 0.1).abs() < 0.02);
}

#[test]
fn registry_lists_every_id() {
    let all = Estimator::parse_list("all").unwrap();
    assert_eq!(all.len(), 9);
    let err = Estimator::parse_list("givehr,foo").unwrap_err();
    match err {
        GivehrError::UnknownEstimator { id, registered } => {
            assert_eq!(id, "foo");
            assert!(registered.contains("summary-median") && registered.contains("oa-lmm"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn summary_needs_two_subjects() {
    let cohort = Cohort {
        subjects: vec![subject(
            "a",
            5.0,
            &[1.0],
            &[1],
            &[Some(1.0)],
            &[("F", 1.0), ("X", 0.0)],
        )],
        spec: roles(&[]),
        max_followup: 5.0,
    };
    assert!(summary_regression(&cohort, SummaryStat::Mean).is_err());
}
