#![allow(dead_code)]

pub mod gauss_hermite;

use std::collections::BTreeMap;

use givehr::dataset::{Cohort, CovariateSeries, CovariateSpec, RoleSpec, SubjectData};

pub fn baseline(pairs: &[(&str, f64)]) -> BTreeMap<String, CovariateSeries> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), CovariateSeries::Baseline { value: *v }))
        .collect()
}

pub fn subject(
    id: &str,
    c: f64,
    visits: &[f64],
    r: &[u8],
    y: &[Option<f64>],
    cov: &[(&str, f64)],
) -> SubjectData {
    SubjectData {
        id: id.into(),
        censoring_time: c,
        visits: visits.to_vec(),
        obs_indicator: r.to_vec(),
        outcome: y.to_vec(),
        covariates: baseline(cov),
    }
}

pub fn simple_spec() -> CovariateSpec {
    CovariateSpec {
        visiting: RoleSpec::new(&["F"], false),
        obs_fixed: RoleSpec::new(&["F"], true),
        obs_random: RoleSpec::new(&[], true),
        outcome_fixed: RoleSpec::new(&["F"], false),
        outcome_random: RoleSpec::new(&[], true),
    }
}

/// Three subjects with 4, 3 and 1 visits; observation patterns (1,0,1,0), (0,1,1), (0).
pub fn figure_one_cohort() -> Cohort {
    let subjects = vec![
        subject(
            "1",
            10.0,
            &[1.0, 3.5, 6.0, 8.0],
            &[1, 0, 1, 0],
            &[Some(2.0), None, Some(2.6), None],
            &[("F", 1.0)],
        ),
        subject(
            "2",
            9.0,
            &[2.0, 4.0, 7.5],
            &[0, 1, 1],
            &[None, Some(1.1), Some(1.7)],
            &[("F", 0.0)],
        ),
        subject("3", 6.0, &[5.0], &[0], &[None], &[("F", 1.0)]),
    ];
    Cohort {
        subjects,
        spec: simple_spec(),
        max_followup: 10.0,
    }
}
