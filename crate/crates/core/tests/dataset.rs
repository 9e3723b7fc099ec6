mod common;

use std::collections::BTreeMap;

use givehr::dataset::{
    covariate_at, read_long_csv, validate, write_long_csv_to, Cohort, ColumnSchema,
    CovariateSeries, CovariateSpec, Role, RoleSpec, SubjectData,
};
use givehr::error::GivehrError;
use givehr::simulate::{generate, interaction_spec, Scenario, ScenarioSpec};
use proptest::prelude::*;

use common::{figure_one_cohort, simple_spec};

const FIGURE_ONE: &str = "\
id,time,r,y,censor_time,F
1,1.0,1,2.0,10,1
1,3.5,0,,10,1
1,6.0,1,2.6,10,1
1,8.0,0,,10,1
2,2.0,0,,9,0
2,4.0,1,1.1,9,0
2,7.5,1,1.7,9,0
3,5.0,0,NA,6,1
";

fn load(text: &str, spec: &CovariateSpec) -> Result<Cohort, GivehrError> {
    read_long_csv(text.as_bytes(), spec, &ColumnSchema::default(), None)
}

fn write(cohort: &Cohort) -> String {
    let mut buf = Vec::new();
    write_long_csv_to(cohort, &mut buf, &ColumnSchema::default()).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn figure_one_file_loads() {
    let cohort = load(FIGURE_ONE, &simple_spec()).unwrap();
    let m: Vec<usize> = cohort.subjects.iter().map(SubjectData::m).collect();
    assert_eq!(m, vec![4, 3, 1]);
    for s in &cohort.subjects {
        for (r, y) in s.obs_indicator.iter().zip(&s.outcome) {
            assert_eq!(*r == 1, y.is_some());
        }
    }
    assert_eq!(cohort.subjects[1].obs_indicator, vec![0, 1, 1]);
    assert_eq!(cohort.subjects[1].outcome[2], Some(1.7));
    assert_eq!(cohort.max_followup, 10.0);
}

#[test]
fn header_only_file_is_an_empty_cohort() {
    let cohort = load("id,time,r,y,censor_time,F\n", &simple_spec()).unwrap();
    assert_eq!(cohort.n(), 0);
}

#[test]
fn single_visit_subject() {
    let cohort = load(
        "id,time,r,y,censor_time,F\na,1.5,1,2.5,4,0\n",
        &simple_spec(),
    )
    .unwrap();
    assert_eq!(cohort.subjects[0].m(), 1);
    assert_eq!(cohort.subjects[0].outcome[0], Some(2.5));
}

#[test]
fn subject_without_visits_is_kept() {
    let text = "id,time,r,y,censor_time,F\na,1.5,1,2.5,4,0\nb,,,,3,1\n";
    let cohort = load(text, &simple_spec()).unwrap();
    assert_eq!(cohort.n(), 2);
    assert_eq!(cohort.subjects[1].m(), 0);
    assert_eq!(cohort.subjects[1].censoring_time, 3.0);
    assert!(validate(&cohort).is_valid());
}

#[test]
fn ingest_errors_name_the_problem() {
    let missing = load("id,time,r,y,censor_time\n1,1,1,2,5\n", &simple_spec()).unwrap_err();
    assert!(
        matches!(missing, GivehrError::MissingColumn(ref c) if c == "F"),
        "{missing}"
    );
    let disagree = load("id,time,r,y,censor_time,F\n1,1,1,,5,0\n", &simple_spec()).unwrap_err();
    assert!(matches!(disagree, GivehrError::Ingest { .. }), "{disagree}");
}

#[test]
fn covariate_at_examples() {
    let mut s = common::subject(
        "a",
        10.0,
        &[1.0],
        &[0],
        &[None],
        &[("age", 1.2), ("v", 3.0)],
    );
    s.covariates.insert(
        "step".into(),
        CovariateSeries::from_samples(&[0.0, 5.0], &[0.0, 1.0]),
    );
    let spec = CovariateSpec {
        visiting: RoleSpec::new(&["age"], false),
        obs_fixed: RoleSpec::new(&["v"], true),
        obs_random: RoleSpec::new(&[], false),
        outcome_fixed: RoleSpec::new(&["step"], false),
        outcome_random: RoleSpec::new(&[], false),
    };
    for t in [0.0, 3.0, 10.0] {
        assert_eq!(
            covariate_at(&s, &spec, Role::Visiting, t)
                .unwrap()
                .as_slice(),
            &[1.2]
        );
    }
    assert_eq!(
        covariate_at(&s, &spec, Role::ObsFixed, 2.0)
            .unwrap()
            .as_slice(),
        &[1.0, 3.0]
    );
    assert_eq!(
        covariate_at(&s, &spec, Role::OutcomeFixed, 4.9).unwrap()[0],
        0.0
    );
    assert_eq!(
        covariate_at(&s, &spec, Role::OutcomeFixed, 5.0).unwrap()[0],
        1.0
    );
    assert_eq!(
        covariate_at(&s, &spec, Role::ObsRandom, 5.0).unwrap().len(),
        0
    );

    let mut spec_missing = spec.clone();
    spec_missing.visiting = RoleSpec::new(&["bmi"], false);
    assert!(matches!(
        covariate_at(&s, &spec_missing, Role::Visiting, 1.0),
        Err(GivehrError::MissingSeries { .. })
    ));
}

#[test]
fn validation_report_on_figure_one() {
    let report = validate(&figure_one_cohort());
    assert!(report.is_valid());
    assert_eq!(
        (report.n_subjects, report.total_visits, report.observed),
        (3, 8, 4)
    );
    assert!((report.fraction_observed - 0.5).abs() < 1e-15);
}

#[test]
fn late_visit_is_one_violation() {
    let mut cohort = figure_one_cohort();
    cohort.subjects[2].visits[0] = 7.0;
    let report = validate(&cohort);
    assert_eq!(report.violations.len(), 1);
    assert_eq!(report.violations[0].subject, "3");
    assert_eq!(report.violations[0].index, Some(0));
}

#[test]
fn zero_visit_subject_is_valid() {
    let mut cohort = figure_one_cohort();
    cohort
        .subjects
        .push(common::subject("4", 5.0, &[], &[], &[], &[("F", 0.0)]));
    assert!(validate(&cohort).is_valid());
}

#[test]
fn figure_one_round_trip() {
    let cohort = load(FIGURE_ONE, &simple_spec()).unwrap();
    let again = load(&write(&cohort), &simple_spec()).unwrap();
    assert_eq!(cohort, again);
}

#[test]
fn simulated_round_trip_keeps_unused_covariates() {
    let (cohort, _) = generate(&ScenarioSpec::new(Scenario::B4, 40, 9)).unwrap();
    let text = write(&cohort);
    assert!(text.lines().next().unwrap().ends_with("FX"));
    let again = read_long_csv(
        text.as_bytes(),
        &interaction_spec(),
        &ColumnSchema::default(),
        Some(60.0),
    )
    .unwrap();
    assert_eq!(cohort.subjects, again.subjects);
}

#[test]
fn comment_lines_are_skipped() {
    let text = format!("# givehr 0.1.0 seed=0 config_sha256=abc\n{FIGURE_ONE}");
    assert_eq!(load(&text, &simple_spec()).unwrap().total_visits(), 8);
}

#[test]
fn custom_column_names() {
    let schema = ColumnSchema {
        id: "patient".into(),
        time: "day".into(),
        r: "measured".into(),
        y: "hba1c".into(),
        censor_time: "end".into(),
    };
    let text = "patient,day,measured,hba1c,end,F\np1,2,1,6.5,30,1\n";
    let cohort = read_long_csv(text.as_bytes(), &simple_spec(), &schema, None).unwrap();
    assert_eq!(cohort.subjects[0].outcome[0], Some(6.5));
}

fn arb_subject(k: usize) -> impl Strategy<Value = SubjectData> {
    (
        prop::collection::vec((0.01f64..1.0, any::<bool>(), -5.0f64..5.0), 0..6),
        0.0f64..2.0,
        prop::sample::select(vec![0.0, 1.0]),
    )
        .prop_map(move |(steps, extra, f)| {
            let mut t = 0.0;
            let mut visits = Vec::new();
            let mut r = Vec::new();
            let mut y = Vec::new();
            for (gap, seen, value) in steps {
                t += gap;
                visits.push(t);
                r.push(u8::from(seen));
                y.push(seen.then_some(value));
            }
            let mut covariates = BTreeMap::new();
            covariates.insert("F".to_string(), CovariateSeries::Baseline { value: f });
            SubjectData {
                id: format!("p{k}"),
                censoring_time: t + extra,
                visits,
                obs_indicator: r,
                outcome: y,
                covariates,
            }
        })
}

proptest! {
    #[test]
    fn write_then_read_is_identity(a in arb_subject(0), b in arb_subject(1), c in arb_subject(2)) {
        let subjects = vec![a, b, c];
        let tau = subjects.iter().map(|s| s.censoring_time).fold(0.0, f64::max);
        let cohort = Cohort { subjects, spec: simple_spec(), max_followup: tau };
        let again = read_long_csv(write(&cohort).as_bytes(), &simple_spec(), &ColumnSchema::default(), Some(tau)).unwrap();
        prop_assert_eq!(cohort, again);
    }
}
