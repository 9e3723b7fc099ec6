//! Visit-level cohort data: long-format CSV ingestion, covariate roles, and
//! step-function covariate evaluation.
//!
//! One CSV row is one visit. A subject with no visits is written as a single
//! row whose `time` cell is empty; it still carries covariates and a censoring
//! time so it can enter risk sets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{GivehrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSeries {
    Baseline {
        value: f64,
    },
    /// Right-continuous LOCF; before the first knot the first value applies.
    Step {
        knots: Vec<f64>,
        values: Vec<f64>,
    },
}

impl CovariateSeries {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            CovariateSeries::Baseline { value } => *value,
            CovariateSeries::Step { knots, values } => {
                let idx = knots.partition_point(|&k| k <= t);
                values[idx.saturating_sub(1)]
            }
        }
    }

    /// Times at which the value can change (empty for baseline series).
    pub fn change_points(&self) -> &[f64] {
        match self {
            CovariateSeries::Baseline { .. } => &[],
            CovariateSeries::Step { knots, .. } => knots.get(1..).unwrap_or(&[]),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            CovariateSeries::Baseline { .. } => true,
            CovariateSeries::Step { values, .. } => values.windows(2).all(|w| w[0] == w[1]),
        }
    }

    /// Collapse a (time, value) sequence to the simplest series.
    pub fn from_samples(times: &[f64], values: &[f64]) -> Self {
        if values.windows(2).all(|w| w[0] == w[1]) {
            return CovariateSeries::Baseline {
                value: values.first().copied().unwrap_or(0.0),
            };
        }
        let mut knots = Vec::with_capacity(times.len());
        let mut vals: Vec<f64> = Vec::with_capacity(times.len());
        for (&t, &v) in times.iter().zip(values) {
            if vals.last() != Some(&v) {
                knots.push(t);
                vals.push(v);
            }
        }
        CovariateSeries::Step {
            knots,
            values: vals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectData {
    pub id: String,
    pub censoring_time: f64,
    pub visits: Vec<f64>,
    pub obs_indicator: Vec<u8>,
    pub outcome: Vec<Option<f64>>,
    pub covariates: BTreeMap<String, CovariateSeries>,
}

impl SubjectData {
    pub fn m(&self) -> usize {
        self.visits.len()
    }

    pub fn n_observed(&self) -> usize {
        self.obs_indicator.iter().filter(|&&r| r == 1).count()
    }
}

/// Covariate roles of the three submodels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Visiting,
    ObsFixed,
    ObsRandom,
    OutcomeFixed,
    OutcomeRandom,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Visiting,
        Role::ObsFixed,
        Role::ObsRandom,
        Role::OutcomeFixed,
        Role::OutcomeRandom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Visiting => "visiting",
            Role::ObsFixed => "obs_fixed",
            Role::ObsRandom => "obs_random",
            Role::OutcomeFixed => "outcome_fixed",
            Role::OutcomeRandom => "outcome_random",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = GivehrError;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| GivehrError::UnknownRole(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoleSpec {
    pub columns: Vec<String>,
    #[serde(default)]
    pub intercept: bool,
}

impl RoleSpec {
    pub fn new(columns: &[&str], intercept: bool) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            intercept,
        }
    }

    pub fn dim(&self) -> usize {
        self.columns.len() + usize::from(self.intercept)
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        if self.intercept {
            out.push("(Intercept)".to_string());
        }
        out.extend(self.columns.iter().cloned());
        out
    }
}

/// Assignment of covariate columns to the five roles. Every role key is required
/// when deserializing, so a config that omits one fails with the key's name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub visiting: RoleSpec,
    pub obs_fixed: RoleSpec,
    pub obs_random: RoleSpec,
    pub outcome_fixed: RoleSpec,
    pub outcome_random: RoleSpec,
}

impl CovariateSpec {
    pub fn role(&self, role: Role) -> &RoleSpec {
        match role {
            Role::Visiting => &self.visiting,
            Role::ObsFixed => &self.obs_fixed,
            Role::ObsRandom => &self.obs_random,
            Role::OutcomeFixed => &self.outcome_fixed,
            Role::OutcomeRandom => &self.outcome_random,
        }
    }

    pub fn dim(&self, role: Role) -> usize {
        self.role(role).dim()
    }

    /// All referenced columns, deduplicated, in first-appearance order.
    pub fn all_columns(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for role in Role::ALL {
            for c in &self.role(role).columns {
                if seen.insert(c.clone()) {
                    out.push(c.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<SubjectData>,
    pub spec: CovariateSpec,
    pub max_followup: f64,
}

impl Cohort {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_visits(&self) -> usize {
        self.subjects.iter().map(SubjectData::m).sum()
    }

    pub fn covariate_at(&self, subject: usize, role: Role, t: f64) -> Result<DVector<f64>> {
        covariate_at(&self.subjects[subject], &self.spec, role, t)
    }

    /// Subset (with repetition) of subjects; repeated ids get a `#k` suffix to stay unique.
    pub fn resample(&self, indices: &[usize]) -> Cohort {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let subjects = indices
            .iter()
            .map(|&i| {
                let c = counts.entry(i).or_insert(0);
                *c += 1;
                let mut s = self.subjects[i].clone();
                if *c > 1 {
                    s.id = format!("{}#{}", s.id, c);
                }
                s
            })
            .collect();
        Cohort {
            subjects,
            spec: self.spec.clone(),
            max_followup: self.max_followup,
        }
    }
}

/// Covariate vector of `role` at time `t`: intercept (if flagged) then the series in spec order.
pub fn covariate_at(
    subject: &SubjectData,
    spec: &CovariateSpec,
    role: Role,
    t: f64,
) -> Result<DVector<f64>> {
    let mut out = Vec::with_capacity(spec.dim(role));
    covariate_into(subject, spec.role(role), t, &mut out)?;
    Ok(DVector::from_vec(out))
}

pub(crate) fn covariate_into(
    subject: &SubjectData,
    role: &RoleSpec,
    t: f64,
    out: &mut Vec<f64>,
) -> Result<()> {
    out.clear();
    if role.intercept {
        out.push(1.0);
    }
    for name in &role.columns {
        let series = subject
            .covariates
            .get(name)
            .ok_or_else(|| GivehrError::MissingSeries {
                subject: subject.id.clone(),
                name: name.clone(),
            })?;
        out.push(series.eval(t));
    }
    Ok(())
}

/// Sorted, deduplicated change points of the series used by `roles` for one subject.
pub(crate) fn change_points(
    subject: &SubjectData,
    spec: &CovariateSpec,
    roles: &[Role],
) -> Vec<f64> {
    let mut pts: Vec<f64> = roles
        .iter()
        .flat_map(|&r| spec.role(r).columns.iter())
        .filter_map(|c| subject.covariates.get(c))
        .flat_map(|s| s.change_points().iter().copied())
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// Column names of the long-format file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub id: String,
    pub time: String,
    pub r: String,
    pub y: String,
    pub censor_time: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            r: "r".into(),
            y: "y".into(),
            censor_time: "censor_time".into(),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

fn parse_num(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| GivehrError::Ingest {
        row,
        message: format!("column `{column}`: cannot parse `{cell}` as a number"),
    })?;
    if !v.is_finite() {
        return Err(GivehrError::Ingest {
            row,
            message: format!("column `{column}`: non-finite value"),
        });
    }
    Ok(v)
}

struct RawRow {
    line: usize,
    time: Option<f64>,
    r: u8,
    y: Option<f64>,
    censor: Option<f64>,
    covs: Vec<f64>,
}

/// Load a long-format CSV file. `tau = None` takes τ as the largest censoring or visit time.
pub fn load_long_csv(
    path: impl AsRef<Path>,
    spec: &CovariateSpec,
    schema: &ColumnSchema,
    tau: Option<f64>,
) -> Result<Cohort> {
    let file = std::fs::File::open(path)?;
    read_long_csv(file, spec, schema, tau)
}

pub fn read_long_csv<R: Read>(
    reader: R,
    spec: &CovariateSpec,
    schema: &ColumnSchema,
    tau: Option<f64>,
) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| find(name).ok_or_else(|| GivehrError::MissingColumn(name.to_string()));
    let (c_id, c_time, c_r, c_y) = (
        need(&schema.id)?,
        need(&schema.time)?,
        need(&schema.r)?,
        need(&schema.y)?,
    );
    let c_censor = find(&schema.censor_time);
    let cov_names = spec.all_columns();
    let cov_cols = cov_names
        .iter()
        .map(|c| need(c))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRow>> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cell = |c: usize| record.get(c).unwrap_or("");
        let id = cell(c_id).to_string();
        if id.is_empty() {
            return Err(GivehrError::Ingest {
                row: line,
                message: "empty subject id".into(),
            });
        }
        let time = if is_missing(cell(c_time)) {
            None
        } else {
            Some(parse_num(cell(c_time), line, &schema.time)?)
        };
        let r = match (cell(c_r).trim(), time) {
            ("0", _) => 0,
            ("1", Some(_)) => 1,
            ("1", None) => {
                return Err(GivehrError::Ingest {
                    row: line,
                    message: "observed outcome on a row without a visit time".into(),
                })
            }
            (s, None) if is_missing(s) => 0,
            (s, _) => {
                return Err(GivehrError::Ingest {
                    row: line,
                    message: format!("observation indicator `{s}` outside {{0,1}}"),
                })
            }
        };
        let y = if is_missing(cell(c_y)) {
            None
        } else {
            Some(parse_num(cell(c_y), line, &schema.y)?)
        };
        match (r, y) {
            (0, Some(_)) => {
                return Err(GivehrError::Ingest {
                    row: line,
                    message: "outcome present where the observation indicator is 0".into(),
                })
            }
            (1, None) => {
                return Err(GivehrError::Ingest {
                    row: line,
                    message: "outcome missing where the observation indicator is 1".into(),
                })
            }
            _ => {}
        }
        let censor = match c_censor {
            Some(c) if !is_missing(cell(c)) => Some(parse_num(cell(c), line, &schema.censor_time)?),
            _ => None,
        };
        let mut covs = Vec::with_capacity(cov_cols.len());
        for (name, &c) in cov_names.iter().zip(&cov_cols) {
            if is_missing(cell(c)) {
                return Err(GivehrError::Ingest {
                    row: line,
                    message: format!("missing covariate value in column `{name}`"),
                });
            }
            covs.push(parse_num(cell(c), line, name)?);
        }
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        entry.push(RawRow {
            line,
            time,
            r,
            y,
            censor,
            covs,
        });
    }

    let mut pending = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).expect("grouped id");
        if rows.iter().any(|r| r.time.is_none()) && rows.len() > 1 {
            let line = rows.iter().find(|r| r.time.is_none()).map_or(0, |r| r.line);
            return Err(GivehrError::Ingest {
                row: line,
                message: format!("subject `{id}` mixes a no-visit row with visit rows"),
            });
        }
        rows.sort_by(|a, b| a.time.unwrap_or(0.0).total_cmp(&b.time.unwrap_or(0.0)));
        for w in rows.windows(2) {
            if w[0].time == w[1].time {
                return Err(GivehrError::Ingest {
                    row: w[1].line,
                    message: format!(
                        "duplicate (id, time) pair ({id}, {})",
                        w[1].time.unwrap_or(f64::NAN)
                    ),
                });
            }
        }
        let mut censor = None;
        for r in &rows {
            if let Some(c) = r.censor {
                if censor.is_some_and(|prev| prev != c) {
                    return Err(GivehrError::Ingest {
                        row: r.line,
                        message: format!("subject `{id}` has inconsistent censoring times"),
                    });
                }
                censor = Some(c);
            }
        }
        pending.push((id, rows, censor));
    }

    let tau = match tau {
        Some(t) => t,
        None => pending
            .iter()
            .flat_map(|(_, rows, c)| rows.iter().filter_map(|r| r.time).chain(*c))
            .fold(0.0, f64::max),
    };

    let subjects = pending
        .into_iter()
        .map(|(id, rows, censor)| {
            let visit_rows: Vec<&RawRow> = rows.iter().filter(|r| r.time.is_some()).collect();
            let times: Vec<f64> = visit_rows.iter().map(|r| r.time.unwrap()).collect();
            let sample_times: Vec<f64> = rows.iter().map(|r| r.time.unwrap_or(0.0)).collect();
            let covariates = cov_names
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let vals: Vec<f64> = rows.iter().map(|r| r.covs[k]).collect();
                    (
                        name.clone(),
                        CovariateSeries::from_samples(&sample_times, &vals),
                    )
                })
                .collect();
            SubjectData {
                id,
                censoring_time: censor.unwrap_or(tau),
                obs_indicator: visit_rows.iter().map(|r| r.r).collect(),
                outcome: visit_rows.iter().map(|r| r.y).collect(),
                visits: times,
                covariates,
            }
        })
        .collect();
    Ok(Cohort {
        subjects,
        spec: spec.clone(),
        max_followup: tau,
    })
}

/// Write the cohort in the long format read by [`read_long_csv`].
pub fn write_long_csv_to<W: Write>(
    cohort: &Cohort,
    writer: W,
    schema: &ColumnSchema,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut cov_names = cohort.spec.all_columns();
    // Covariates carried by every subject but unused by the roles are kept too.
    if let Some(first) = cohort.subjects.first() {
        for name in first.covariates.keys() {
            let everywhere = cohort
                .subjects
                .iter()
                .all(|s| s.covariates.contains_key(name));
            if everywhere && !cov_names.contains(name) {
                cov_names.push(name.clone());
            }
        }
    }
    let mut header = vec![
        schema.id.clone(),
        schema.time.clone(),
        schema.r.clone(),
        schema.y.clone(),
        schema.censor_time.clone(),
    ];
    header.extend(cov_names.iter().cloned());
    wtr.write_record(&header)?;
    for s in &cohort.subjects {
        let cov_cells = |t: f64| -> Result<Vec<String>> {
            cov_names
                .iter()
                .map(|c| {
                    s.covariates
                        .get(c)
                        .map(|series| format!("{}", series.eval(t)))
                        .ok_or_else(|| GivehrError::MissingSeries {
                            subject: s.id.clone(),
                            name: c.clone(),
                        })
                })
                .collect()
        };
        if s.visits.is_empty() {
            let mut row = vec![s.id.clone(), String::new(), String::new(), String::new()];
            row.push(format!("{}", s.censoring_time));
            row.extend(cov_cells(0.0)?);
            wtr.write_record(&row)?;
            continue;
        }
        for j in 0..s.m() {
            let mut row = vec![
                s.id.clone(),
                format!("{}", s.visits[j]),
                s.obs_indicator[j].to_string(),
                s.outcome[j].map_or(String::new(), |y| format!("{y}")),
                format!("{}", s.censoring_time),
            ];
            row.extend(cov_cells(s.visits[j])?);
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_long_csv(
    cohort: &Cohort,
    path: impl AsRef<Path>,
    schema: &ColumnSchema,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_long_csv_to(cohort, std::io::BufWriter::new(file), schema)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub subject: String,
    pub index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_subjects: usize,
    pub total_visits: usize,
    pub observed: usize,
    pub fraction_observed: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every subject against the data-model invariants. Never fails; problems are reported.
pub fn validate(cohort: &Cohort) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |subject: &str, index: Option<usize>, message: String| {
        violations.push(Violation {
            subject: subject.to_string(),
            index,
            message,
        })
    };
    let mut ids = HashSet::new();
    let columns = cohort.spec.all_columns();
    for s in &cohort.subjects {
        if !ids.insert(s.id.as_str()) {
            push(&s.id, None, "duplicate subject id".into());
        }
        let c = s.censoring_time;
        if !(c.is_finite() && c >= 0.0) {
            push(&s.id, None, format!("invalid censoring time {c}"));
        }
        if c > cohort.max_followup {
            push(
                &s.id,
                None,
                format!("censoring time {c} exceeds tau {}", cohort.max_followup),
            );
        }
        if s.obs_indicator.len() != s.m() || s.outcome.len() != s.m() {
            push(
                &s.id,
                None,
                "visit, indicator and outcome vectors differ in length".into(),
            );
            continue;
        }
        for j in 0..s.m() {
            let t = s.visits[j];
            if !(t.is_finite() && t > 0.0) {
                push(&s.id, Some(j), format!("visit time {t} not in (0, C]"));
            }
            if t > c {
                push(
                    &s.id,
                    Some(j),
                    format!("visit time {t} after censoring time {c}"),
                );
            }
            if j > 0 && t <= s.visits[j - 1] {
                push(&s.id, Some(j), "visit times not strictly increasing".into());
            }
            match (s.obs_indicator[j], s.outcome[j]) {
                (0, None) | (1, Some(_)) => {}
                (0 | 1, _) => push(
                    &s.id,
                    Some(j),
                    "outcome presence disagrees with indicator".into(),
                ),
                (r, _) => push(&s.id, Some(j), format!("indicator {r} outside {{0,1}}")),
            }
            if s.outcome[j].is_some_and(|y| !y.is_finite()) {
                push(&s.id, Some(j), "non-finite outcome".into());
            }
        }
        for name in &columns {
            if !s.covariates.contains_key(name) {
                push(&s.id, None, format!("missing covariate series `{name}`"));
            }
        }
        for name in &cohort.spec.visiting.columns {
            if s.covariates.get(name).is_some_and(|v| !v.is_constant()) {
                push(
                    &s.id,
                    None,
                    format!("visiting covariate `{name}` varies over time"),
                );
            }
        }
    }
    let total_visits = cohort.total_visits();
    let observed: usize = cohort.subjects.iter().map(SubjectData::n_observed).sum();
    ValidationReport {
        n_subjects: cohort.n(),
        total_visits,
        observed,
        fraction_observed: if total_visits > 0 {
            observed as f64 / total_visits as f64
        } else {
            0.0
        },
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_one(col: &str, intercept: bool) -> CovariateSpec {
        let r = RoleSpec::new(&[col], intercept);
        CovariateSpec {
            visiting: r.clone(),
            obs_fixed: r.clone(),
            obs_random: RoleSpec::default(),
            outcome_fixed: r.clone(),
            outcome_random: RoleSpec::default(),
        }
    }

    #[test]
    fn baseline_series_is_constant_in_time() {
        let mut covariates = BTreeMap::new();
        covariates.insert("age".to_string(), CovariateSeries::Baseline { value: 1.2 });
        let s = SubjectData {
            id: "a".into(),
            censoring_time: 10.0,
            visits: vec![],
            obs_indicator: vec![],
            outcome: vec![],
            covariates,
        };
        let spec = spec_one("age", false);
        for t in [0.0, 3.0, 10.0] {
            assert_eq!(
                covariate_at(&s, &spec, Role::Visiting, t)
                    .unwrap()
                    .as_slice(),
                &[1.2]
            );
        }
        let spec = spec_one("age", true);
        assert_eq!(
            covariate_at(&s, &spec, Role::ObsFixed, 2.0)
                .unwrap()
                .as_slice(),
            &[1.0, 1.2]
        );
    }

    #[test]
    fn step_series_is_right_continuous() {
        let s = CovariateSeries::Step {
            knots: vec![0.0, 5.0],
            values: vec![0.0, 1.0],
        };
        assert_eq!(s.eval(4.9), 0.0);
        assert_eq!(s.eval(5.0), 1.0);
        let late = CovariateSeries::Step {
            knots: vec![2.0, 5.0],
            values: vec![3.0, 1.0],
        };
        assert_eq!(late.eval(0.5), 3.0);
        assert_eq!(late.change_points(), &[5.0]);
    }

    #[test]
    fn role_parsing() {
        assert_eq!("obs_random".parse::<Role>().unwrap(), Role::ObsRandom);
        assert!(matches!(
            "bogus".parse::<Role>(),
            Err(GivehrError::UnknownRole(_))
        ));
    }

    #[test]
    fn missing_series_is_reported() {
        let s = SubjectData {
            id: "a".into(),
            censoring_time: 1.0,
            visits: vec![],
            obs_indicator: vec![],
            outcome: vec![],
            covariates: BTreeMap::new(),
        };
        let err = covariate_at(&s, &spec_one("z", false), Role::Visiting, 0.0).unwrap_err();
        assert!(matches!(err, GivehrError::MissingSeries { .. }));
    }
}
