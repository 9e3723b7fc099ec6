use std::fmt;

use thiserror::Error;

/// Pipeline stage used to label propagated errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Visiting,
    Observation,
    Outcome,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self {
            Stage::Visiting => "stage 1 (visiting)",
            Stage::Observation => "stage 2 (observation)",
            Stage::Outcome => "stage 3 (outcome)",
        };
        f.write_str(label)
    }
}

#[derive(Debug, Error)]
pub enum GivehrError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("unknown role `{0}`")]
    UnknownRole(String),

    #[error("subject `{subject}` has no covariate series `{name}`")]
    MissingSeries { subject: String, name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cohort contains no visits")]
    NoVisits,

    #[error("no follow-up: every expected visit count is zero")]
    NoFollowUp,

    #[error("singular {what} (condition {condition:.3e}); null direction {direction:?}")]
    Singular {
        what: String,
        condition: f64,
        direction: Vec<f64>,
    },

    #[error(
        "{what} did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})"
    )]
    NonConvergence {
        what: String,
        iterations: usize,
        grad_norm: f64,
    },

    #[error("every observation indicator equals {0}; the observation model is separated")]
    Separation(u8),

    #[error("empty risk set at t = {0}")]
    EmptyRiskSet(f64),

    #[error("{failed} of {total} bootstrap replicates failed (limit 10%)")]
    BootstrapFailure { failed: usize, total: usize },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("unknown estimator `{id}`; registered ids: {registered}")]
    UnknownEstimator { id: String, registered: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<GivehrError>,
    },
}

impl GivehrError {
    /// True for failures of the numerical procedures as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            GivehrError::NoVisits
            | GivehrError::NoFollowUp
            | GivehrError::Singular { .. }
            | GivehrError::NonConvergence { .. }
            | GivehrError::Separation(_)
            | GivehrError::EmptyRiskSet(_)
            | GivehrError::BootstrapFailure { .. } => true,
            GivehrError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            GivehrError::Io(_) => "io",
            GivehrError::Csv(_) => "csv",
            GivehrError::Json(_) => "json",
            GivehrError::Ingest { .. } => "ingest",
            GivehrError::MissingColumn(_) => "missing_column",
            GivehrError::UnknownRole(_) => "unknown_role",
            GivehrError::MissingSeries { .. } => "missing_series",
            GivehrError::Config(_) => "config",
            GivehrError::InvalidInput(_) => "invalid_input",
            GivehrError::NoVisits => "no_visits",
            GivehrError::NoFollowUp => "no_follow_up",
            GivehrError::Singular { .. } => "singular",
            GivehrError::NonConvergence { .. } => "non_convergence",
            GivehrError::Separation(_) => "separation",
            GivehrError::EmptyRiskSet(_) => "empty_risk_set",
            GivehrError::BootstrapFailure { .. } => "bootstrap_failure",
            GivehrError::UnknownScenario(_) => "unknown_scenario",
            GivehrError::UnknownEstimator { .. } => "unknown_estimator",
            GivehrError::Stage { source, .. } => source.kind(),
        }
    }

    pub(crate) fn at(self, stage: Stage) -> GivehrError {
        GivehrError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, GivehrError>;
