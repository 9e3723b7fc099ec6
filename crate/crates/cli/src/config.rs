//! Run configuration: an optional JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use givehr::dataset::{ColumnSchema, CovariateSpec};
use givehr::error::{GivehrError, Result};
use serde::{Deserialize, Serialize};

/// Contents of `--config`. Every field is optional; flags override file values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub coefficients: Option<PathBuf>,
    pub roles: Option<CovariateSpec>,
    pub columns: Option<ColumnSchema>,
    pub tau: Option<f64>,
    pub scenario: Option<String>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub boot_reps: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub se: Option<String>,
    pub ci_level: Option<f64>,
    pub max_condition: Option<f64>,
    pub threads: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| GivehrError::Config(format!("{}: {e}", path.display())))
    }
}

/// Read a covariate-role document. Serde names any missing role key.
pub fn load_roles(path: &Path) -> Result<CovariateSpec> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| GivehrError::Config(format!("roles {}: {e}", path.display())))
}

pub fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| {
        GivehrError::Config(format!(
            "missing `{what}` (pass --{} or set it in --config)",
            what.replace('_', "-")
        ))
    })
}

/// Effective settings of a `fit` run; hashed into the output headers.
#[derive(Debug, Clone, Serialize)]
pub struct FitSettings {
    pub input: PathBuf,
    pub roles: CovariateSpec,
    pub columns: ColumnSchema,
    pub tau: Option<f64>,
    pub se: String,
    pub boot_reps: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub max_condition: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSettings {
    pub scenario: String,
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
}
