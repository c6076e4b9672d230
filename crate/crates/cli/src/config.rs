use std::fmt;
use std::path::Path;

use serde::Deserialize;

use ecgnn::datagen::{SizeRanges, TaskKind};
use ecgnn::pipeline::Ablation;

pub const SEED_ENV: &str = "ECGNN_SEED";

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, paths, configs or inputs.
    Usage(String),
    /// A verification check did not pass.
    Check(String),
    /// Training hit a non-finite value.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<ecgnn::Error> for CliError {
    fn from(e: ecgnn::Error) -> Self {
        match e {
            ecgnn::Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// JSON run configuration. Keys mirror the long flag names; flags win.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    // gen
    pub task: Option<TaskKind>,
    pub samples: Option<usize>,
    pub test_samples: Option<usize>,
    pub sizes: Option<String>,
    pub dim: Option<usize>,
    pub noise: Option<f64>,
    pub classes: Option<usize>,
    // train
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub clip_norm: Option<f64>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub fusion_steps: Option<usize>,
    pub cross_modal_after: Option<Vec<usize>>,
    pub ablate: Option<Ablation>,
    // gradcheck
    pub points: Option<usize>,
    pub params: Option<usize>,
    pub full: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn sizes(&self) -> Result<Option<SizeRanges>, CliError> {
        self.sizes
            .as_deref()
            .map(|s| s.parse().map_err(|e: ecgnn::Error| usage(e.to_string())))
            .transpose()
    }
}

/// Flag, then config file, then `ECGNN_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file.seed) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
