//! Reproducible experiment runs: TOML configuration, on-disk layout,
//! run manifests and the commands behind the command-line tool.

mod commands;
mod config;

pub use commands::{
    cmd_eval, cmd_report, cmd_sweep_topk, cmd_synth, cmd_train_ggt, cmd_train_rel, dataset_hash, load_dataset,
    load_ggt, load_relation, read_manifest, SweepRow, SynthSummary, TrainOptions,
};
pub use config::{DatasetConfig, EdgeBudget, EvalConfig, ExperimentConfig, Layout, RunManifest, Seeds};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::EvalError;
use crate::ggt::GgtError;
use crate::relation::RelationError;
use crate::synth::SynthError;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl ExperimentError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numerical(_) => 4,
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for ExperimentError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(format!("json: {e}"))
    }
}

impl From<SynthError> for ExperimentError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) | SynthError::EmptyRules { .. } => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

fn tensor_error(e: &TensorError) -> ExperimentError {
    match e {
        TensorError::NonFiniteGradient { .. } => ExperimentError::Numerical(e.to_string()),
        _ => ExperimentError::Data(e.to_string()),
    }
}

impl From<CheckpointError> for ExperimentError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(format!("checkpoint: {e}"))
    }
}

impl From<GgtError> for ExperimentError {
    fn from(e: GgtError) -> Self {
        match &e {
            GgtError::Config(_) => Self::Config(e.to_string()),
            GgtError::NonFiniteLoss { .. } => Self::Numerical(e.to_string()),
            GgtError::Tensor(t) => tensor_error(t),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<RelationError> for ExperimentError {
    fn from(e: RelationError) -> Self {
        match e {
            RelationError::Config(_) => Self::Config(e.to_string()),
            RelationError::NonFiniteLoss { .. } => Self::Numerical(e.to_string()),
            RelationError::Tensor(ref t) => tensor_error(t),
            RelationError::Ggt(g) => g.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for ExperimentError {
    fn from(e: EvalError) -> Self {
        Self::Data(e.to_string())
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
