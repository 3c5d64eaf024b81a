//! Predicate classification over ranked edges: visual-semantic edge
//! embedding, self-attention encoder, cross-attention decoder over pooled
//! scene context, weighted cross-entropy training.

mod context;
mod embeddings;
mod model;
mod train;

pub use context::{pool_hypotheses, pooled_dim};
pub use embeddings::{load_embedding_table, save_embedding_table, SemanticEmbeddingTable};
pub use model::{PredicatePrediction, RelationForward, RelationModel};
pub use train::{
    example_class_weights, gt_examples, sampled_examples, train_relation, write_relation_csv, RelationEpoch,
    RelationExample, RelationTrainer, CHECKPOINT_NAMESPACE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ggt::GgtError;
use crate::synth::Task;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("invalid relation config: {0}")]
    Config(String),
    #[error("entity class {class} is outside the embedding table ({classes} rows)")]
    UnknownClass { class: usize, classes: usize },
    #[error("edge ({0}, {1}) refers to a missing hypothesis")]
    BadEdge(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no predicate annotations to learn from")]
    EmptyDataset,
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error("embedding table: {0}")]
    Table(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ggt(#[from] GgtError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Where training edges come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    /// Ground-truth edges on hypotheses of `train_task`.
    GtGraphs,
    /// Graphs sampled by a trained decoder on detection hypotheses, matched
    /// to ground truth by endpoint IoU; unmatched edges become background.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelationConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    /// Number of scene-context vectors `M`.
    pub context_vectors: usize,
    pub embedding_dim: usize,
    pub trainable_embeddings: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay applied by the optimizer.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub regime: TrainRegime,
    pub train_task: Task,
    /// Edges kept per sampled graph in the `sampled` regime.
    pub sampled_top_k: usize,
    /// Training-time inverted dropout rate on entity visual features.
    pub feature_dropout: f64,
    /// Zero the semantic vectors `S_i, S_j`.
    pub ablate_semantic: bool,
    /// Skip decoder cross-attention to the scene context.
    pub ablate_context: bool,
    /// Zero the visual features `f_i, f_j` (boxes are kept).
    pub ablate_visual: bool,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 128,
            context_vectors: 4,
            embedding_dim: 32,
            trainable_embeddings: false,
            epochs: 20,
            learning_rate: 0.002,
            weight_decay: 0.0,
            batch_size: 8,
            regime: TrainRegime::GtGraphs,
            train_task: Task::PredCls,
            sampled_top_k: 250,
            feature_dropout: 0.7,
            ablate_semantic: false,
            ablate_context: false,
            ablate_visual: false,
        }
    }
}

impl RelationConfig {
    /// Full-size settings: hidden 256, 2 + 2 layers, 20 epochs at lr 1e-4.
    pub fn full_size() -> Self {
        Self {
            hidden_dim: 256,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 1024,
            embedding_dim: 300,
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RelationError> {
        let bad = |m: &str| Err(RelationError::Config(m.to_string()));
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim must be a positive multiple of num_heads");
        }
        if self.ff_dim == 0 || self.context_vectors == 0 || self.embedding_dim == 0 || self.batch_size == 0 {
            return bad("ff_dim, context_vectors, embedding_dim and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a nonnegative number");
        }
        if !(0.0..1.0).contains(&self.feature_dropout) {
            return bad("feature_dropout must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be a nonnegative number");
        }
        Ok(())
    }

    /// A background output exists only when training on sampled graphs.
    pub fn has_background(&self) -> bool {
        self.regime == TrainRegime::Sampled
    }
}

/// `w_r = Σ counts / count_r`. Classes never observed are counted once so
/// every weight stays finite and positive.
pub fn compute_class_weights(counts: &[usize]) -> Result<Vec<f64>, RelationError> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(RelationError::EmptyDataset);
    }
    let smoothed: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let total: f64 = smoothed.iter().sum();
    Ok(smoothed.iter().map(|&c| total / c).collect())
}
