//! Autoregressive interaction-graph decoder: one adjacency row per node,
//! nodes visited in detector-confidence order.

mod loss;
mod model;
mod train;

pub use loss::{ggt_loss, GgtLoss};
pub use model::{GgtModel, StepOutput};
pub use train::{
    example_loss, example_total_loss, make_example, most_confident, prepare_examples, train_ggt, write_loss_csv,
    EpochLoss, GgtExample, GgtTrainer, CHECKPOINT_NAMESPACE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{EntityHypothesis, Task};
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GgtError {
    #[error("invalid ggt config: {0}")]
    Config(String),
    #[error("{n} nodes exceed the decoder capacity of {max}")]
    TooManyNodes { n: usize, max: usize },
    #[error("adjacency target must be binary; found {0}")]
    NonBinaryTarget(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GgtConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Width of every decoded adjacency row; scenes with more hypotheses are
    /// cut to the most confident `max_nodes`.
    pub max_nodes: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Detector regime whose hypotheses are used as teacher-forced input.
    pub train_task: Task,
    /// Replace detector labels with the auxiliary head's predictions.
    pub node_sampling: bool,
}

impl Default for GgtConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 64,
            max_nodes: 16,
            gamma: 0.5,
            lambda: 0.75,
            epochs: 30,
            learning_rate: 0.002,
            batch_size: 8,
            train_task: Task::PredCls,
            node_sampling: false,
        }
    }
}

impl GgtConfig {
    /// Full-size settings: hidden 256, 6 layers, 50 epochs at lr 1e-3.
    pub fn full_size() -> Self {
        Self {
            hidden_dim: 256,
            num_layers: 6,
            num_heads: 8,
            ff_dim: 1024,
            epochs: 50,
            learning_rate: 0.001,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GgtError> {
        let bad = |m: &str| Err(GgtError::Config(m.to_string()));
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim must be a positive multiple of num_heads");
        }
        if self.ff_dim == 0 || self.max_nodes == 0 || self.batch_size == 0 {
            return bad("ff_dim, max_nodes and batch_size must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie strictly between 0 and 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a nonnegative number");
        }
        Ok(())
    }
}

/// Hypothesis indices by confidence descending, ties by index ascending.
pub fn order_nodes(hypotheses: &[EntityHypothesis]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..hypotheses.len()).collect();
    idx.sort_by(|&a, &b| hypotheses[b].confidence.total_cmp(&hypotheses[a].confidence).then(a.cmp(&b)));
    idx
}

/// Decoded edge probabilities in original hypothesis indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    pub n: usize,
    pub probs: Vec<Vec<f64>>,
    pub binary: Option<Vec<Vec<bool>>>,
}

impl AdjacencyMatrix {
    /// Sets `binary[i][j] = probs[i][j] > gamma`, diagonal off.
    pub fn threshold(&mut self, gamma: f64) {
        self.binary =
            Some((0..self.n).map(|i| (0..self.n).map(|j| i != j && self.probs[i][j] > gamma).collect()).collect());
    }

    /// Row-major `(subj, obj)` pairs of the thresholded matrix.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let Some(b) = &self.binary else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (i, row) in b.iter().enumerate() {
            for (j, &on) in row.iter().enumerate() {
                if on {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Nodes plus unlabeled directed edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    pub nodes: Vec<EntityHypothesis>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledGraph {
    pub graph: InteractionGraph,
    pub adjacency: AdjacencyMatrix,
    /// Argmax of the auxiliary label head per node, original indexing.
    pub aux_labels: Vec<usize>,
}

/// Binary adjacency among `hypotheses` implied by ground-truth edges,
/// through each hypothesis' `gt_index`.
pub fn target_adjacency(hypotheses: &[EntityHypothesis], gt_edges: &[crate::synth::GtEdge]) -> Vec<Vec<bool>> {
    let n = hypotheses.len();
    let mut a = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if let (Some(gi), Some(gj)) = (hypotheses[i].gt_index, hypotheses[j].gt_index) {
                a[i][j] = gt_edges.iter().any(|e| e.subj == gi && e.obj == gj);
            }
        }
    }
    a
}
