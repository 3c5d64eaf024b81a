use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::loss_on_tape;
use super::{order_nodes, target_adjacency, GgtConfig, GgtError, GgtModel};
use crate::seed;
use crate::synth::{simulate_detector, EntityHypothesis, Scene, Task, WorldSpec};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{Adam, AdamConfig, Tape, Var};

pub const CHECKPOINT_NAMESPACE: &str = "ggt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(rename = "L_A")]
    pub adjacency: f64,
    #[serde(rename = "L_S")]
    pub semantic: f64,
    pub total: f64,
}

/// One teacher-forcing example: nodes in decode order and their target rows.
#[derive(Debug, Clone)]
pub struct GgtExample {
    pub nodes: Vec<EntityHypothesis>,
    /// `n x n` binary target in decode order.
    pub target: Vec<Vec<f64>>,
    /// Same rows padded to `max_nodes`, fed back as context.
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Indices of the `max` most confident hypotheses, in ascending index order.
pub fn most_confident(hypotheses: &[EntityHypothesis], max: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = order_nodes(hypotheses).into_iter().take(max).collect();
    keep.sort_unstable();
    keep
}

pub fn make_example(hypotheses: &[EntityHypothesis], scene: &Scene, max_nodes: usize) -> GgtExample {
    let keep = most_confident(hypotheses, max_nodes);
    let kept: Vec<EntityHypothesis> = keep.iter().map(|&i| hypotheses[i].clone()).collect();
    let order = order_nodes(&kept);
    let nodes: Vec<EntityHypothesis> = order.iter().map(|&i| kept[i].clone()).collect();
    let adj = target_adjacency(&nodes, &scene.gt_edges);
    let n = nodes.len();
    let target: Vec<Vec<f64>> = adj.iter().map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect()).collect();
    let rows = target
        .iter()
        .map(|r| {
            let mut row = r.clone();
            row.resize(max_nodes, 0.0);
            row
        })
        .collect();
    let labels = nodes.iter().map(|h| h.label).collect();
    debug_assert_eq!(target.len(), n);
    GgtExample { nodes, target, rows, labels }
}

/// Examples for every scene with at least one hypothesis under `task`.
pub fn prepare_examples(scenes: &[Scene], spec: &WorldSpec, task: Task, max_nodes: usize) -> Vec<GgtExample> {
    scenes
        .iter()
        .filter_map(|s| {
            let hyps = if task == Task::SgDet { s.hypotheses.clone() } else { simulate_detector(s, spec, task) };
            (!hyps.is_empty()).then(|| make_example(&hyps, s, max_nodes))
        })
        .collect()
}

/// Losses of one example, recorded on `tape`.
pub fn example_loss(model: &GgtModel, tape: &mut Tape, ex: &GgtExample) -> Result<super::GgtLoss, GgtError> {
    let (probs, logits) = model.forward(tape, &ex.nodes, &ex.rows)?;
    let v = loss_on_tape(tape, probs, logits, &ex.target, &ex.labels, model.config.lambda)?;
    Ok(super::GgtLoss {
        total: tape.value(v.total).item(),
        adjacency: tape.value(v.adjacency).item(),
        semantic: tape.value(v.semantic).item(),
    })
}

/// Total loss of one example as a tape variable, ready for `backward`.
pub fn example_total_loss(model: &GgtModel, tape: &mut Tape, ex: &GgtExample) -> Result<Var, GgtError> {
    let (probs, logits) = model.forward(tape, &ex.nodes, &ex.rows)?;
    Ok(loss_on_tape(tape, probs, logits, &ex.target, &ex.labels, model.config.lambda)?.total)
}

#[derive(Debug, Clone)]
pub struct GgtTrainer {
    pub model: GgtModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl GgtTrainer {
    pub fn new(config: GgtConfig, num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self, GgtError> {
        let mut rng = seed::rng(seed, "ggt-init", &[]);
        let lr = config.learning_rate;
        let model = GgtModel::new(config, num_classes, feature_dim, &mut rng)?;
        let adam = Adam::new(&model.store, AdamConfig::with_lr(lr))?;
        Ok(Self { model, adam, epoch: 0, seed })
    }

    /// Runs one pass over `examples` in a seed- and epoch-derived order.
    pub fn train_epoch(&mut self, examples: &[GgtExample]) -> Result<EpochLoss, GgtError> {
        if examples.is_empty() {
            return Err(GgtError::EmptyDataset);
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seed::rng(self.seed, "ggt-epoch", &[epoch as u64]));
        let (mut la, mut ls, mut tot) = (0.0, 0.0, 0.0);
        for (batch, chunk) in order.chunks(self.model.config.batch_size).enumerate() {
            self.model.store.zero_grad();
            for &i in chunk {
                let mut tape = Tape::new();
                let (probs, logits) = self.model.forward(&mut tape, &examples[i].nodes, &examples[i].rows)?;
                let ex = &examples[i];
                let v = loss_on_tape(&mut tape, probs, logits, &ex.target, &ex.labels, self.model.config.lambda)?;
                let total = tape.value(v.total).item();
                if !total.is_finite() {
                    return Err(GgtError::NonFiniteLoss { epoch, batch, value: total });
                }
                la += tape.value(v.adjacency).item();
                ls += tape.value(v.semantic).item();
                tot += total;
                tape.backward(v.total)?;
                self.model.store.accumulate_grads(&tape);
            }
            self.model.store.scale_grads(1.0 / chunk.len() as f64);
            self.adam.step(&mut self.model.store)?;
        }
        self.model.store.zero_grad();
        self.epoch = epoch;
        let m = examples.len() as f64;
        Ok(EpochLoss { epoch, adjacency: la / m, semantic: ls / m, total: tot / m })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(CHECKPOINT_NAMESPACE, &self.model.store, Some(&self.adam));
        let meta = &mut ck.metadata;
        meta.insert("ggt.config".into(), serde_json::to_string(&self.model.config).expect("config serializes"));
        meta.insert("ggt.num_classes".into(), self.model.num_classes.to_string());
        meta.insert("ggt.feature_dim".into(), self.model.feature_dim.to_string());
        meta.insert("ggt.epoch".into(), self.epoch.to_string());
        meta.insert("ggt.seed".into(), self.seed.to_string());
        ck
    }

    /// Rebuilds model, optimizer state and epoch counter from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GgtError> {
        let get = |k: &str| ck.metadata.get(k).ok_or_else(|| CheckpointError::Missing(format!("metadata {k}")));
        let parse = |k: &str| -> Result<u64, GgtError> {
            get(k)?.parse().map_err(|_| CheckpointError::Malformed(format!("metadata {k}")).into())
        };
        let config: GgtConfig = serde_json::from_str(get("ggt.config")?)
            .map_err(|e| CheckpointError::Malformed(format!("ggt.config: {e}")))?;
        let mut t = Self::new(
            config,
            parse("ggt.num_classes")? as usize,
            parse("ggt.feature_dim")? as usize,
            parse("ggt.seed")?,
        )?;
        ck.load_into(CHECKPOINT_NAMESPACE, &mut t.model.store)?;
        if let Some(adam) = ck.restore_optimizer(CHECKPOINT_NAMESPACE, &t.model.store)? {
            t.adam = adam;
        }
        t.epoch = parse("ggt.epoch")? as usize;
        Ok(t)
    }
}

/// Trains for `config.epochs` epochs from a fresh initialization.
pub fn train_ggt(
    scenes: &[Scene],
    spec: &WorldSpec,
    config: &GgtConfig,
    seed: u64,
) -> Result<(GgtTrainer, Vec<EpochLoss>), GgtError> {
    let examples = prepare_examples(scenes, spec, config.train_task, config.max_nodes);
    let mut trainer = GgtTrainer::new(config.clone(), spec.num_classes(), spec.feature_dim(), seed)?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(trainer.train_epoch(&examples)?);
    }
    Ok((trainer, log))
}

pub fn write_loss_csv(path: &Path, log: &[EpochLoss]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,L_A,L_S,total")?;
    for e in log {
        writeln!(f, "{},{},{},{}", e.epoch, e.adjacency, e.semantic, e.total)?;
    }
    f.flush()
}
