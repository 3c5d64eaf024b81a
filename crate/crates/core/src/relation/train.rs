use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{compute_class_weights, RelationConfig, RelationError, RelationModel, SemanticEmbeddingTable};
use crate::ggt::{most_confident, GgtModel};
use crate::ranking::{rank_and_truncate, PriorMode};
use crate::seed;
use crate::synth::{simulate_detector, EntityHypothesis, Scene, Task, WorldSpec};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{argmax, Adam, AdamConfig, Tape};

pub const CHECKPOINT_NAMESPACE: &str = "rel";

/// Labeled edges of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationExample {
    pub hypotheses: Vec<EntityHypothesis>,
    pub edges: Vec<(usize, usize)>,
    /// Predicate id per edge; `num_predicates` marks background.
    pub targets: Vec<usize>,
}

/// Ground-truth edges mapped onto the hypotheses of `task`; edges with an
/// undetected endpoint are dropped.
pub fn gt_examples(scenes: &[Scene], spec: &WorldSpec, task: Task) -> Vec<RelationExample> {
    scenes
        .iter()
        .filter_map(|s| {
            let hypotheses = if task == Task::SgDet { s.hypotheses.clone() } else { simulate_detector(s, spec, task) };
            let mut to_hyp = vec![None; s.gt_entities.len()];
            for (h, hyp) in hypotheses.iter().enumerate() {
                if let Some(g) = hyp.gt_index {
                    to_hyp[g].get_or_insert(h);
                }
            }
            let (mut edges, mut targets) = (Vec::new(), Vec::new());
            for e in &s.gt_edges {
                if let (Some(a), Some(b)) = (to_hyp[e.subj], to_hyp[e.obj]) {
                    edges.push((a, b));
                    targets.push(e.predicate);
                }
            }
            (!edges.is_empty()).then_some(RelationExample { hypotheses, edges, targets })
        })
        .collect()
}

/// Top-`k` graphs sampled by `ggt` on detection hypotheses. An edge takes
/// the predicate of the first ground-truth edge whose endpoints both overlap
/// it with IoU >= 0.5, otherwise the background id `num_predicates`.
pub fn sampled_examples(
    scenes: &[Scene],
    spec: &WorldSpec,
    ggt: &GgtModel,
    k: usize,
    mode: PriorMode,
) -> Result<Vec<RelationExample>, RelationError> {
    let background = spec.num_predicates();
    let mut out = Vec::new();
    for s in scenes {
        let keep = most_confident(&s.hypotheses, ggt.config.max_nodes);
        let hypotheses: Vec<EntityHypothesis> = keep.iter().map(|&i| s.hypotheses[i].clone()).collect();
        let sampled = ggt.sample_graph(&hypotheses)?;
        let ranked = rank_and_truncate(&sampled.graph, k, mode);
        let (mut edges, mut targets) = (Vec::new(), Vec::new());
        for e in &ranked.edges {
            let (a, b) = (&hypotheses[e.subj].bbox, &hypotheses[e.obj].bbox);
            let hit = s
                .gt_edges
                .iter()
                .find(|g| a.iou(&s.gt_entities[g.subj].bbox) >= 0.5 && b.iou(&s.gt_entities[g.obj].bbox) >= 0.5);
            edges.push((e.subj, e.obj));
            targets.push(hit.map_or(background, |g| g.predicate));
        }
        if !edges.is_empty() {
            out.push(RelationExample { hypotheses, edges, targets });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RelationTrainer {
    pub model: RelationModel,
    pub adam: Adam,
    pub class_weights: Vec<f64>,
    pub epoch: usize,
    pub seed: u64,
}

impl RelationTrainer {
    pub fn new(
        config: RelationConfig,
        num_predicates: usize,
        feature_dim: usize,
        table: &SemanticEmbeddingTable,
        class_weights: Vec<f64>,
        seed: u64,
    ) -> Result<Self, RelationError> {
        let mut rng = seed::rng(seed, "rel-init", &[]);
        let opt = AdamConfig { weight_decay: config.weight_decay, ..AdamConfig::with_lr(config.learning_rate) };
        let model = RelationModel::new(config, num_predicates, feature_dim, table, &mut rng)?;
        if class_weights.len() != model.num_outputs() || class_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(RelationError::Config(format!(
                "need {} positive class weights, got {:?}",
                model.num_outputs(),
                class_weights
            )));
        }
        let adam = Adam::new(&model.store, opt)?;
        Ok(Self { model, adam, class_weights, epoch: 0, seed })
    }

    /// Weighted cross-entropy of one scene, recorded on `tape`.
    /// Without `rng` the pass is deterministic (no dropout).
    pub fn example_loss(
        &self,
        tape: &mut Tape,
        ex: &RelationExample,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(crate::tensor::Var, usize), RelationError> {
        let f = match rng {
            Some(rng) => self.model.forward_train(tape, &ex.hypotheses, &ex.edges, rng)?,
            None => self.model.forward(tape, &ex.hypotheses, &ex.edges)?,
        };
        let w: Vec<f64> = ex.targets.iter().map(|&t| self.class_weights[t]).collect();
        let loss = tape.weighted_ce(f.probs, &ex.targets, &w)?;
        let outputs = self.model.num_outputs();
        let correct = tape.data(f.probs).chunks(outputs).zip(&ex.targets).filter(|(row, &t)| argmax(row) == t).count();
        Ok((loss, correct))
    }

    pub fn train_epoch(&mut self, examples: &[RelationExample]) -> Result<RelationEpoch, RelationError> {
        if examples.is_empty() {
            return Err(RelationError::EmptyDataset);
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seed::rng(self.seed, "rel-epoch", &[epoch as u64]));
        let mut drop_rng = seed::rng(self.seed, "rel-dropout", &[epoch as u64]);
        let (mut total, mut correct, mut edges) = (0.0, 0usize, 0usize);
        for (batch, chunk) in order.chunks(self.model.config.batch_size).enumerate() {
            self.model.store.zero_grad();
            for &i in chunk {
                let mut tape = Tape::new();
                let (loss, hits) = self.example_loss(&mut tape, &examples[i], Some(&mut drop_rng))?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(RelationError::NonFiniteLoss { epoch, batch, value });
                }
                total += value;
                correct += hits;
                edges += examples[i].edges.len();
                tape.backward(loss)?;
                self.model.store.accumulate_grads(&tape);
            }
            self.model.store.scale_grads(1.0 / chunk.len() as f64);
            self.adam.step(&mut self.model.store)?;
        }
        self.model.store.zero_grad();
        self.epoch = epoch;
        Ok(RelationEpoch { epoch, loss: total / examples.len() as f64, accuracy: correct as f64 / edges as f64 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(CHECKPOINT_NAMESPACE, &self.model.store, Some(&self.adam));
        let meta = &mut ck.metadata;
        meta.insert("rel.config".into(), serde_json::to_string(&self.model.config).expect("config serializes"));
        meta.insert("rel.num_predicates".into(), self.model.num_predicates.to_string());
        meta.insert("rel.feature_dim".into(), self.model.feature_dim.to_string());
        meta.insert("rel.class_weights".into(), serde_json::to_string(&self.class_weights).expect("weights serialize"));
        meta.insert("rel.epoch".into(), self.epoch.to_string());
        meta.insert("rel.seed".into(), self.seed.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RelationError> {
        let get = |k: &str| ck.metadata.get(k).ok_or_else(|| CheckpointError::Missing(format!("metadata {k}")));
        let malformed = |k: &str| CheckpointError::Malformed(format!("metadata {k}"));
        let parse = |k: &str| -> Result<u64, RelationError> { Ok(get(k)?.parse().map_err(|_| malformed(k))?) };
        let config: RelationConfig = serde_json::from_str(get("rel.config")?).map_err(|_| malformed("rel.config"))?;
        let weights: Vec<f64> =
            serde_json::from_str(get("rel.class_weights")?).map_err(|_| malformed("rel.class_weights"))?;
        let name = format!("{CHECKPOINT_NAMESPACE}.semantic_table");
        let t = ck.tensor(&name).ok_or(CheckpointError::Missing(name))?;
        let (classes, dim) = t.dims2()?;
        let table = SemanticEmbeddingTable { dim, rows: t.data().chunks(dim).map(<[f64]>::to_vec).collect() };
        debug_assert_eq!(table.rows.len(), classes);
        let mut tr = Self::new(
            config,
            parse("rel.num_predicates")? as usize,
            parse("rel.feature_dim")? as usize,
            &table,
            weights,
            parse("rel.seed")?,
        )?;
        ck.load_into(CHECKPOINT_NAMESPACE, &mut tr.model.store)?;
        if let Some(adam) = ck.restore_optimizer(CHECKPOINT_NAMESPACE, &tr.model.store)? {
            tr.adam = adam;
        }
        tr.epoch = parse("rel.epoch")? as usize;
        Ok(tr)
    }
}

/// Class weights from the example targets over `outputs` classes.
pub fn example_class_weights(examples: &[RelationExample], outputs: usize) -> Result<Vec<f64>, RelationError> {
    let mut counts = vec![0usize; outputs];
    for ex in examples {
        for &t in &ex.targets {
            counts[t] += 1;
        }
    }
    compute_class_weights(&counts)
}

/// Fresh model trained for `config.epochs` on `examples`.
pub fn train_relation(
    examples: &[RelationExample],
    spec: &WorldSpec,
    table: &SemanticEmbeddingTable,
    config: &RelationConfig,
    seed: u64,
) -> Result<(RelationTrainer, Vec<RelationEpoch>), RelationError> {
    let outputs = spec.num_predicates() + usize::from(config.has_background());
    let weights = example_class_weights(examples, outputs)?;
    let mut tr = RelationTrainer::new(config.clone(), spec.num_predicates(), spec.feature_dim(), table, weights, seed)?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(tr.train_epoch(examples)?);
    }
    Ok((tr, log))
}

pub fn write_relation_csv(path: &Path, log: &[RelationEpoch]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,loss,accuracy")?;
    for e in log {
        writeln!(f, "{},{},{}", e.epoch, e.loss, e.accuracy)?;
    }
    f.flush()
}
