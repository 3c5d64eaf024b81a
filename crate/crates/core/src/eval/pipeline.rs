use crate::ggt::{most_confident, GgtError, GgtModel, InteractionGraph};
use crate::ranking::{rank_and_truncate, PriorMode};
use crate::relation::{PredicatePrediction, RelationError, RelationModel};
use crate::synth::{simulate_detector, EntityHypothesis, Scene, Task, WorldSpec};

use super::metrics::{apply_graph_constraint, Entity, GtTriplet, SceneResult, Triplet};
use super::EvalError;

/// Produces the interaction graph over a scene's hypotheses.
pub trait GraphSampler {
    fn sample(&self, hypotheses: &[EntityHypothesis]) -> Result<InteractionGraph, EvalError>;
    /// Upper bound on nodes per scene; extra hypotheses are dropped by
    /// confidence.
    fn max_nodes(&self) -> usize;
}

/// Assigns a predicate distribution to each edge.
pub trait EdgeClassifier {
    fn classify(
        &self,
        hypotheses: &[EntityHypothesis],
        edges: &[(usize, usize)],
    ) -> Result<Vec<PredicatePrediction>, EvalError>;
}

impl GraphSampler for GgtModel {
    fn sample(&self, hypotheses: &[EntityHypothesis]) -> Result<InteractionGraph, EvalError> {
        Ok(self.sample_graph(hypotheses)?.graph)
    }
    fn max_nodes(&self) -> usize {
        self.config.max_nodes
    }
}

impl EdgeClassifier for RelationModel {
    fn classify(
        &self,
        hypotheses: &[EntityHypothesis],
        edges: &[(usize, usize)],
    ) -> Result<Vec<PredicatePrediction>, EvalError> {
        Ok(RelationModel::classify(self, hypotheses, edges)?)
    }
}

impl From<GgtError> for EvalError {
    fn from(e: GgtError) -> Self {
        EvalError::Model(e.to_string())
    }
}

impl From<RelationError> for EvalError {
    fn from(e: RelationError) -> Self {
        EvalError::Model(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    /// Edges kept after ranking; `usize::MAX` keeps all.
    pub edge_budget: usize,
    pub prior: PriorMode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { edge_budget: 250, prior: PriorMode::Product }
    }
}

/// Hypotheses a task hands to the pipeline.
pub fn task_hypotheses(scene: &Scene, spec: &WorldSpec, task: Task) -> Vec<EntityHypothesis> {
    match task {
        Task::SgDet => scene.hypotheses.clone(),
        _ => simulate_detector(scene, spec, task),
    }
}

pub fn gt_triplets(scene: &Scene) -> Vec<GtTriplet> {
    let ent = |i: usize| Entity { label: scene.gt_entities[i].label, bbox: scene.gt_entities[i].bbox };
    scene.gt_edges.iter().map(|e| GtTriplet { subj: ent(e.subj), predicate: e.predicate, obj: ent(e.obj) }).collect()
}

/// Sample, rank, classify and score one scene. Triplet score is the edge
/// prior times the predicate probability, further scaled by the
/// non-background mass when the classifier has a background output.
pub fn evaluate_scene(
    scene: &Scene,
    spec: &WorldSpec,
    task: Task,
    sampler: &dyn GraphSampler,
    classifier: &dyn EdgeClassifier,
    opts: PipelineOptions,
) -> Result<SceneResult, EvalError> {
    let all = task_hypotheses(scene, spec, task);
    let keep = most_confident(&all, sampler.max_nodes());
    let hyps: Vec<EntityHypothesis> = keep.iter().map(|&i| all[i].clone()).collect();
    let graph =
        if hyps.is_empty() { InteractionGraph { nodes: vec![], edges: vec![] } } else { sampler.sample(&hyps)? };
    let ranked = rank_and_truncate(&graph, opts.edge_budget, opts.prior);
    let edges: Vec<(usize, usize)> = ranked.edges.iter().map(|e| (e.subj, e.obj)).collect();
    let preds = classifier.classify(&graph.nodes, &edges)?;
    let nodes: Vec<Entity> = graph.nodes.iter().map(|h| Entity { label: h.label, bbox: h.bbox }).collect();
    let mut triplets = Vec::with_capacity(preds.len() * spec.num_predicates());
    for (e, p) in ranked.edges.iter().zip(&preds) {
        let fg = 1.0 - p.background_prob;
        for (r, &prob) in p.probs.iter().enumerate() {
            triplets.push(Triplet {
                subj_node: e.subj,
                obj_node: e.obj,
                subj: nodes[e.subj],
                predicate: r,
                obj: nodes[e.obj],
                score: e.prior * prob * fg,
            });
        }
    }
    Ok(SceneResult {
        triplets: apply_graph_constraint(&triplets),
        gt: gt_triplets(scene),
        pred_nodes: nodes,
        pred_edges: edges,
        gt_nodes: scene.gt_entities.iter().map(|g| Entity { label: g.label, bbox: g.bbox }).collect(),
        gt_edges: scene.gt_edges.iter().map(|e| (e.subj, e.obj)).collect(),
    })
}

pub fn evaluate_scenes(
    scenes: &[Scene],
    spec: &WorldSpec,
    task: Task,
    sampler: &dyn GraphSampler,
    classifier: &dyn EdgeClassifier,
    opts: PipelineOptions,
) -> Result<Vec<SceneResult>, EvalError> {
    scenes.iter().map(|s| evaluate_scene(s, spec, task, sampler, classifier, opts)).collect()
}

/// Returns the ground-truth graph, mapped onto hypotheses through
/// `gt_index`. Useful as an upper-bound sampler.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthSampler<'a> {
    pub scene: &'a Scene,
    pub max_nodes: usize,
}

impl GraphSampler for GroundTruthSampler<'_> {
    fn sample(&self, hypotheses: &[EntityHypothesis]) -> Result<InteractionGraph, EvalError> {
        let mut edges = Vec::new();
        for e in &self.scene.gt_edges {
            let find = |g: usize| hypotheses.iter().position(|h| h.gt_index == Some(g));
            if let (Some(a), Some(b)) = (find(e.subj), find(e.obj)) {
                if !edges.contains(&(a, b)) {
                    edges.push((a, b));
                }
            }
        }
        Ok(InteractionGraph { nodes: hypotheses.to_vec(), edges })
    }
    fn max_nodes(&self) -> usize {
        self.max_nodes
    }
}
