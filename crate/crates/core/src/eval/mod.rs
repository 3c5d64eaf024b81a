//! Triplet recall metrics, graph accuracy and the end-to-end task runner.

mod baselines;
mod metrics;
mod pipeline;

pub use baselines::{MatchedRandomSampler, UniformPredicateClassifier};
pub use metrics::{
    apply_graph_constraint, graph_accuracy, iou, match_nodes, match_triplets, mean_graph_accuracy,
    per_predicate_recall, recall_suite, sort_triplets, Entity, GtTriplet, RecallMode, SceneResult, Triplet,
    IOU_THRESHOLD,
};
pub use pipeline::{
    evaluate_scene, evaluate_scenes, gt_triplets, task_hypotheses, EdgeClassifier, GraphSampler, GroundTruthSampler,
    PipelineOptions,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{Task, TripletType};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model failure: {0}")]
    Model(String),
    #[error("invalid evaluation input: {0}")]
    Input(String),
}

pub const RECALL_KS: [usize; 3] = [20, 50, 100];

/// Metrics for one task. `None` marks a metric with no defined scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub scenes: usize,
    /// Edges kept after ranking; `None` means all.
    pub edge_budget: Option<usize>,
    #[serde(rename = "R@20")]
    pub r20: Option<f64>,
    #[serde(rename = "R@50")]
    pub r50: Option<f64>,
    #[serde(rename = "R@100")]
    pub r100: Option<f64>,
    #[serde(rename = "mR@20")]
    pub mr20: Option<f64>,
    #[serde(rename = "mR@50")]
    pub mr50: Option<f64>,
    #[serde(rename = "mR@100")]
    pub mr100: Option<f64>,
    #[serde(rename = "zsR@20")]
    pub zsr20: Option<f64>,
    #[serde(rename = "zsR@50")]
    pub zsr50: Option<f64>,
    #[serde(rename = "zsR@100")]
    pub zsr100: Option<f64>,
    pub graph_acc_unconstrained: Option<f64>,
    pub graph_acc_constrained: Option<f64>,
    /// Predicate id to recall at K = 100.
    pub per_predicate_recall: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn compute(task: Task, results: &[SceneResult], zs_types: &BTreeSet<TripletType>, edge_budget: usize) -> Self {
        let r = |k, m| recall_suite(results, k, m, zs_types);
        use RecallMode::*;
        Self {
            task,
            scenes: results.len(),
            edge_budget: (edge_budget != usize::MAX).then_some(edge_budget),
            r20: r(20, Recall),
            r50: r(50, Recall),
            r100: r(100, Recall),
            mr20: r(20, MeanRecall),
            mr50: r(50, MeanRecall),
            mr100: r(100, MeanRecall),
            zsr20: r(20, ZeroShot),
            zsr50: r(50, ZeroShot),
            zsr100: r(100, ZeroShot),
            graph_acc_unconstrained: mean_graph_accuracy(results, false),
            graph_acc_constrained: mean_graph_accuracy(results, true),
            per_predicate_recall: per_predicate_recall(results, 100),
        }
    }

    pub fn recall(&self, mode: RecallMode, k: usize) -> Option<f64> {
        match (mode, k) {
            (RecallMode::Recall, 20) => self.r20,
            (RecallMode::Recall, 50) => self.r50,
            (RecallMode::Recall, 100) => self.r100,
            (RecallMode::MeanRecall, 20) => self.mr20,
            (RecallMode::MeanRecall, 50) => self.mr50,
            (RecallMode::MeanRecall, 100) => self.mr100,
            (RecallMode::ZeroShot, 20) => self.zsr20,
            (RecallMode::ZeroShot, 50) => self.zsr50,
            (RecallMode::ZeroShot, 100) => self.zsr100,
            _ => None,
        }
    }

    /// Fixed-width table, one row per metric family.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "    -".to_string(), |x| format!("{:5.1}", 100.0 * x));
        let mut s = String::new();
        let budget = self.edge_budget.map_or_else(|| "all".to_string(), |k| k.to_string());
        let _ = writeln!(s, "task {} | scenes {} | edge budget {}", self.task.as_str(), self.scenes, budget);
        let _ = writeln!(s, "{:<8} {:>6} {:>6} {:>6}", "metric", "@20", "@50", "@100");
        for (name, mode) in [("R", RecallMode::Recall), ("mR", RecallMode::MeanRecall), ("zsR", RecallMode::ZeroShot)] {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>6} {:>6}",
                name,
                f(self.recall(mode, 20)),
                f(self.recall(mode, 50)),
                f(self.recall(mode, 100))
            );
        }
        let _ = writeln!(
            s,
            "graph accuracy: unconstrained {} constrained {}",
            f(self.graph_acc_unconstrained),
            f(self.graph_acc_constrained)
        );
        s
    }
}

/// Runs the full pipeline over `scenes` and summarizes it.
pub fn run_task(
    scenes: &[crate::synth::Scene],
    spec: &crate::synth::WorldSpec,
    task: Task,
    sampler: &dyn GraphSampler,
    classifier: &dyn EdgeClassifier,
    zs_types: &BTreeSet<TripletType>,
    opts: PipelineOptions,
) -> Result<(MetricReport, Vec<SceneResult>), EvalError> {
    let results = evaluate_scenes(scenes, spec, task, sampler, classifier, opts)?;
    Ok((MetricReport::compute(task, &results, zs_types, opts.edge_budget), results))
}
