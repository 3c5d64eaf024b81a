use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::synth::TripletType;

pub const IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub label: usize,
    pub bbox: BBox,
}

/// A scored prediction. `subj_node` / `obj_node` identify the predicted
/// entities for the graph constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subj_node: usize,
    pub obj_node: usize,
    pub subj: Entity,
    pub predicate: usize,
    pub obj: Entity,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    pub subj: Entity,
    pub predicate: usize,
    pub obj: Entity,
}

impl GtTriplet {
    pub fn triplet_type(&self) -> TripletType {
        TripletType { subj: self.subj.label, predicate: self.predicate, obj: self.obj.label }
    }
}

/// Score descending, then `(subj_node, obj_node, predicate)` ascending.
pub fn sort_triplets(triplets: &mut [Triplet]) {
    triplets.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then((a.subj_node, a.obj_node, a.predicate).cmp(&(
            b.subj_node,
            b.obj_node,
            b.predicate,
        )))
    });
}

/// Keeps the best-scoring predicate per ordered node pair (lower predicate
/// id on ties). Output is sorted with [`sort_triplets`].
pub fn apply_graph_constraint(triplets: &[Triplet]) -> Vec<Triplet> {
    let mut best: BTreeMap<(usize, usize), Triplet> = BTreeMap::new();
    for t in triplets {
        let key = (t.subj_node, t.obj_node);
        match best.get(&key) {
            Some(b) if b.score > t.score || (b.score == t.score && b.predicate <= t.predicate) => {}
            _ => {
                best.insert(key, *t);
            }
        }
    }
    let mut out: Vec<Triplet> = best.into_values().collect();
    sort_triplets(&mut out);
    out
}

fn matches(p: &Triplet, g: &GtTriplet) -> bool {
    p.predicate == g.predicate
        && p.subj.label == g.subj.label
        && p.obj.label == g.obj.label
        && iou(&p.subj.bbox, &g.subj.bbox) >= IOU_THRESHOLD
        && iou(&p.obj.bbox, &g.obj.bbox) >= IOU_THRESHOLD
}

/// Greedy matching of the first `k` predictions, in order, each taking the
/// first still-unmatched ground truth it fits. Returns per-GT hit flags.
pub fn match_triplets(pred: &[Triplet], gt: &[GtTriplet], k: usize) -> Vec<bool> {
    let mut hit = vec![false; gt.len()];
    for p in pred.iter().take(k) {
        if let Some(g) = (0..gt.len()).find(|&g| !hit[g] && matches(p, &gt[g])) {
            hit[g] = true;
        }
    }
    hit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    Recall,
    MeanRecall,
    ZeroShot,
}

/// Everything the metrics need from one evaluated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    /// Sorted, graph-constrained predictions.
    pub triplets: Vec<Triplet>,
    pub gt: Vec<GtTriplet>,
    pub pred_nodes: Vec<Entity>,
    /// Ranked, truncated interaction-graph edges over `pred_nodes`.
    pub pred_edges: Vec<(usize, usize)>,
    pub gt_nodes: Vec<Entity>,
    pub gt_edges: Vec<(usize, usize)>,
}

/// Recall-family metric averaged over scenes where it is defined; `None`
/// when no scene has any (restricted) ground truth.
pub fn recall_suite(
    scenes: &[SceneResult],
    k: usize,
    mode: RecallMode,
    zs_types: &BTreeSet<TripletType>,
) -> Option<f64> {
    match mode {
        RecallMode::Recall | RecallMode::ZeroShot => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for s in scenes {
                let gt: Vec<GtTriplet> = if mode == RecallMode::ZeroShot {
                    s.gt.iter().filter(|g| zs_types.contains(&g.triplet_type())).copied().collect()
                } else {
                    s.gt.clone()
                };
                if gt.is_empty() {
                    continue;
                }
                let hits = match_triplets(&s.triplets, &gt, k).iter().filter(|h| **h).count();
                sum += hits as f64 / gt.len() as f64;
                count += 1;
            }
            (count > 0).then(|| sum / count as f64)
        }
        RecallMode::MeanRecall => {
            let per = per_predicate_recall(scenes, k);
            (!per.is_empty()).then(|| per.values().sum::<f64>() / per.len() as f64)
        }
    }
}

/// For each predicate with ground truth somewhere, its recall averaged over
/// the scenes that contain it.
pub fn per_predicate_recall(scenes: &[SceneResult], k: usize) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in scenes {
        let hit = match_triplets(&s.triplets, &s.gt, k);
        let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (g, h) in s.gt.iter().zip(&hit) {
            let e = per.entry(g.predicate).or_default();
            e.0 += usize::from(*h);
            e.1 += 1;
        }
        for (p, (h, n)) in per {
            let e = acc.entry(p).or_default();
            e.0 += h as f64 / n as f64;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect()
}

/// Greedy one-to-one node correspondence, highest IoU first; ties by
/// `(pred, gt)` index. Returns `gt -> pred`.
pub fn match_nodes(pred: &[Entity], gt: &[Entity], constrained: bool) -> Vec<Option<usize>> {
    let mut cands = Vec::new();
    for (p, pe) in pred.iter().enumerate() {
        for (g, ge) in gt.iter().enumerate() {
            let v = iou(&pe.bbox, &ge.bbox);
            if v >= IOU_THRESHOLD && (!constrained || pe.label == ge.label) {
                cands.push((v, p, g));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut gt_to_pred = vec![None; gt.len()];
    let mut used = vec![false; pred.len()];
    for (_, p, g) in cands {
        if !used[p] && gt_to_pred[g].is_none() {
            used[p] = true;
            gt_to_pred[g] = Some(p);
        }
    }
    gt_to_pred
}

/// Fraction of distinct ground-truth ordered pairs recovered as predicted
/// edges between matched nodes; `None` for a scene without edges.
pub fn graph_accuracy(scene: &SceneResult, constrained: bool) -> Option<f64> {
    let gt_pairs: BTreeSet<(usize, usize)> = scene.gt_edges.iter().copied().collect();
    if gt_pairs.is_empty() {
        return None;
    }
    let map = match_nodes(&scene.pred_nodes, &scene.gt_nodes, constrained);
    let pred: HashSet<(usize, usize)> = scene.pred_edges.iter().copied().collect();
    let found = gt_pairs
        .iter()
        .filter(|&&(a, b)| matches!((map[a], map[b]), (Some(pa), Some(pb)) if pred.contains(&(pa, pb))))
        .count();
    Some(found as f64 / gt_pairs.len() as f64)
}

/// Scene-macro average of [`graph_accuracy`].
pub fn mean_graph_accuracy(scenes: &[SceneResult], constrained: bool) -> Option<f64> {
    let vals: Vec<f64> = scenes.iter().filter_map(|s| graph_accuracy(s, constrained)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
