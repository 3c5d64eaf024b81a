use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layout::{sample_layout, spatial_relation};
use super::world::WorldSpec;
use crate::geometry::BBox;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtEntity {
    pub label: usize,
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtEdge {
    pub subj: usize,
    pub predicate: usize,
    pub obj: usize,
    /// Set on test edges whose triplet type was held out of training.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_shot: bool,
}

/// One detected (or oracle) entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityHypothesis {
    pub label: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub feature: Vec<f64>,
    /// Ground-truth entity this hypothesis came from; `None` for false positives.
    #[serde(default)]
    pub gt_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub scene_id: u64,
    pub gt_entities: Vec<GtEntity>,
    pub gt_edges: Vec<GtEdge>,
    /// Detection-mode (`sgdet`) hypotheses; other modes are re-simulated.
    pub hypotheses: Vec<EntityHypothesis>,
}

impl Scene {
    /// Checks box validity, index ranges, self-loops and duplicate triplets.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.gt_entities.len();
        if let Some(e) = self.gt_entities.iter().find(|e| !e.bbox.is_valid()) {
            return Err(format!("invalid box {:?}", e.bbox));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.gt_edges {
            if e.subj >= n || e.obj >= n {
                return Err(format!("edge {e:?} out of range"));
            }
            if e.subj == e.obj {
                return Err(format!("self-loop {e:?}"));
            }
            if !seen.insert((e.subj, e.predicate, e.obj)) {
                return Err(format!("duplicate triplet {e:?}"));
            }
        }
        if let Some(h) = self.hypotheses.iter().find(|h| !(h.confidence > 0.0 && h.confidence <= 1.0)) {
            return Err(format!("confidence {} outside (0, 1]", h.confidence));
        }
        Ok(())
    }
}

/// Prototype of `label` plus optional Gaussian noise, with the box
/// coordinates added onto the trailing (up to four) dimensions.
pub(crate) fn entity_feature(spec: &WorldSpec, label: usize, bbox: &BBox, noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let d = spec.feature_dim();
    let mut f = spec.prototypes[label].clone();
    if noise > 0.0 {
        for v in &mut f {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise * z;
        }
    }
    let k = d.min(4);
    for (slot, coord) in f[d - k..].iter_mut().zip(bbox.0) {
        *slot += coord;
    }
    f
}

/// Deterministic in `(spec.config.seed, scene_seed)`.
pub fn generate_scene(spec: &WorldSpec, scene_seed: u64) -> Scene {
    let cfg = &spec.config;
    let rules = &spec.relation_rules;
    let mut rng = seed::rng(cfg.seed, "scene", &[scene_seed]);
    let scene_type = rng.random_range(0..cfg.num_scene_types);
    let (lo, hi) = spec.entity_band(scene_type);
    let n = rng.random_range(lo..=hi);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_entity_classes)).collect();
    let boxes = sample_layout(&mut rng, n);
    let gt_entities: Vec<GtEntity> = labels
        .iter()
        .zip(&boxes)
        .map(|(&label, &bbox)| GtEntity { label, bbox, feature: entity_feature(spec, label, &bbox, 0.0, &mut rng) })
        .collect();

    let mut gt_edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let Some(rel) = spatial_relation(&boxes[i], &boxes[j]) else {
                continue;
            };
            if rng.random::<f64>() >= rules.edge_probability(labels[i], labels[j], rel) {
                continue;
            }
            let dist = rules.predicate_distribution(scene_type, labels[i], labels[j], rel);
            let predicate = WeightedIndex::new(dist).expect("valid distribution").sample(&mut rng);
            gt_edges.push(GtEdge { subj: i, predicate, obj: j, zero_shot: false });
        }
    }

    let mut scene = Scene { scene_id: scene_seed, gt_entities, gt_edges, hypotheses: Vec::new() };
    scene.hypotheses = super::simulate_detector(&scene, spec, super::Task::SgDet);
    scene
}
