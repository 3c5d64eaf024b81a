use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scene::{entity_feature, EntityHypothesis, Scene};
use super::world::WorldSpec;
use crate::geometry::BBox;
use crate::seed;

/// Evaluation regime: what the detector is allowed to get right for free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    PredCls,
    SgCls,
    SgDet,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::PredCls, Task::SgCls, Task::SgDet];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
            Task::SgDet => "sgdet",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            "sgdet" => Ok(Task::SgDet),
            other => Err(format!("unknown task `{other}` (expected predcls, sgcls or sgdet)")),
        }
    }
}

const CORRECT_CONFIDENCE: f64 = 1.0;
const FLIPPED_CONFIDENCE: f64 = 0.5;
const FALSE_POSITIVE_CONFIDENCE: f64 = 0.35;
const MIN_CONFIDENCE: f64 = 0.05;

fn confidence(base: f64, noise: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (base - noise * z.abs()).clamp(MIN_CONFIDENCE, 1.0)
}

fn flip_label(label: usize, classes: usize, rng: &mut impl Rng) -> usize {
    if classes < 2 {
        return label;
    }
    let other = rng.random_range(0..classes - 1);
    if other >= label {
        other + 1
    } else {
        other
    }
}

fn jitter(b: &BBox, scale: f64, rng: &mut impl Rng) -> BBox {
    if scale == 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut n = || -> f64 { StandardNormal.sample(rng) };
    let x1 = (b.x1() + n() * scale * w).clamp(0.0, 1.0);
    let y1 = (b.y1() + n() * scale * h).clamp(0.0, 1.0);
    let x2 = (b.x2() + n() * scale * w).clamp(0.0, 1.0);
    let y2 = (b.y2() + n() * scale * h).clamp(0.0, 1.0);
    let (x1, x2) = (x1.min(x2), x1.max(x2));
    let (y1, y2) = (y1.min(y2), y1.max(y2));
    // keep a strictly positive extent
    let x2 = if x2 - x1 < 1e-3 { (x1 + 1e-3).min(1.0) } else { x2 };
    let x1 = x1.min(x2 - 1e-3);
    let y2 = if y2 - y1 < 1e-3 { (y1 + 1e-3).min(1.0) } else { y2 };
    let y1 = y1.min(y2 - 1e-3);
    BBox::new(x1, y1, x2, y2)
}

/// Simulated concept grounding. Deterministic in `(seed, scene_id, task)`.
pub fn simulate_detector(scene: &Scene, spec: &WorldSpec, task: Task) -> Vec<EntityHypothesis> {
    let cfg = &spec.config;
    let noise = &cfg.detector_noise;
    let classes = cfg.num_entity_classes;
    let mut rng = seed::rng(cfg.seed, "detector", &[scene.scene_id, task.tag()]);
    let mut out = Vec::with_capacity(scene.gt_entities.len());

    for (gi, gt) in scene.gt_entities.iter().enumerate() {
        let (label, bbox, conf) = match task {
            Task::PredCls => (gt.label, gt.bbox, 1.0),
            Task::SgCls | Task::SgDet => {
                if task == Task::SgDet && rng.random::<f64>() < noise.miss_rate {
                    continue;
                }
                let bbox =
                    if task == Task::SgDet { jitter(&gt.bbox, noise.bbox_jitter_scale, &mut rng) } else { gt.bbox };
                let flipped = rng.random::<f64>() < noise.label_flip_prob;
                let label = if flipped { flip_label(gt.label, classes, &mut rng) } else { gt.label };
                let base = if flipped { FLIPPED_CONFIDENCE } else { CORRECT_CONFIDENCE };
                (label, bbox, confidence(base, noise.confidence_noise, &mut rng))
            }
        };
        let feature = entity_feature(spec, label, &bbox, cfg.feature_noise, &mut rng);
        out.push(EntityHypothesis { label, bbox, confidence: conf, feature, gt_index: Some(gi) });
    }

    if task == Task::SgDet {
        let trials = scene.gt_entities.len();
        for _ in 0..trials {
            if rng.random::<f64>() >= noise.false_positive_rate {
                continue;
            }
            let w = rng.random_range(0.05..0.3);
            let h = rng.random_range(0.05..0.3);
            let x1 = rng.random::<f64>() * (1.0 - w);
            let y1 = rng.random::<f64>() * (1.0 - h);
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h);
            let label = rng.random_range(0..classes);
            let conf = confidence(FALSE_POSITIVE_CONFIDENCE, noise.confidence_noise, &mut rng);
            let feature = entity_feature(spec, label, &bbox, cfg.feature_noise, &mut rng);
            out.push(EntityHypothesis { label, bbox, confidence: conf, feature, gt_index: None });
        }
    }

    out.retain(|h| h.confidence >= cfg.min_confidence);
    out
}
