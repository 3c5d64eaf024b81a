use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Coarse spatial relation of an ordered (subject, object) box pair.
///
/// Only one direction of a disjoint pair gets a relation (the subject is to
/// the left of, or above, the object); the reverse direction and "subject
/// inside object" have none and never carry an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRelation {
    LeftOf,
    Above,
    Overlapping,
    Containing,
}

impl SpatialRelation {
    pub const COUNT: usize = 4;
    pub const ALL: [SpatialRelation; 4] = [Self::LeftOf, Self::Above, Self::Overlapping, Self::Containing];

    pub fn index(self) -> usize {
        match self {
            Self::LeftOf => 0,
            Self::Above => 1,
            Self::Overlapping => 2,
            Self::Containing => 3,
        }
    }
}

pub fn spatial_relation(subj: &BBox, obj: &BBox) -> Option<SpatialRelation> {
    if subj.contains(obj) {
        return Some(SpatialRelation::Containing);
    }
    if obj.contains(subj) {
        return None;
    }
    if subj.intersection(obj) > 0.0 {
        return Some(SpatialRelation::Overlapping);
    }
    let (sx, sy) = subj.center();
    let (ox, oy) = obj.center();
    let (dx, dy) = (ox - sx, oy - sy);
    if dx.abs() >= dy.abs() {
        (dx > 0.0).then_some(SpatialRelation::LeftOf)
    } else {
        (dy > 0.0).then_some(SpatialRelation::Above)
    }
}

const NESTED_PROB: f64 = 0.15;

/// Random layout of `n` boxes; some boxes are nested inside earlier ones.
pub fn sample_layout(rng: &mut impl Rng, n: usize) -> Vec<BBox> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let parents: Vec<usize> =
            (0..boxes.len()).filter(|&i| boxes[i].width() >= 0.15 && boxes[i].height() >= 0.15).collect();
        let nested = !parents.is_empty() && rng.random::<f64>() < NESTED_PROB;
        let b = if nested {
            let p = boxes[parents[rng.random_range(0..parents.len())]];
            let w = p.width() * rng.random_range(0.3..0.7);
            let h = p.height() * rng.random_range(0.3..0.7);
            let x1 = p.x1() + rng.random::<f64>() * (p.width() - w);
            let y1 = p.y1() + rng.random::<f64>() * (p.height() - h);
            BBox::new(x1, y1, x1 + w, y1 + h)
        } else {
            let w = rng.random_range(0.08..0.35);
            let h = rng.random_range(0.08..0.35);
            let x1 = rng.random::<f64>() * (1.0 - w);
            let y1 = rng.random::<f64>() * (1.0 - h);
            BBox::new(x1, y1, x1 + w, y1 + h)
        };
        boxes.push(b);
    }
    boxes
}
