//! Brute-force reference scorer, written without the library's metric code.

use std::collections::{BTreeMap, BTreeSet};

use scenegraph::eval::{Entity, GtTriplet, Triplet};
use scenegraph::geometry::BBox;
use scenegraph::synth::TripletType;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.0[2].min(b.0[2]) - a.0[0].max(b.0[0])).max(0.0);
    let h = (a.0[3].min(b.0[3]) - a.0[1].max(b.0[1])).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |x: &BBox| (x.0[2] - x.0[0]) * (x.0[3] - x.0[1]);
    inter / (area(a) + area(b) - inter)
}

/// `a` ranks before `b`: higher score, then smaller (subj, obj, predicate).
fn ranks_before(a: &Triplet, b: &Triplet) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    (a.subj_node, a.obj_node, a.predicate) < (b.subj_node, b.obj_node, b.predicate)
}

/// Selection sort by `ranks_before`.
pub fn ordered(triplets: &[Triplet]) -> Vec<Triplet> {
    let mut rest = triplets.to_vec();
    let mut out = Vec::new();
    while !rest.is_empty() {
        let mut best = 0;
        for i in 1..rest.len() {
            if ranks_before(&rest[i], &rest[best]) {
                best = i;
            }
        }
        out.push(rest.remove(best));
    }
    out
}

/// A triplet survives if no other triplet on its node pair beats it.
pub fn constrain(triplets: &[Triplet]) -> Vec<Triplet> {
    let beats = |o: &Triplet, t: &Triplet| o.score > t.score || (o.score == t.score && o.predicate < t.predicate);
    let mut kept: Vec<Triplet> = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        let same_pair = |o: &Triplet| o.subj_node == t.subj_node && o.obj_node == t.obj_node;
        let dominated = triplets.iter().enumerate().any(|(j, o)| j != i && same_pair(o) && beats(o, t));
        // exact duplicates: keep the first
        let earlier_twin =
            triplets[..i].iter().any(|o| same_pair(o) && o.score == t.score && o.predicate == t.predicate);
        if !dominated && !earlier_twin {
            kept.push(*t);
        }
    }
    ordered(&kept)
}

fn fits(p: &Triplet, g: &GtTriplet) -> bool {
    p.predicate == g.predicate
        && p.subj.label == g.subj.label
        && p.obj.label == g.obj.label
        && box_iou(&p.subj.bbox, &g.subj.bbox) >= 0.5
        && box_iou(&p.obj.bbox, &g.obj.bbox) >= 0.5
}

/// Which ground truths are hit by the top `k` of the sorted predictions.
pub fn hits(sorted: &[Triplet], gt: &[GtTriplet], k: usize) -> Vec<bool> {
    let mut taken = vec![false; gt.len()];
    for p in &sorted[..k.min(sorted.len())] {
        for (g, gt_t) in gt.iter().enumerate() {
            if !taken[g] && fits(p, gt_t) {
                taken[g] = true;
                break;
            }
        }
    }
    taken
}

pub struct OracleScene {
    /// Raw, unconstrained predictions.
    pub raw: Vec<Triplet>,
    pub gt: Vec<GtTriplet>,
    pub pred_nodes: Vec<Entity>,
    pub pred_edges: Vec<(usize, usize)>,
    pub gt_nodes: Vec<Entity>,
    pub gt_edges: Vec<(usize, usize)>,
}

fn ttype(g: &GtTriplet) -> TripletType {
    TripletType { subj: g.subj.label, predicate: g.predicate, obj: g.obj.label }
}

pub fn recall(scenes: &[OracleScene], k: usize, zs: Option<&BTreeSet<TripletType>>) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in scenes {
        let gt: Vec<GtTriplet> = s.gt.iter().filter(|g| zs.is_none_or(|z| z.contains(&ttype(g)))).copied().collect();
        if gt.is_empty() {
            continue;
        }
        let h = hits(&constrain(&s.raw), &gt, k);
        total += h.iter().filter(|x| **x).count() as f64 / gt.len() as f64;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(total / n as f64)
    }
}

pub fn per_predicate(scenes: &[OracleScene], k: usize) -> BTreeMap<usize, f64> {
    let predicates: BTreeSet<usize> = scenes.iter().flat_map(|s| s.gt.iter().map(|g| g.predicate)).collect();
    let mut out = BTreeMap::new();
    for p in predicates {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in scenes {
            let h = hits(&constrain(&s.raw), &s.gt, k);
            let idx: Vec<usize> = (0..s.gt.len()).filter(|&i| s.gt[i].predicate == p).collect();
            if idx.is_empty() {
                continue;
            }
            total += idx.iter().filter(|&&i| h[i]).count() as f64 / idx.len() as f64;
            n += 1;
        }
        out.insert(p, total / n as f64);
    }
    out
}

pub fn mean_recall(scenes: &[OracleScene], k: usize) -> Option<f64> {
    let per = per_predicate(scenes, k);
    if per.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for v in per.values() {
        sum += v;
    }
    Some(sum / per.len() as f64)
}

/// Candidate pairs `(iou, pred, gt)` in decreasing priority.
fn candidates(pred: &[Entity], gt: &[Entity], constrained: bool) -> Vec<(f64, usize, usize)> {
    let mut c = Vec::new();
    for (p, pe) in pred.iter().enumerate() {
        for (g, ge) in gt.iter().enumerate() {
            let v = box_iou(&pe.bbox, &ge.bbox);
            if v >= 0.5 && (!constrained || pe.label == ge.label) {
                c.push((v, p, g));
            }
        }
    }
    // insertion sort, priority = higher IoU then lower (p, g)
    for i in 1..c.len() {
        let mut j = i;
        while j > 0 && (c[j].0 > c[j - 1].0 || (c[j].0 == c[j - 1].0 && (c[j].1, c[j].2) < (c[j - 1].1, c[j - 1].2))) {
            c.swap(j, j - 1);
            j -= 1;
        }
    }
    c
}

/// Enumerates every one-to-one correspondence built from candidate pairs and
/// returns the one whose inclusion vector, read in candidate priority order,
/// is lexicographically greatest.
pub fn correspondence(pred: &[Entity], gt: &[Entity], constrained: bool) -> Vec<Option<usize>> {
    let cands = candidates(pred, gt, constrained);
    let mut best: Option<Vec<bool>> = None;
    let mut chosen = vec![false; cands.len()];
    fn rec(i: usize, cands: &[(f64, usize, usize)], chosen: &mut Vec<bool>, best: &mut Option<Vec<bool>>) {
        if i == cands.len() {
            if best.as_ref().is_none_or(|b| &chosen[..] > &b[..]) {
                *best = Some(chosen.clone());
            }
            return;
        }
        let (_, p, g) = cands[i];
        let free = (0..i).all(|j| !chosen[j] || (cands[j].1 != p && cands[j].2 != g));
        if free {
            chosen[i] = true;
            rec(i + 1, cands, chosen, best);
            chosen[i] = false;
        }
        rec(i + 1, cands, chosen, best);
    }
    rec(0, &cands, &mut chosen, &mut best);
    let mut map = vec![None; gt.len()];
    for (i, on) in best.unwrap_or_default().into_iter().enumerate() {
        if on {
            map[cands[i].2] = Some(cands[i].1);
        }
    }
    map
}

pub fn graph_accuracy(s: &OracleScene, constrained: bool) -> Option<f64> {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &e in &s.gt_edges {
        if !pairs.contains(&e) {
            pairs.push(e);
        }
    }
    if pairs.is_empty() {
        return None;
    }
    let map = correspondence(&s.pred_nodes, &s.gt_nodes, constrained);
    let mut found = 0usize;
    for (a, b) in pairs.iter().copied() {
        if let (Some(pa), Some(pb)) = (map[a], map[b]) {
            if s.pred_edges.contains(&(pa, pb)) {
                found += 1;
            }
        }
    }
    Some(found as f64 / pairs.len() as f64)
}

pub fn mean_graph_accuracy(scenes: &[OracleScene], constrained: bool) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in scenes {
        if let Some(v) = graph_accuracy(s, constrained) {
            total += v;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(total / n as f64)
    }
}

pub mod fixtures {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use scenegraph::eval::{apply_graph_constraint, Entity, GtTriplet, SceneResult, Triplet};
    use scenegraph::geometry::BBox;
    use std::collections::BTreeSet;

    use super::OracleScene;
    use scenegraph::synth::TripletType;

    pub const LABELS: usize = 3;
    pub const PREDICATES: usize = 4;

    /// Box on a 1/16 grid, so areas and overlaps are exact.
    fn grid_box(r: &mut ChaCha8Rng) -> BBox {
        let (x, y) = (r.random_range(0..14), r.random_range(0..14));
        let (w, h) = (r.random_range(2..=16 - x), r.random_range(2..=16 - y));
        BBox::new(x as f64 / 16.0, y as f64 / 16.0, (x + w) as f64 / 16.0, (y + h) as f64 / 16.0)
    }

    fn jitter(r: &mut ChaCha8Rng, b: &BBox) -> BBox {
        let mut c = [0i32; 4];
        for (k, v) in b.0.iter().enumerate() {
            c[k] = ((v * 16.0).round() as i32 + r.random_range(-2..=2)).clamp(0, 16);
        }
        if c[2] <= c[0] {
            c[2] = (c[0] + 1).min(16);
            c[0] = c[2] - 1;
        }
        if c[3] <= c[1] {
            c[3] = (c[1] + 1).min(16);
            c[1] = c[3] - 1;
        }
        BBox(c.map(|v| v as f64 / 16.0))
    }

    fn pairs(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect()
    }

    /// A random scene of at most six ground-truth and six predicted nodes.
    pub fn random_scene(seed: u64) -> OracleScene {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n_gt = r.random_range(1..=6);
        let gt_nodes: Vec<Entity> =
            (0..n_gt).map(|_| Entity { label: r.random_range(0..LABELS), bbox: grid_box(&mut r) }).collect();
        let mut gt_edges = Vec::new();
        let mut gt = Vec::new();
        for (a, b) in pairs(n_gt) {
            let copies = if r.random_bool(0.4) { 1 + usize::from(r.random_bool(0.2)) } else { 0 };
            for _ in 0..copies {
                let p = r.random_range(0..PREDICATES);
                gt_edges.push((a, b));
                gt.push(GtTriplet { subj: gt_nodes[a], predicate: p, obj: gt_nodes[b] });
            }
        }
        // predicted nodes: noisy copies of most ground-truth nodes, then extras
        let mut pred_nodes: Vec<Entity> = Vec::new();
        let mut copy_of = vec![None; n_gt];
        for (g, ge) in gt_nodes.iter().enumerate() {
            if r.random_bool(0.8) {
                let label = if r.random_bool(0.8) { ge.label } else { r.random_range(0..LABELS) };
                let bbox = if r.random_bool(0.4) { ge.bbox } else { jitter(&mut r, &ge.bbox) };
                copy_of[g] = Some(pred_nodes.len());
                pred_nodes.push(Entity { label, bbox });
            }
        }
        while pred_nodes.len() < 6 && (pred_nodes.is_empty() || r.random_bool(0.4)) {
            let e = if r.random_bool(0.3) && !pred_nodes.is_empty() {
                pred_nodes[r.random_range(0..pred_nodes.len())]
            } else {
                Entity { label: r.random_range(0..LABELS), bbox: grid_box(&mut r) }
            };
            pred_nodes.push(e);
        }
        let n_pred = pred_nodes.len();
        let pred_edges: Vec<(usize, usize)> = pairs(n_pred).into_iter().filter(|_| r.random_bool(0.5)).collect();
        let score = |r: &mut ChaCha8Rng| r.random_range(1..8) as f64 / 8.0;
        let mut raw = Vec::new();
        for (&(a, b), g) in gt_edges.iter().zip(&gt) {
            if let (Some(pa), Some(pb)) = (copy_of[a], copy_of[b]) {
                if r.random_bool(0.6) {
                    let s = score(&mut r);
                    raw.push(Triplet {
                        subj_node: pa,
                        obj_node: pb,
                        subj: pred_nodes[pa],
                        predicate: g.predicate,
                        obj: pred_nodes[pb],
                        score: s,
                    });
                }
            }
        }
        for (a, b) in pairs(n_pred) {
            if !r.random_bool(0.5) {
                continue;
            }
            for _ in 0..r.random_range(1..=3) {
                let s = score(&mut r);
                raw.push(Triplet {
                    subj_node: a,
                    obj_node: b,
                    subj: pred_nodes[a],
                    predicate: r.random_range(0..PREDICATES),
                    obj: pred_nodes[b],
                    score: s,
                });
            }
        }
        OracleScene { raw, gt, pred_nodes, pred_edges, gt_nodes, gt_edges }
    }

    pub fn to_result(s: &OracleScene) -> SceneResult {
        SceneResult {
            triplets: apply_graph_constraint(&s.raw),
            gt: s.gt.clone(),
            pred_nodes: s.pred_nodes.clone(),
            pred_edges: s.pred_edges.clone(),
            gt_nodes: s.gt_nodes.clone(),
            gt_edges: s.gt_edges.clone(),
        }
    }

    /// Roughly half of the triplet types present in the scenes.
    pub fn zero_shot_types(scenes: &[OracleScene], seed: u64) -> BTreeSet<TripletType> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let all: BTreeSet<TripletType> = scenes
            .iter()
            .flat_map(|s| {
                s.gt.iter().map(|g| TripletType { subj: g.subj.label, predicate: g.predicate, obj: g.obj.label })
            })
            .collect();
        all.into_iter().filter(|_| r.random_bool(0.5)).collect()
    }
}

/// Every comparison of the metric suite against the oracle on `n` random
/// scenes; returns the names of mismatching quantities.
pub fn compare_metrics(n: u64, seed: u64) -> Vec<String> {
    use scenegraph::eval::{
        apply_graph_constraint, graph_accuracy as lib_ga, mean_graph_accuracy as lib_mga, per_predicate_recall,
        recall_suite, RecallMode,
    };
    let scenes: Vec<OracleScene> = (0..n).map(|i| fixtures::random_scene(seed * 1_000_003 + i)).collect();
    let results: Vec<_> = scenes.iter().map(fixtures::to_result).collect();
    let zs = fixtures::zero_shot_types(&scenes, seed);
    let mut bad = Vec::new();
    for (i, (s, r)) in scenes.iter().zip(&results).enumerate() {
        if r.triplets != constrain(&s.raw) {
            bad.push(format!("graph constraint, scene {i}"));
        }
        if apply_graph_constraint(&r.triplets) != r.triplets {
            bad.push(format!("graph constraint not idempotent, scene {i}"));
        }
        for c in [false, true] {
            if lib_ga(r, c) != graph_accuracy(s, c) {
                bad.push(format!("graph accuracy (constrained={c}), scene {i}"));
            }
        }
    }
    for k in [1, 2, 3, 5, 10, 20, 50, 100] {
        if recall_suite(&results, k, RecallMode::Recall, &zs) != recall(&scenes, k, None) {
            bad.push(format!("R@{k}"));
        }
        if recall_suite(&results, k, RecallMode::ZeroShot, &zs) != recall(&scenes, k, Some(&zs)) {
            bad.push(format!("zsR@{k}"));
        }
        if recall_suite(&results, k, RecallMode::MeanRecall, &zs) != mean_recall(&scenes, k) {
            bad.push(format!("mR@{k}"));
        }
        if per_predicate_recall(&results, k) != per_predicate(&scenes, k) {
            bad.push(format!("per-predicate recall @{k}"));
        }
    }
    for c in [false, true] {
        if lib_mga(&results, c) != mean_graph_accuracy(&scenes, c) {
            bad.push(format!("mean graph accuracy (constrained={c})"));
        }
    }
    bad
}
