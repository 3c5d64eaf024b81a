//! Property tests for invariants that hold for any input.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::oracle::fixtures;
use scenegraph::eval::{
    apply_graph_constraint, graph_accuracy, match_nodes, recall_suite, Entity, RecallMode, Triplet, IOU_THRESHOLD,
};
use scenegraph::experiment::EdgeBudget;
use scenegraph::geometry::BBox;
use scenegraph::synth::{generate_scene, WorldConfig, WorldSpec};
use scenegraph::tensor::{l2_normalize, Adam, AdamConfig, ParamStore, Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.0f64..0.8, 0.0f64..0.8, 0.05f64..0.5, 0.05f64..0.5)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)))
}

fn entity() -> impl Strategy<Value = Entity> {
    (0usize..3, unit_box()).prop_map(|(label, bbox)| Entity { label, bbox })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_chain_keeps_shapes_and_finite_grads(
        (a, b) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(r, k, c)| (matrix(r, k), matrix(k, c)))
    ) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone().with_grad()), tape.leaf(b.clone().with_grad()));
        let y = tape.matmul(va, vb).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let loss = tape.mean(s);
        let out = tape.value(y);
        prop_assert_eq!(out.shape(), &[a.shape()[0], b.shape()[1]][..]);
        prop_assert_eq!(out.numel(), out.data().len());
        prop_assert!(tape.value(s).is_finite());
        tape.backward(loss).unwrap();
        for (v, t) in [(va, &a), (vb, &b)] {
            let g = tape.grad(v).unwrap();
            prop_assert_eq!(g.len(), t.numel());
            prop_assert!(g.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn softmax_slices_are_distributions(
        x in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c)),
        axis in 0usize..2,
    ) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = tape.softmax(v, axis).unwrap();
        let (r, c) = x.dims2().unwrap();
        let p = tape.data(s);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (outer, inner) = if axis == 1 { (r, c) } else { (c, r) };
        for o in 0..outer {
            let total: f64 = (0..inner).map(|i| if axis == 1 { p[o * c + i] } else { p[i * c + o] }).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows_and_ignores_scale(
        v in prop::collection::vec(-10.0f64..10.0, 1..12),
        scale in 0.01f64..100.0,
    ) {
        let u = l2_normalize(&v);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.iter().all(|&x| x == 0.0) {
            prop_assert_eq!(&u, &v);
        } else {
            prop_assert!((norm - 1.0).abs() <= 1e-12);
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            for (a, b) in u.iter().zip(l2_normalize(&scaled)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adam_counts_steps_and_keeps_moment_shapes(steps in 1usize..6, grads in prop::collection::vec(-1.0f64..1.0, 6)) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::with_lr(0.01)).unwrap();
        for i in 0..steps {
            let mut tape = Tape::new();
            let id = store.id("w").unwrap();
            let w = tape.param(&store, id);
            let g = tape.constant(vec![2, 3], grads.clone()).unwrap();
            let prod = tape.mul(w, g).unwrap();
            let loss = tape.sum(prod);
            tape.backward(loss).unwrap();
            store.zero_grad();
            store.accumulate_grads(&tape);
            adam.step(&mut store).unwrap();
            prop_assert_eq!(adam.step_count(), i as u64 + 1);
        }
        prop_assert_eq!(adam.first_moment()[0].len(), 6);
        prop_assert_eq!(adam.second_moment()[0].len(), 6);
        prop_assert!(store.iter().all(|(_, _, t)| t.is_finite()));
    }

    #[test]
    fn graph_constraint_keeps_one_best_triplet_per_pair(seed in any::<u64>()) {
        let scene = fixtures::random_scene(seed);
        let kept = apply_graph_constraint(&scene.raw);
        let pairs: BTreeSet<_> = kept.iter().map(|t| (t.subj_node, t.obj_node)).collect();
        prop_assert_eq!(pairs.len(), kept.len());
        let raw_pairs: BTreeSet<_> = scene.raw.iter().map(|t| (t.subj_node, t.obj_node)).collect();
        prop_assert_eq!(&pairs, &raw_pairs);
        for t in &kept {
            prop_assert!(scene.raw.contains(t));
            let best = scene
                .raw
                .iter()
                .filter(|r| (r.subj_node, r.obj_node) == (t.subj_node, t.obj_node))
                .map(|r| r.score)
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(t.score, best);
        }
        prop_assert!(kept.windows(2).all(|w: &[Triplet]| w[0].score >= w[1].score));
        prop_assert_eq!(apply_graph_constraint(&kept), kept);
    }

    #[test]
    fn node_matching_is_injective_and_respects_threshold(
        pred in prop::collection::vec(entity(), 0..7),
        gt in prop::collection::vec(entity(), 0..7),
        constrained in any::<bool>(),
    ) {
        let map = match_nodes(&pred, &gt, constrained);
        prop_assert_eq!(map.len(), gt.len());
        let used: Vec<usize> = map.iter().flatten().copied().collect();
        let distinct: BTreeSet<usize> = used.iter().copied().collect();
        prop_assert_eq!(distinct.len(), used.len());
        for (g, p) in map.iter().enumerate() {
            if let Some(p) = *p {
                prop_assert!(pred[p].bbox.iou(&gt[g].bbox) >= IOU_THRESHOLD);
                prop_assert!(!constrained || pred[p].label == gt[g].label);
            }
        }
    }

    #[test]
    fn recall_and_graph_accuracy_are_fractions_and_monotone(seed in any::<u64>()) {
        let scenes: Vec<_> = (0..4).map(|i| fixtures::to_result(&fixtures::random_scene(seed.wrapping_add(i)))).collect();
        let zs = BTreeSet::new();
        let mut prev = 0.0;
        for k in [1, 2, 5, 10, 50] {
            let r = recall_suite(&scenes, k, RecallMode::Recall, &zs).unwrap_or(0.0);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
        for s in &scenes {
            for c in [false, true] {
                if let Some(g) = graph_accuracy(s, c) {
                    prop_assert!((0.0..=1.0).contains(&g));
                }
            }
        }
    }

    #[test]
    fn generated_scenes_satisfy_their_invariants(seed in any::<u64>(), world in 0u64..4) {
        let spec = WorldSpec::build(WorldConfig { seed: world, ..Default::default() }).unwrap();
        let scene = generate_scene(&spec, seed);
        prop_assert!(scene.check_invariants().is_ok(), "{:?}", scene.check_invariants());
        prop_assert_eq!(scene, generate_scene(&spec, seed));
    }

    #[test]
    fn edge_budget_text_round_trips(k in any::<usize>(), all in any::<bool>()) {
        let b = if all { EdgeBudget::All } else { EdgeBudget::Top(k) };
        prop_assert_eq!(b.to_string().parse::<EdgeBudget>().unwrap(), b);
    }
}
