//! Edge prior from detector confidences and top-K truncation.

use serde::{Deserialize, Serialize};

use crate::ggt::InteractionGraph;
use crate::tensor::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// `σ(c_i · c_j)`
    #[default]
    Product,
    /// `σ(c_i + c_j)`
    Sum,
}

pub fn edge_prior(c_i: f64, c_j: f64, mode: PriorMode) -> f64 {
    match mode {
        PriorMode::Product => sigmoid(c_i * c_j),
        PriorMode::Sum => sigmoid(c_i + c_j),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEdge {
    pub subj: usize,
    pub obj: usize,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEdgeList {
    pub edges: Vec<RankedEdge>,
    pub k: usize,
}

/// Scores every edge, sorts by prior descending with `(subj, obj)`
/// ascending as tie-break, and keeps the first `k`.
pub fn rank_and_truncate(graph: &InteractionGraph, k: usize, mode: PriorMode) -> RankedEdgeList {
    let mut edges: Vec<RankedEdge> = graph
        .edges
        .iter()
        .map(|&(subj, obj)| RankedEdge {
            subj,
            obj,
            prior: edge_prior(graph.nodes[subj].confidence, graph.nodes[obj].confidence, mode),
        })
        .collect();
    edges.sort_by(|a, b| b.prior.total_cmp(&a.prior).then((a.subj, a.obj).cmp(&(b.subj, b.obj))));
    edges.truncate(k);
    RankedEdgeList { edges, k }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::synth::EntityHypothesis;
    use proptest::prelude::*;

    fn graph(conf: &[f64], edges: Vec<(usize, usize)>) -> InteractionGraph {
        let nodes = conf
            .iter()
            .map(|&c| EntityHypothesis {
                label: 0,
                bbox: BBox::new(0.0, 0.0, 0.5, 0.5),
                confidence: c,
                feature: vec![],
                gt_index: None,
            })
            .collect();
        InteractionGraph { nodes, edges }
    }

    #[test]
    fn prior_values() {
        assert_eq!(edge_prior(0.0, 0.7, PriorMode::Product), 0.5);
        assert!((edge_prior(1.0, 1.0, PriorMode::Product) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((edge_prior(1.0, 1.0, PriorMode::Sum) - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn zero_k_and_large_k() {
        let g = graph(&[0.9, 0.2, 0.5], vec![(0, 1), (1, 2), (2, 0)]);
        assert!(rank_and_truncate(&g, 0, PriorMode::Product).edges.is_empty());
        let all = rank_and_truncate(&g, 10, PriorMode::Product);
        let pairs: Vec<_> = all.edges.iter().map(|e| (e.subj, e.obj)).collect();
        assert_eq!(pairs, vec![(2, 0), (0, 1), (1, 2)]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let g = graph(&[0.5, 0.5, 0.5], vec![(2, 1), (0, 2), (1, 0), (0, 1)]);
        let r = rank_and_truncate(&g, 3, PriorMode::Sum);
        let pairs: Vec<_> = r.edges.iter().map(|e| (e.subj, e.obj)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 0)]);
    }

    fn edge_set() -> impl Strategy<Value = (Vec<f64>, Vec<(usize, usize)>)> {
        prop::collection::vec(0.01f64..1.0, 2..7).prop_flat_map(|conf| {
            let n = conf.len();
            let pairs = prop::collection::btree_set((0..n, 0..n), 0..12)
                .prop_map(|s| s.into_iter().filter(|(a, b)| a != b).collect::<Vec<_>>());
            (Just(conf), pairs)
        })
    }

    proptest! {
        #[test]
        fn matches_sort_then_slice_oracle((conf, edges) in edge_set(), k in 0usize..8) {
            let g = graph(&conf, edges.clone());
            let got: Vec<_> = rank_and_truncate(&g, k, PriorMode::Product).edges.iter().map(|e| (e.subj, e.obj)).collect();
            let mut oracle = edges.clone();
            oracle.sort_by(|&(a, b), &(c, d)| {
                let (x, y) = (sigmoid(conf[a] * conf[b]), sigmoid(conf[c] * conf[d]));
                y.partial_cmp(&x).unwrap().then((a, b).cmp(&(c, d)))
            });
            oracle.truncate(k);
            prop_assert_eq!(got, oracle);
        }

        #[test]
        fn smaller_k_is_a_prefix((conf, edges) in edge_set(), k in 0usize..6, extra in 0usize..6) {
            let g = graph(&conf, edges);
            let small = rank_and_truncate(&g, k, PriorMode::Sum).edges;
            let big = rank_and_truncate(&g, k + extra, PriorMode::Sum).edges;
            prop_assert_eq!(&big[..small.len()], &small[..]);
        }

        #[test]
        fn product_prior_orders_like_raw_product(a in 0.01f64..1.0, b in 0.01f64..1.0, c in 0.01f64..1.0, d in 0.01f64..1.0) {
            let raw = (a * b).partial_cmp(&(c * d)).unwrap();
            let prior = edge_prior(a, b, PriorMode::Product).partial_cmp(&edge_prior(c, d, PriorMode::Product)).unwrap();
            // σ may round two close products to the same value
            prop_assert!(prior == raw || prior == std::cmp::Ordering::Equal);
        }
    }
}
