use std::cell::RefCell;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ggt::InteractionGraph;
use crate::relation::PredicatePrediction;
use crate::seed;
use crate::synth::EntityHypothesis;

use super::{EdgeClassifier, EvalError, GraphSampler};

/// Puts all mass on one uniformly drawn predicate per edge.
pub struct UniformPredicateClassifier {
    num_predicates: usize,
    rng: RefCell<ChaCha8Rng>,
}

impl UniformPredicateClassifier {
    pub fn new(num_predicates: usize, seed: u64) -> Self {
        Self { num_predicates, rng: RefCell::new(seed::rng(seed, "uniform-predicate", &[])) }
    }
}

impl EdgeClassifier for UniformPredicateClassifier {
    fn classify(
        &self,
        _: &[EntityHypothesis],
        edges: &[(usize, usize)],
    ) -> Result<Vec<PredicatePrediction>, EvalError> {
        let mut rng = self.rng.borrow_mut();
        Ok(edges
            .iter()
            .map(|_| {
                let label = rng.random_range(0..self.num_predicates);
                let mut probs = vec![0.0; self.num_predicates];
                probs[label] = 1.0;
                PredicatePrediction { probs, label, score: 1.0, background_prob: 0.0 }
            })
            .collect())
    }
}

/// Erdős–Rényi graph with the same edge count `inner` produces on each scene.
pub struct MatchedRandomSampler<'a> {
    inner: &'a dyn GraphSampler,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> MatchedRandomSampler<'a> {
    pub fn new(inner: &'a dyn GraphSampler, seed: u64) -> Self {
        Self { inner, rng: RefCell::new(seed::rng(seed, "matched-random-graph", &[])) }
    }
}

impl GraphSampler for MatchedRandomSampler<'_> {
    fn sample(&self, hypotheses: &[EntityHypothesis]) -> Result<InteractionGraph, EvalError> {
        let m = self.inner.sample(hypotheses)?.edges.len();
        let n = hypotheses.len();
        let pairs = n * n.saturating_sub(1);
        let mut rng = self.rng.borrow_mut();
        let mut edges: Vec<(usize, usize)> = sample(&mut *rng, pairs, m.min(pairs))
            .into_iter()
            .map(|c| {
                let (i, r) = (c / (n - 1), c % (n - 1));
                (i, if r >= i { r + 1 } else { r })
            })
            .collect();
        edges.sort_unstable();
        Ok(InteractionGraph { nodes: hypotheses.to_vec(), edges })
    }
    fn max_nodes(&self) -> usize {
        self.inner.max_nodes()
    }
}
