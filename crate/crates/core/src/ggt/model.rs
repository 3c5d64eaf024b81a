use rand::Rng;

use super::{order_nodes, AdjacencyMatrix, GgtConfig, GgtError, InteractionGraph, SampledGraph};
use crate::synth::EntityHypothesis;
use crate::tensor::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{argmax, l2_normalize, sinusoidal_positional_encoding, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

/// Output of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `max_nodes` probabilities; slot `j` is the `j`-th node in decode order.
    pub adjacency_row: Vec<f64>,
    pub aux_label_logits: Vec<f64>,
}

/// Causal transformer decoder over node tokens.
///
/// Token `k` is `W_in [f_k; bb_k; row_{k-1}] + E[l_k] + PE(k)`, where
/// `row_{k-1}` is the previous node's adjacency row (zeros for `k = 0`).
/// Row logits are a per-slot readout of `h_k` plus, for slots `j < k`, a
/// pairwise readout of `(h_k, h_j)`.
#[derive(Debug, Clone)]
pub struct GgtModel {
    pub config: GgtConfig,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub store: ParamStore,
    input: Linear,
    label_embedding: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    readout: Linear,
    row_head: Linear,
    pair_subj: Linear,
    pair_obj: Linear,
    pair_out: Linear,
    label_head: Linear,
}

impl GgtModel {
    pub fn new(
        config: GgtConfig,
        num_classes: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, GgtError> {
        config.validate()?;
        let h = config.hidden_dim;
        let width = config.max_nodes;
        let mut store = ParamStore::new();
        let input = Linear::new(&mut store, "input", feature_dim + 4 + width, h, rng)?;
        let label_embedding = store.add_normal("label_embedding", &[num_classes, h], 0.1, rng)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            layers.push(DecoderLayer {
                norm_attn: LayerNorm::new(&mut store, &format!("layer{l}.norm_attn"), h)?,
                attn: MultiHeadAttention::new(&mut store, &format!("layer{l}.attn"), h, config.num_heads, rng)?,
                norm_ff: LayerNorm::new(&mut store, &format!("layer{l}.norm_ff"), h)?,
                ff: FeedForward::new(&mut store, &format!("layer{l}.ff"), h, config.ff_dim, rng)?,
            });
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", h)?;
        let readout = Linear::new(&mut store, "readout", h, h, rng)?;
        let row_head = Linear::new(&mut store, "row_head", h, width, rng)?;
        let pair_subj = Linear::new(&mut store, "pair_subj", h, h, rng)?;
        let pair_obj = Linear::new(&mut store, "pair_obj", h, h, rng)?;
        let pair_out = Linear::new(&mut store, "pair_out", h, 1, rng)?;
        let label_head = Linear::new(&mut store, "label_head", h, num_classes, rng)?;
        Ok(Self {
            config,
            num_classes,
            feature_dim,
            store,
            input,
            label_embedding,
            layers,
            final_norm,
            readout,
            row_head,
            pair_subj,
            pair_obj,
            pair_out,
            label_head,
        })
    }

    fn check_nodes(&self, nodes: &[EntityHypothesis]) -> Result<(), GgtError> {
        if nodes.len() > self.config.max_nodes {
            return Err(GgtError::TooManyNodes { n: nodes.len(), max: self.config.max_nodes });
        }
        if let Some(h) = nodes.iter().find(|h| h.feature.len() != self.feature_dim || h.label >= self.num_classes) {
            return Err(GgtError::Shape(format!(
                "hypothesis with label {} and {} features (model: {} classes, {} features)",
                h.label,
                h.feature.len(),
                self.num_classes,
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Teacher-forced pass over `nodes` (already in decode order).
    /// `prev_rows[k]` is node `k`'s adjacency row and feeds token `k + 1`;
    /// only the first `nodes.len() - 1` rows are read.
    /// Returns row probabilities `[n, max_nodes]` and label logits `[n, C]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &[EntityHypothesis],
        prev_rows: &[Vec<f64>],
    ) -> Result<(Var, Var), GgtError> {
        self.check_nodes(nodes)?;
        let n = nodes.len();
        let width = self.config.max_nodes;
        let h = self.config.hidden_dim;
        if n == 0 {
            return Err(GgtError::Shape("decoder needs at least one node".into()));
        }
        if prev_rows.len() + 1 < n || prev_rows.iter().take(n - 1).any(|r| r.len() != width) {
            return Err(GgtError::Shape(format!("need {} previous rows of width {width}", n - 1)));
        }
        let in_dim = self.feature_dim + 4 + width;
        let mut x = Vec::with_capacity(n * in_dim);
        for (k, node) in nodes.iter().enumerate() {
            x.extend(l2_normalize(&node.feature));
            x.extend_from_slice(&node.bbox.0);
            if k == 0 {
                x.extend(std::iter::repeat_n(0.0, width));
            } else {
                x.extend_from_slice(&prev_rows[k - 1]);
            }
        }
        let store = &self.store;
        let x = tape.constant(vec![n, in_dim], x)?;
        let projected = self.input.forward(tape, store, x)?;
        let table = tape.param(store, self.label_embedding);
        let labels: Vec<usize> = nodes.iter().map(|h| h.label).collect();
        let emb = tape.embedding_lookup(table, &labels)?;
        let pe = sinusoidal_positional_encoding(n, h);
        let pe = tape.leaf(pe);
        let mut hidden = tape.add(projected, emb)?;
        hidden = tape.add(hidden, pe)?;

        let mask = causal_mask(n);
        for layer in &self.layers {
            let normed = layer.norm_attn.forward(tape, store, hidden)?;
            let (attn, _) = layer.attn.forward(tape, store, normed, normed, Some(&mask))?;
            hidden = tape.add(hidden, attn)?;
            let normed = layer.norm_ff.forward(tape, store, hidden)?;
            let ff = layer.ff.forward(tape, store, normed)?;
            hidden = tape.add(hidden, ff)?;
        }
        let hidden = self.final_norm.forward(tape, store, hidden)?;
        let ht = self.readout.forward(tape, store, hidden)?;
        let ht = tape.relu(ht);

        let slot_logits = self.row_head.forward(tape, store, ht)?;
        let a = self.pair_subj.forward(tape, store, ht)?;
        let b = self.pair_obj.forward(tape, store, ht)?;
        let subj_idx: Vec<usize> = (0..n * n).map(|c| c / n).collect();
        let obj_idx: Vec<usize> = (0..n * n).map(|c| c % n).collect();
        let a = tape.embedding_lookup(a, &subj_idx)?;
        let b = tape.embedding_lookup(b, &obj_idx)?;
        let pair = tape.add(a, b)?;
        let pair = tape.relu(pair);
        let pair = self.pair_out.forward(tape, store, pair)?;
        let pair = tape.reshape(pair, vec![n, n])?;
        let strictly_earlier: Vec<f64> = (0..n * n).map(|c| if c % n < c / n { 1.0 } else { 0.0 }).collect();
        let strictly_earlier = tape.constant(vec![n, n], strictly_earlier)?;
        let mut pair = tape.mul(pair, strictly_earlier)?;
        if width > n {
            let pad = tape.constant(vec![n, width - n], vec![0.0; n * (width - n)])?;
            pair = tape.concat(&[pair, pad], 1)?;
        }
        let logits = tape.add(slot_logits, pair)?;
        let probs = tape.sigmoid(logits);
        let label_logits = self.label_head.forward(tape, store, ht)?;
        Ok((probs, label_logits))
    }

    /// Output of the last node of `context`; earlier nodes only matter
    /// through attention.
    pub fn decode_step(&self, context: &[EntityHypothesis], prev_rows: &[Vec<f64>]) -> Result<StepOutput, GgtError> {
        let mut tape = Tape::new();
        let (probs, logits) = self.forward(&mut tape, context, prev_rows)?;
        let n = context.len();
        let width = self.config.max_nodes;
        let c = self.num_classes;
        Ok(StepOutput {
            adjacency_row: tape.data(probs)[(n - 1) * width..n * width].to_vec(),
            aux_label_logits: tape.data(logits)[(n - 1) * c..n * c].to_vec(),
        })
    }

    /// Decodes rows one node at a time, feeding each thresholded row back
    /// as context. Edges are reported in the caller's hypothesis indexing.
    pub fn sample_graph(&self, hypotheses: &[EntityHypothesis]) -> Result<SampledGraph, GgtError> {
        self.check_nodes(hypotheses)?;
        let n = hypotheses.len();
        let width = self.config.max_nodes;
        let gamma = self.config.gamma;
        let order = order_nodes(hypotheses);
        let ordered: Vec<EntityHypothesis> = order.iter().map(|&i| hypotheses[i].clone()).collect();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut prob_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut aux = vec![0; n];
        for k in 0..n {
            let step = self.decode_step(&ordered[..=k], &rows)?;
            let binary: Vec<f64> =
                (0..width).map(|j| if j < n && j != k && step.adjacency_row[j] > gamma { 1.0 } else { 0.0 }).collect();
            let best = argmax(&step.aux_label_logits);
            aux[order[k]] = best;
            rows.push(binary);
            prob_rows.push(step.adjacency_row);
        }
        let mut probs = vec![vec![0.0; n]; n];
        for (k, row) in prob_rows.iter().enumerate() {
            for (j, &p) in row.iter().take(n).enumerate() {
                probs[order[k]][order[j]] = p;
            }
        }
        let mut adjacency = AdjacencyMatrix { n, probs, binary: None };
        adjacency.threshold(gamma);
        let edges = adjacency.edges();
        let mut nodes = hypotheses.to_vec();
        if self.config.node_sampling {
            for (node, &l) in nodes.iter_mut().zip(&aux) {
                node.label = l;
            }
        }
        Ok(SampledGraph { graph: InteractionGraph { nodes, edges }, adjacency, aux_labels: aux })
    }
}
