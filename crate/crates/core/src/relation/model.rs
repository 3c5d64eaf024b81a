use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::context::{pool_hypotheses, pooled_dim};
use super::{RelationConfig, RelationError, SemanticEmbeddingTable};
use crate::synth::EntityHypothesis;
use crate::tensor::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{argmax, l2_normalize, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
struct Block {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &RelationConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, RelationError> {
        let h = cfg.hidden_dim;
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), h)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), h, cfg.num_heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), h)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), h, cfg.ff_dim, rng)?,
        })
    }

    /// Pre-norm residual block; attends over `memory`, or over the normed
    /// input itself when `memory` is `None`. `skip_attention` leaves only the
    /// feed-forward half.
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Option<Var>,
        skip_attention: bool,
    ) -> Result<(Var, Vec<Var>), RelationError> {
        let mut x = x;
        let mut weights = Vec::new();
        if !skip_attention {
            let normed = self.norm_attn.forward(tape, store, x)?;
            let (a, w) = self.attn.forward(tape, store, normed, memory.unwrap_or(normed), None)?;
            x = tape.add(x, a)?;
            weights = w;
        }
        let normed = self.norm_ff.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, normed)?;
        Ok((tape.add(x, f)?, weights))
    }
}

/// Predicate distribution for one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicatePrediction {
    /// Over real predicates only; sums to 1.
    pub probs: Vec<f64>,
    pub label: usize,
    pub score: f64,
    /// Mass the model put on "no relation" before renormalizing; 0 when the
    /// model has no background output.
    pub background_prob: f64,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct RelationForward {
    /// `[E, outputs]`
    pub probs: Var,
    /// `[E, H]` fused visual-semantic embeddings before the encoder.
    pub edge_embedding: Var,
    /// `[M, H]`
    pub context: Var,
    /// Per decoder layer, per head, `[E, M]` cross-attention weights.
    pub cross_attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct RelationModel {
    pub config: RelationConfig,
    pub num_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub store: ParamStore,
    semantic: ParamId,
    edge_visual: Linear,
    edge_fuse: Linear,
    encoder: Vec<Block>,
    context_proj: Linear,
    null_context: ParamId,
    decoder: Vec<Block>,
    final_norm: LayerNorm,
    output: Linear,
}

impl RelationModel {
    pub fn new(
        config: RelationConfig,
        num_predicates: usize,
        feature_dim: usize,
        table: &SemanticEmbeddingTable,
        rng: &mut impl Rng,
    ) -> Result<Self, RelationError> {
        config.validate()?;
        if table.dim != config.embedding_dim {
            return Err(RelationError::Config(format!(
                "embedding table has dim {}, config expects {}",
                table.dim, config.embedding_dim
            )));
        }
        let (h, e, m) = (config.hidden_dim, config.embedding_dim, config.context_vectors);
        let num_classes = table.num_classes();
        let mut store = ParamStore::new();
        let semantic = store.add("semantic_table", Tensor::new(vec![num_classes, e], table.flat())?)?;
        let edge_visual = Linear::new(&mut store, "edge_visual", 2 * feature_dim + 8, h, rng)?;
        let edge_fuse = Linear::new(&mut store, "edge_fuse", h + 2 * e, h, rng)?;
        let encoder = (0..config.encoder_layers)
            .map(|l| Block::new(&mut store, &format!("encoder{l}"), &config, rng))
            .collect::<Result<_, _>>()?;
        let context_proj = Linear::new(&mut store, "context_proj", pooled_dim(feature_dim), m * h, rng)?;
        let null_context = store.add_normal("null_context", &[m, h], 0.1, rng)?;
        let decoder = (0..config.decoder_layers)
            .map(|l| Block::new(&mut store, &format!("decoder{l}"), &config, rng))
            .collect::<Result<_, _>>()?;
        let final_norm = LayerNorm::new(&mut store, "final_norm", h)?;
        let outputs = num_predicates + usize::from(config.has_background());
        let output = Linear::new(&mut store, "output", h, outputs, rng)?;
        Ok(Self {
            config,
            num_classes,
            num_predicates,
            feature_dim,
            store,
            semantic,
            edge_visual,
            edge_fuse,
            encoder,
            context_proj,
            null_context,
            decoder,
            final_norm,
            output,
        })
    }

    pub fn num_outputs(&self) -> usize {
        self.num_predicates + usize::from(self.config.has_background())
    }

    fn check(&self, hyps: &[EntityHypothesis], edges: &[(usize, usize)]) -> Result<(), RelationError> {
        for h in hyps {
            if h.label >= self.num_classes {
                return Err(RelationError::UnknownClass { class: h.label, classes: self.num_classes });
            }
            if h.feature.len() != self.feature_dim {
                return Err(RelationError::Shape(format!(
                    "feature length {} != {}",
                    h.feature.len(),
                    self.feature_dim
                )));
            }
        }
        if let Some(&(a, b)) = edges.iter().find(|(a, b)| *a >= hyps.len() || *b >= hyps.len()) {
            return Err(RelationError::BadEdge(a, b));
        }
        Ok(())
    }

    /// `ReLU(W_sv [ReLU(W_c [f_i; bb_i; f_j; bb_j]); S_i; S_j])` per edge.
    pub fn edge_features(
        &self,
        tape: &mut Tape,
        hyps: &[EntityHypothesis],
        edges: &[(usize, usize)],
    ) -> Result<Var, RelationError> {
        self.edge_features_inner(tape, hyps, edges, None)
    }

    fn edge_features_inner(
        &self,
        tape: &mut Tape,
        hyps: &[EntityHypothesis],
        edges: &[(usize, usize)],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var, RelationError> {
        self.check(hyps, edges)?;
        let d = self.feature_dim;
        let e = self.config.embedding_dim;
        let width = 2 * d + 8;
        let mut x = Vec::with_capacity(edges.len() * width);
        for &(i, j) in edges {
            for node in [&hyps[i], &hyps[j]] {
                if self.config.ablate_visual {
                    x.extend(std::iter::repeat_n(0.0, d));
                } else if let Some(rng) = dropout.as_deref_mut() {
                    let p = self.config.feature_dropout;
                    let f = l2_normalize(&node.feature);
                    x.extend(f.iter().map(|&v| if rng.random::<f64>() < p { 0.0 } else { v / (1.0 - p) }));
                } else {
                    x.extend(l2_normalize(&node.feature));
                }
                x.extend_from_slice(&node.bbox.0);
            }
        }
        let x = tape.constant(vec![edges.len(), width], x)?;
        let visual = self.edge_visual.forward(tape, &self.store, x)?;
        let visual = tape.relu(visual);
        let (s_i, s_j) = if self.config.ablate_semantic {
            let zeros = tape.constant(vec![edges.len(), e], vec![0.0; edges.len() * e])?;
            (zeros, zeros)
        } else {
            let table = if self.config.trainable_embeddings {
                tape.param(&self.store, self.semantic)
            } else {
                let t = self.store.get(self.semantic);
                tape.constant(t.shape().to_vec(), t.data().to_vec())?
            };
            let subj: Vec<usize> = edges.iter().map(|&(i, _)| hyps[i].label).collect();
            let obj: Vec<usize> = edges.iter().map(|&(_, j)| hyps[j].label).collect();
            (tape.embedding_lookup(table, &subj)?, tape.embedding_lookup(table, &obj)?)
        };
        let joined = tape.concat(&[visual, s_i, s_j], 1)?;
        let fused = self.edge_fuse.forward(tape, &self.store, joined)?;
        Ok(tape.relu(fused))
    }

    /// `M x H` context; the learned null vectors for an empty scene.
    pub fn scene_context(&self, tape: &mut Tape, hyps: &[EntityHypothesis]) -> Result<Var, RelationError> {
        if hyps.is_empty() {
            return Ok(tape.param(&self.store, self.null_context));
        }
        let pooled = pool_hypotheses(hyps, self.feature_dim, !self.config.ablate_visual);
        let p = tape.constant(vec![1, pooled.len()], pooled)?;
        let c = self.context_proj.forward(tape, &self.store, p)?;
        let c = tape.relu(c);
        Ok(tape.reshape(c, vec![self.config.context_vectors, self.config.hidden_dim])?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        hyps: &[EntityHypothesis],
        edges: &[(usize, usize)],
    ) -> Result<RelationForward, RelationError> {
        self.forward_inner(tape, hyps, edges, None)
    }

    /// Training pass: visual features go through inverted dropout at rate
    /// `feature_dropout`, drawn from `rng`.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        hyps: &[EntityHypothesis],
        edges: &[(usize, usize)],
        rng: &mut dyn RngCore,
    ) -> Result<RelationForward, RelationError> {
        let drop = (self.config.feature_dropout > 0.0).then_some(rng);
        self.forward_inner(tape, hyps, edges, drop)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        hyps: &[EntityHypothesis],
        edges: &[(usize, usize)],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<RelationForward, RelationError> {
        if edges.is_empty() {
            return Err(RelationError::Shape("no edges to classify".into()));
        }
        let edge_embedding = self.edge_features_inner(tape, hyps, edges, dropout)?;
        let mut x = edge_embedding;
        for block in &self.encoder {
            x = block.forward(tape, &self.store, x, None, false)?.0;
        }
        let context = self.scene_context(tape, hyps)?;
        let mut cross_attention = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            let (y, w) = block.forward(tape, &self.store, x, Some(context), self.config.ablate_context)?;
            x = y;
            cross_attention.push(w);
        }
        let x = self.final_norm.forward(tape, &self.store, x)?;
        let logits = self.output.forward(tape, &self.store, x)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(RelationForward { probs, edge_embedding, context, cross_attention })
    }

    /// Context vectors as plain rows.
    pub fn context_values(&self, hyps: &[EntityHypothesis]) -> Result<Vec<Vec<f64>>, RelationError> {
        let mut tape = Tape::new();
        let c = self.scene_context(&mut tape, hyps)?;
        Ok(tape.data(c).chunks(self.config.hidden_dim).map(<[f64]>::to_vec).collect())
    }

    pub fn classify(
        &self,
        hyps: &[EntityHypothesis],
        edges: &[(usize, usize)],
    ) -> Result<Vec<PredicatePrediction>, RelationError> {
        if edges.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, hyps, edges)?;
        let outputs = self.num_outputs();
        let p = self.num_predicates;
        Ok(tape
            .data(f.probs)
            .chunks(outputs)
            .map(|row| {
                let background_prob = if outputs > p { row[p] } else { 0.0 };
                let mass: f64 = row[..p].iter().sum();
                let probs: Vec<f64> = row[..p].iter().map(|v| v / mass).collect();
                let label = argmax(&probs);
                PredicatePrediction { score: probs[label], label, probs, background_prob }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::seed;

    fn table(classes: usize, dim: usize) -> SemanticEmbeddingTable {
        let mut rng = seed::rng(4, "table", &[]);
        SemanticEmbeddingTable {
            dim,
            rows: (0..classes).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        }
    }

    fn hyps(n: usize, d: usize, rng: &mut impl Rng) -> Vec<EntityHypothesis> {
        (0..n)
            .map(|i| EntityHypothesis {
                label: i % 3,
                bbox: BBox::new(0.1 * i as f64, 0.0, 0.1 * i as f64 + 0.2, 0.3),
                confidence: 0.9,
                feature: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                gt_index: None,
            })
            .collect()
    }

    fn small(m: usize) -> RelationConfig {
        RelationConfig {
            hidden_dim: 8,
            num_heads: 2,
            ff_dim: 12,
            context_vectors: m,
            embedding_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn single_key_cross_attention_is_one() {
        let mut rng = seed::rng(5, "t", &[]);
        let model = RelationModel::new(small(1), 5, 6, &table(3, 4), &mut rng).unwrap();
        let h = hyps(3, 6, &mut rng);
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &h, &[(0, 1)]).unwrap();
        for w in &f.cross_attention[0] {
            assert_eq!(tape.data(*w), &[1.0]);
        }
    }

    #[test]
    fn predictions_are_distributions() {
        let mut rng = seed::rng(5, "t", &[]);
        let model = RelationModel::new(small(4), 5, 6, &table(3, 4), &mut rng).unwrap();
        let h = hyps(4, 6, &mut rng);
        let preds = model.classify(&h, &[(0, 1), (2, 3), (3, 0)]).unwrap();
        for p in preds {
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.probs.iter().all(|v| *v >= 0.0));
            assert_eq!(p.score, p.probs[p.label]);
        }
    }

    #[test]
    fn edge_features_are_nonnegative_and_zero_weights_give_zero() {
        let mut rng = seed::rng(6, "t", &[]);
        let mut model = RelationModel::new(small(2), 5, 6, &table(3, 4), &mut rng).unwrap();
        let h = hyps(3, 6, &mut rng);
        let mut tape = Tape::new();
        let v = model.edge_features(&mut tape, &h, &[(0, 2), (1, 0)]).unwrap();
        assert!(tape.data(v).iter().all(|x| *x >= 0.0));
        for name in ["edge_visual.weight", "edge_visual.bias", "edge_fuse.weight", "edge_fuse.bias"] {
            let id = model.store.id(name).unwrap();
            let zeros = vec![0.0; model.store.get(id).numel()];
            model.store.set_data(id, &zeros).unwrap();
        }
        let mut tape = Tape::new();
        let v = model.edge_features(&mut tape, &h, &[(0, 2)]).unwrap();
        assert!(tape.data(v).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn empty_scene_context_is_null_vectors() {
        let mut rng = seed::rng(6, "t", &[]);
        let model = RelationModel::new(small(3), 5, 6, &table(3, 4), &mut rng).unwrap();
        let ctx = model.context_values(&[]).unwrap();
        let null = model.store.get(model.store.id("null_context").unwrap());
        assert_eq!(ctx.concat(), null.data());
    }

    #[test]
    fn unknown_class_and_bad_edge_rejected() {
        let mut rng = seed::rng(6, "t", &[]);
        let model = RelationModel::new(small(3), 5, 6, &table(3, 4), &mut rng).unwrap();
        let mut h = hyps(2, 6, &mut rng);
        assert!(matches!(model.classify(&h, &[(0, 5)]), Err(RelationError::BadEdge(0, 5))));
        h[1].label = 9;
        assert!(matches!(model.classify(&h, &[(0, 1)]), Err(RelationError::UnknownClass { class: 9, .. })));
    }
}
