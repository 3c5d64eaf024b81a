//! Small layer helpers shared by both transformers.
//!
//! Layers only hold [`ParamId`]s; weights stay in the [`ParamStore`] and are
//! placed on the tape at forward time.

use rand::Rng;

use super::{ParamId, ParamStore, Result, Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add_xavier(&format!("{name}.weight"), fan_in, fan_out, rng)?;
        let bias = store.add_filled(&format!("{name}.bias"), &[fan_out], 0.0)?;
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add_filled(&format!("{name}.gain"), &[dim], 1.0)?;
        let bias = store.add_filled(&format!("{name}.bias"), &[dim], 0.0)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// `MHA(Q, K, V) = W_o [h_1; ...; h_H]` with per-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// Attends from `queries: [n, dim]` over `memory: [m, dim]`. `mask`, when
    /// given, is an `n x m` row-major keep-mask shared by all heads.
    /// Returns the projected output and one weight matrix per head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, memory)?;
        let v = self.value.forward(tape, store, memory)?;
        let head_dim = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let (o, w) = tape.scaled_dot_product_attention(qh, kh, vh, mask.map(<[bool]>::to_vec))?;
            outs.push(o);
            weights.push(w);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        Ok((self.output.forward(tape, store, joined)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

/// Causal keep-mask for `n` steps: position `i` sees `j <= i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}
