use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BCE_CLAMP: f64 = 1e-7;
const CE_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce { probs: Var, targets: Vec<f64>, mask: Option<Vec<bool>>, count: usize },
    WeightedCe { probs: Var, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so the vector itself is a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient deposited on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, needs_grad, None)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Copies a parameter onto the tape as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("stored shape");
        value.set_requires_grad(true);
        self.push_node(value, Op::Leaf, true, Some(id))
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| Some((n.param?, n.value.grad()?)))
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push_node(value, op, needs_grad, None)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Shape { op, detail: format!("expected rank 2, got {other:?}") }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape { op, detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)) });
        }
        Ok(())
    }

    // ----- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape { op: "matmul", detail: format!("[{m},{k}] x [{k2},{n}]") });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    /// `x[r, c] + row[c]` for every row of a rank-2 `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row")?;
        if self.value(row).numel() != c {
            return Err(TensorError::Shape {
                op: "add_row",
                detail: format!("row of {} for {c} columns", self.value(row).numel()),
            });
        }
        let bias = self.data(row);
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(vec![r, c], out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Shape { op: "concat", detail: "no inputs".into() })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { axis, rank: base.len() });
        }
        let mut axis_len = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape { op: "concat", detail: format!("{s:?} vs {base:?} on axis {axis}") });
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax where `mask[i] == false` entries are excluded and output 0.
    /// The mask has the same row-major layout as `x`.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis);
        }
        if let Some(m) = &mask {
            if m.len() != self.value(x).numel() {
                return Err(TensorError::Shape { op: "softmax", detail: "mask length".into() });
            }
        }
        let out = softmax_raw(self.data(x), &shape, axis, mask.as_deref());
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    /// Row-wise layer normalization of a rank-2 `x` with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(TensorError::Shape { op: "layer_norm", detail: "affine width".into() });
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normed[i * c + j] = n;
                out[i * c + j] = n * g[j] + b[j];
            }
        }
        Ok(self.push(vec![r, c], out, Op::LayerNorm { x, gain, bias, normed, inv_std }, &[x, gain, bias]))
    }

    /// Selects rows of a rank-2 `table`; used both for embeddings and gathers.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(table, "embedding_lookup")?;
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index { index: i, rows });
            }
            out.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![indices.len(), c], out, Op::Gather { table, indices: indices.to_vec() }, &[table]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::Shape { op: "slice_cols", detail: format!("{start}+{len} > {c}") });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::Shape { op: "reshape", detail: format!("{:?} -> {shape:?}", self.shape(x)) });
        }
        let out = self.data(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// `x W + b` for rank-2 `x`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// `softmax(Q Kᵀ / √d_k) V`; returns the output and the attention weights.
    pub fn scaled_dot_product_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Vec<bool>>,
    ) -> Result<(Var, Var)> {
        let (_, dk) = self.dims2(q, "attention")?;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = self.masked_softmax(scaled, 1, mask)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Mean binary cross-entropy over cells where `mask` is true, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]`. An all-false mask yields 0.
    pub fn bce(&mut self, probs: Var, targets: &[f64], mask: Option<Vec<bool>>) -> Result<Var> {
        let n = self.value(probs).numel();
        if targets.len() != n || mask.as_ref().is_some_and(|m| m.len() != n) {
            return Err(TensorError::Shape { op: "bce", detail: "targets/mask length".into() });
        }
        let p = self.data(probs);
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            if mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            let pc = p[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= targets[i] * pc.ln() + (1.0 - targets[i]) * (1.0 - pc).ln();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::Bce { probs, targets: targets.to_vec(), mask, count };
        Ok(self.push(vec![1], vec![loss], op, &[probs]))
    }

    /// `mean_r(-w_r · ln max(p[r, target_r], 1e-12))` over the rows of a
    /// rank-2 probability matrix; `weights` holds one weight per row.
    pub fn weighted_ce(&mut self, probs: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (r, c) = self.dims2(probs, "weighted_ce")?;
        if targets.len() != r || weights.len() != r {
            return Err(TensorError::Shape {
                op: "weighted_ce",
                detail: format!("{r} rows, {} targets", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Index { index: t, rows: c });
        }
        let p = self.data(probs);
        let total: f64 = (0..r).map(|i| -weights[i] * p[i * c + targets[i]].max(CE_FLOOR).ln()).sum();
        let loss = if r == 0 { 0.0 } else { total / r as f64 };
        let op = Op::WeightedCe { probs, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.push(vec![1], vec![loss], op, &[probs]))
    }

    // ----- backward ----------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// to every gradient-tracking leaf. Calling it again accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.shape(*a));
                let n = self.shape(*b)[1];
                send(*a, matmul_a_bt(g, self.data(*b), m, n, k));
                send(*b, matmul_at_b(self.data(*a), g, m, k, n));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::AddRow(x, row) => {
                let c = self.value(*row).numel();
                let mut gb = vec![0.0; c];
                for chunk in g.chunks(c) {
                    gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                send(*x, g.to_vec());
                send(*row, gb);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(bd).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(ad).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                    }
                    offset += chunk;
                    send(p, gp);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                send(*x, g.iter().zip(xd).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => send(*x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let (r, c) = dims(node.value.shape());
                let gd = self.data(*gain);
                let mut gg = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let mut mean_d = 0.0;
                    let mut mean_dn = 0.0;
                    for j in 0..c {
                        let k = i * c + j;
                        gg[j] += g[k] * normed[k];
                        gbias[j] += g[k];
                        let d = g[k] * gd[j];
                        mean_d += d;
                        mean_dn += d * normed[k];
                    }
                    mean_d /= c as f64;
                    mean_dn /= c as f64;
                    for j in 0..c {
                        let k = i * c + j;
                        gx[k] = inv_std[i] * (g[k] * gd[j] - mean_d - normed[k] * mean_dn);
                    }
                }
                send(*x, gx);
                send(*gain, gg);
                send(*bias, gbias);
            }
            Op::Gather { table, indices } => {
                let (_, c) = dims(self.shape(*table));
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    gt[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, b)| *a += b);
                }
                send(*table, gt);
            }
            Op::Transpose(x) => {
                let (r, c) = dims(self.shape(*x));
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                send(*x, gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims(self.shape(*x));
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Bce { probs, targets, mask, count } => {
                let p = self.data(*probs);
                let mut gp = vec![0.0; p.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for i in 0..p.len() {
                        if mask.as_ref().is_some_and(|m| !m[i]) || p[i] <= BCE_CLAMP || p[i] >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        gp[i] = scale * (-targets[i] / p[i] + (1.0 - targets[i]) / (1.0 - p[i]));
                    }
                }
                send(*probs, gp);
            }
            Op::WeightedCe { probs, targets, weights } => {
                let (r, c) = dims(self.shape(*probs));
                let p = self.data(*probs);
                let mut gp = vec![0.0; r * c];
                for i in 0..r {
                    let k = i * c + targets[i];
                    if p[k] > CE_FLOOR {
                        gp[k] = -g[0] * weights[i] / (r as f64 * p[k]);
                    }
                }
                send(*probs, gp);
            }
        }
    }
}

fn dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => (1, shape.iter().product()),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_raw(x: &[f64], shape: &[usize], axis: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    let keep = |k: usize| mask.map_or(true, |m| m[k]);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).filter(|&k| keep(at(k))).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for k in 0..len {
                if keep(at(k)) {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            row.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// `g [m,n] · bᵀ` where `b: [k,n]`.
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = gr.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a: [m,k]`, `g: [m,n]`.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(gr).for_each(|(o, gv)| *o += av * gv);
        }
    }
    out
}

/// Standard sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_positional_encoding(length: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; length * dim];
    for p in 0..length {
        for j in 0..dim {
            let pair = (j / 2) * 2;
            let angle = p as f64 / 10000f64.powf(pair as f64 / dim as f64);
            data[p * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![length, dim], data).expect("consistent")
}
