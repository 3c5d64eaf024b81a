use super::GgtError;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgtLoss {
    pub total: f64,
    /// Mean BCE over off-diagonal cells among the scene's nodes.
    pub adjacency: f64,
    /// Mean cross-entropy of the auxiliary label head.
    pub semantic: f64,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub adjacency: Var,
    pub semantic: Var,
}

/// Records the mixed loss on `tape`. `probs` is `[n, width]` with `width >= n`;
/// `target` is `n x n` and must hold only 0/1.
pub(crate) fn loss_on_tape(
    tape: &mut Tape,
    probs: Var,
    label_logits: Var,
    target: &[Vec<f64>],
    labels: &[usize],
    lambda: f64,
) -> Result<LossVars, GgtError> {
    let (n, width) = match tape.shape(probs) {
        [r, c] => (*r, *c),
        s => return Err(GgtError::Shape(format!("probs shape {s:?}"))),
    };
    if target.len() != n || target.iter().any(|r| r.len() != n) || labels.len() != n || width < n {
        return Err(GgtError::Shape(format!("target/labels do not match {n} nodes")));
    }
    if let Some(&v) = target.iter().flatten().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(GgtError::NonBinaryTarget(v));
    }
    let mut t = vec![0.0; n * width];
    let mut mask = vec![false; n * width];
    for i in 0..n {
        for j in 0..n {
            t[i * width + j] = target[i][j];
            mask[i * width + j] = i != j;
        }
    }
    let adjacency = tape.bce(probs, &t, Some(mask))?;
    let label_probs = tape.softmax(label_logits, 1)?;
    let semantic = tape.weighted_ce(label_probs, labels, &vec![1.0; n])?;
    let a = tape.scale(adjacency, lambda);
    let s = tape.scale(semantic, 1.0 - lambda);
    let total = tape.add(a, s)?;
    Ok(LossVars { total, adjacency, semantic })
}

/// `λ·L_A + (1 − λ)·L_S` for an `n x n` probability matrix, `n x C` label
/// logits, a binary `n x n` target and detector-emitted labels.
pub fn ggt_loss(
    probs: &[Vec<f64>],
    label_logits: &[Vec<f64>],
    target: &[Vec<f64>],
    labels: &[usize],
    lambda: f64,
) -> Result<GgtLoss, GgtError> {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::from_rows(probs)?);
    let l = tape.leaf(Tensor::from_rows(label_logits)?);
    let v = loss_on_tape(&mut tape, p, l, target, labels, lambda)?;
    Ok(GgtLoss {
        total: tape.value(v.total).item(),
        adjacency: tape.value(v.adjacency).item(),
        semantic: tape.value(v.semantic).item(),
    })
}
