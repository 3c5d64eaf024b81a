use crate::synth::EntityHypothesis;

/// Length of [`pool_hypotheses`] output.
pub fn pooled_dim(feature_dim: usize) -> usize {
    feature_dim + 4 + 4 + 1
}

fn sorted_mean(mut values: Vec<f64>) -> f64 {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    values.into_iter().sum::<f64>() / n
}

/// Order-invariant summary of a scene: per-column feature mean, mean box,
/// 2x2 histogram of box centers, and `n / 10`. Means sum sorted values so the
/// result does not depend on hypothesis order. Empty input gives zeros.
pub fn pool_hypotheses(hypotheses: &[EntityHypothesis], feature_dim: usize, use_features: bool) -> Vec<f64> {
    let mut out = vec![0.0; pooled_dim(feature_dim)];
    let n = hypotheses.len();
    if n == 0 {
        return out;
    }
    if use_features {
        for (d, slot) in out.iter_mut().enumerate().take(feature_dim) {
            *slot = sorted_mean(hypotheses.iter().map(|h| h.feature[d]).collect());
        }
    }
    for c in 0..4 {
        out[feature_dim + c] = sorted_mean(hypotheses.iter().map(|h| h.bbox.0[c]).collect());
    }
    for h in hypotheses {
        let (cx, cy) = h.bbox.center();
        let q = usize::from(cx >= 0.5) + 2 * usize::from(cy >= 0.5);
        out[feature_dim + 4 + q] += 1.0;
    }
    for q in 0..4 {
        out[feature_dim + 4 + q] /= n as f64;
    }
    out[feature_dim + 8] = n as f64 / 10.0;
    out
}
