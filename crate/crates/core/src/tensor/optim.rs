use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    /// Decoupled decay: each step also subtracts `lr * weight_decay * w`.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate >= 0.0) || !config.learning_rate.is_finite() {
            return Err(TensorError::LearningRate(config.learning_rate));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Ok(Self { config, step: 0, first: zeros.clone(), second: zeros })
    }

    pub(crate) fn from_parts(config: AdamConfig, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Self {
        Self { config, step, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Parameters without a gradient (frozen or unused) are left untouched,
    /// moments included.
    /// Any non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, name, t) in store.iter() {
            if let Some((index, &value)) = t.grad().and_then(|g| g.iter().enumerate().find(|(_, v)| !v.is_finite())) {
                return Err(TensorError::NonFiniteGradient { name: name.to_string(), index, value });
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1, beta2, epsilon, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                if lr == 0.0 {
                    continue;
                }
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(&[0.5]);
        let id = s.id("w").unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]);
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.001)).unwrap();
        adam.step(&mut s).unwrap();
        let delta = s.get(id).data()[0] - 0.5;
        assert!((delta + 0.001).abs() < 1e-11, "{delta}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut s = store_with(&[1.0, -2.0]);
        let id = s.id("w").unwrap();
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.01)).unwrap();
        s.get_mut(id).accumulate_grad(&[1.0, 1.0]);
        adam.step(&mut s).unwrap();
        let after_one = s.get(id).data().to_vec();
        let m1 = adam.first_moment()[0][0];
        s.zero_grad();
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        let before = adam.first_moment()[0][0];
        adam.step(&mut s).unwrap();
        assert!(adam.first_moment()[0][0].abs() < before.abs());
        assert_eq!(m1, before);
        // zero gradient still moves by the decayed momentum; a fresh optimizer does not.
        let mut fresh = Adam::new(&s, AdamConfig::with_lr(0.01)).unwrap();
        let snapshot = s.get(id).data().to_vec();
        fresh.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), &snapshot[..]);
        assert_ne!(after_one, snapshot);
    }

    #[test]
    fn constant_gradient_update_approaches_lr_times_sign() {
        let mut s = store_with(&[0.0, 0.0]);
        let id = s.id("w").unwrap();
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.01)).unwrap();
        let mut last = [0.0; 2];
        for _ in 0..2000 {
            let before = s.get(id).data().to_vec();
            s.zero_grad();
            s.get_mut(id).accumulate_grad(&[3.0, -0.5]);
            adam.step(&mut s).unwrap();
            last = [s.get(id).data()[0] - before[0], s.get(id).data()[1] - before[1]];
        }
        assert!((last[0] + 0.01).abs() < 1e-8, "{last:?}");
        assert!((last[1] - 0.01).abs() < 1e-8, "{last:?}");
    }

    #[test]
    fn nan_gradient_is_rejected_with_param_name() {
        let mut s = store_with(&[1.0, 2.0]);
        let id = s.id("w").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, f64::NAN]);
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.01)).unwrap();
        let err = adam.step(&mut s).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { ref name, index: 1, .. } if name == "w"));
        assert_eq!(s.get(id).data(), &[1.0, 2.0]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut s = store_with(&[0.3, -0.7]);
        let id = s.id("w").unwrap();
        s.get_mut(id).accumulate_grad(&[5.0, -1.0]);
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.0)).unwrap();
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), &[0.3, -0.7]);
        assert!(Adam::new(&s, AdamConfig::with_lr(-1.0)).is_err());
    }

    #[test]
    fn gradless_params_are_untouched_even_with_weight_decay() {
        let mut s = store_with(&[0.3, -0.7]);
        s.add("frozen", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let (w, frozen) = (s.id("w").unwrap(), s.id("frozen").unwrap());
        let cfg = AdamConfig { weight_decay: 0.1, ..AdamConfig::with_lr(0.01) };
        let mut adam = Adam::new(&s, cfg).unwrap();
        for _ in 0..5 {
            s.zero_grad();
            s.get_mut(w).accumulate_grad(&[0.0, 0.0]);
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.get(frozen).data(), &[1.0, 2.0]);
        assert_eq!(adam.first_moment()[1], vec![0.0, 0.0]);
        // zero gradient with decay: x <- x (1 - lr wd) each step
        let expected = 0.3 * (1.0f64 - 0.01 * 0.1).powi(5);
        assert!((s.get(w).data()[0] - expected).abs() < 1e-15);
    }
}
