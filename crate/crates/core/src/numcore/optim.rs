use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Updates this parameter has received; drives bias correction.
    t: i32,
}

/// Adam over the parameters that were trainable when it was created.
pub struct Adam {
    config: AdamConfig,
    moments: BTreeMap<ParamId, Moments>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let moments = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let n = store.get(id).len();
                (id, Moments { m: vec![0.0; n], v: vec![0.0; n], t: 0 })
            })
            .collect();
        Self { config, moments, steps: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn registered(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// Number of scalar elements the optimizer updates.
    pub fn registered_elements(&self) -> usize {
        self.moments.values().map(|m| m.m.len()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Gradients for parameters not registered are ignored;
    /// parameters without a gradient keep their moments and step count.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.steps += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        if learning_rate == 0.0 {
            return;
        }
        for (id, g) in grads {
            let Some(mom) = self.moments.get_mut(id) else { continue };
            mom.t += 1;
            let bc1 = 1.0 - beta1.powi(mom.t);
            let bc2 = 1.0 - beta2.powi(mom.t);
            let p = store.get_mut(*id).data_mut();
            for (((pi, &gi), m), v) in p.iter_mut().zip(g.data()).zip(&mut mom.m).zip(&mut mom.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *pi -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_trainable_parameters_move() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![1.0, 2.0]), true);
        let b = store.insert("b", Tensor::vector(vec![3.0]), false);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        assert_eq!(adam.registered_elements(), 2);
        adam.step(&mut store, &[(a, Tensor::vector(vec![1.0, -1.0])), (b, Tensor::vector(vec![5.0]))]);
        // First Adam step moves each coordinate by lr·sign(g).
        assert!((store.get(a).data()[0] - 0.9).abs() < 1e-8);
        assert!((store.get(a).data()[1] - 2.1).abs() < 1e-8);
        assert_eq!(store.get(b).data(), &[3.0]);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![0.25, -7.5]), true);
        let before = store.get(a).clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &store);
        adam.step(&mut store, &[(a, Tensor::vector(vec![1.0, 1.0]))]);
        assert!(store.get(a).bitwise_eq(&before));
    }
}
