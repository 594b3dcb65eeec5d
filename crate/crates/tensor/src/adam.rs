//! Bias-corrected Adam.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every trainable parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on each trainable
    /// tensor. Every trainable tensor must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids() {
            if store.is_trainable(id) && store.get(id).grad.is_none() {
                return Err(TensorError::MissingGrad {
                    name: store.name(id).to_string(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let t = store.get_mut(id);
            let grad = t.grad.take().expect("checked above");
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![w]), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = scalar_store(1.5);
        let mut adam = AdamState::new(&s, AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            s.zero_grads();
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.by_name("w").unwrap().data(), &[1.5]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::with_lr(0.1));
        s.get_mut(s.id("w").unwrap()).grad = Some(vec![1.0]);
        adam.step(&mut s).unwrap();
        let w = s.by_name("w").unwrap().item();
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = scalar_store(0.0);
        let id = s.id("w").unwrap();
        let mut adam = AdamState::new(&s, AdamConfig::with_lr(0.05));
        for _ in 0..100 {
            let w = s.get(id).item();
            s.get_mut(id).grad = Some(vec![2.0 * (w - 3.0)]);
            adam.step(&mut s).unwrap();
        }
        let w = s.get(id).item();
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let err = adam.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }
}
