//! Adam optimizer over a parameter store, with first/second moment tensors
//! per parameter and bias-corrected updates.

use spineseg_core::{ParameterStore, Result, Tensor};

use crate::config::OptimConfig;

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m1: Vec<Tensor>,
    pub m2: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: OptimConfig, store: &ParameterStore) -> Adam {
        let m1 = store.iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        let m2 = store.iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Adam {
            cfg,
            step: 0,
            m1,
            m2,
        }
    }

    /// One update from the gradients currently in the store.
    pub fn apply(&mut self, store: &mut ParameterStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (lr, eps) = (self.cfg.lr, self.cfg.eps);
        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let grad = store.grad(id).clone();
            let m1 = &mut self.m1[i];
            let m2 = &mut self.m2[i];
            for ((m, v), &g) in m1
                .data_mut()
                .iter_mut()
                .zip(m2.data_mut().iter_mut())
                .zip(grad.data())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
            let value = store.value_mut(id);
            for ((p, &m), &v) in value
                .data_mut()
                .iter_mut()
                .zip(m1.data())
                .zip(m2.data())
            {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> ParameterStore {
        let mut store = ParameterStore::new();
        store
            .register("w", Tensor::from_vec(&[values.len()], values).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let mut store = store_with(vec![1.0, -2.0]);
        let id = store.find("w").unwrap();
        store.grad_mut(id).fill(3.0);
        let mut adam = Adam::new(
            OptimConfig {
                lr: 0.0,
                ..OptimConfig::default()
            },
            &store,
        );
        adam.apply(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With bias correction the first Adam step is ≈ lr·sign(g).
        let mut store = store_with(vec![0.0]);
        let id = store.find("w").unwrap();
        store.grad_mut(id).data_mut()[0] = 0.5;
        let mut adam = Adam::new(OptimConfig::default(), &store);
        adam.apply(&mut store).unwrap();
        let p = store.value(id).data()[0];
        assert!((p + 1e-3).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut store = store_with(vec![0.3, -0.7, 1.1]);
            let id = store.find("w").unwrap();
            let mut adam = Adam::new(OptimConfig::default(), &store);
            for k in 0..10 {
                let g = store.value(id).map(|v| v * 0.5 + k as f64 * 0.01);
                *store.grad_mut(id) = g;
                adam.apply(&mut store).unwrap();
            }
            store.value(id).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
