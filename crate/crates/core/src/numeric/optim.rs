use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay. Learning rates come
/// from each parameter's group; frozen groups are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let trainable: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for &id in &trainable {
            if grads.get(id).is_none() {
                return Err(Error::MissingGradient(store.param(id).name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for id in trainable {
            let lr = store.group_of(id).learning_rate;
            let g = grads.get(id).expect("checked above");
            let p = store.get_mut(id);
            if g.len() != p.len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *pi -= lr * weight_decay * *pi;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn one_param(lr: f64, frozen: bool, value: f64) -> (ParamStore, crate::numeric::ParamId) {
        let mut store = ParamStore::new();
        let g = store.group("g", lr, frozen);
        let id = store.add("p", Tensor::scalar(value), g);
        (store, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = one_param(0.1, false, 1.0);
        let mut grads = Gradients::new(1);
        grads.accumulate_one(id, &Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store, &grads).unwrap();
        // m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.get(id).item().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let (mut store, id) = one_param(0.1, false, 2.0);
        let mut grads = Gradients::new(1);
        grads.accumulate_one(id, &Tensor::scalar(0.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut store, &grads).unwrap();
        // p -= lr * wd * p
        assert!((store.get(id).item().unwrap() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_group_is_bit_identical() {
        let (mut store, id) = one_param(0.1, true, 0.123_456_789);
        let before = store.get(id).clone();
        let mut grads = Gradients::new(1);
        grads.accumulate_one(id, &Tensor::scalar(5.0));
        AdamW::new(AdamWConfig::default())
            .step(&mut store, &grads)
            .unwrap();
        assert!(store.get(id).bit_eq(&before));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, _) = one_param(0.1, false, 1.0);
        let err = AdamW::new(AdamWConfig::default())
            .step(&mut store, &Gradients::new(1))
            .unwrap_err();
        assert!(matches!(err, Error::MissingGradient(name) if name == "p"));
    }
}
