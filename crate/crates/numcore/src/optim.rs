//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Optimizer state: per-parameter moment buffers plus hyperparameters.
/// Defaults are beta1 = 0.9, beta2 = 0.98, weight decay 0.01.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable tensor in the store that has a
    /// gradient. Clears all gradients afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            for (_, t) in store.iter() {
                self.m.push(vec![0.0; t.numel()]);
                self.v.push(vec![0.0; t.numel()]);
            }
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract(
                "optimizer state does not match the parameter store".into(),
            ));
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for (idx, (_, t)) in store.iter_mut().enumerate() {
            if !t.requires_grad {
                continue;
            }
            let Some(grad) = t.grad.take() else { continue };
            if grad.len() != t.numel() {
                return Err(Error::BadShape {
                    op: "adamw_step",
                    expected: format!("{} gradient entries", t.numel()),
                    got: vec![grad.len()],
                });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let p = &mut t.data[j];
                *p -= self.lr * self.weight_decay * *p;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` followed by linear decay to zero at `total`.
pub fn warmup_linear(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    if warmup > 0 && step < warmup {
        peak * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        peak * (total - step) as f64 / (total - warmup).max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(p: f64) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![1], vec![p]).unwrap().with_grad());
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let (mut s, id) = store_with(1.5);
        s.tensor_mut(id).grad = Some(vec![0.0]);
        let mut opt = AdamW::new(0.1).with_weight_decay(0.0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.tensor(id).data[0], 1.5);
    }

    #[test]
    fn single_step_is_bias_corrected_unit_direction() {
        // p=1, g=1, lr=0.1, wd=0: mhat = vhat = 1, so p -> 1 - 0.1/(1+eps)
        let (mut s, id) = store_with(1.0);
        s.tensor_mut(id).grad = Some(vec![1.0]);
        let mut opt = AdamW::new(0.1).with_weight_decay(0.0);
        opt.step(&mut s).unwrap();
        assert!((s.tensor(id).data[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_is_exact() {
        let (mut s, id) = store_with(2.0);
        s.tensor_mut(id).grad = Some(vec![0.0]);
        let mut opt = AdamW::new(0.5).with_weight_decay(0.01);
        opt.step(&mut s).unwrap();
        // with g = 0 the adaptive term is exactly 0/(0+eps) = 0
        assert_eq!(s.tensor(id).data[0], 2.0 - 0.5 * 0.01 * 2.0);
    }

    #[test]
    fn step_counter_increases() {
        let (mut s, id) = store_with(1.0);
        let mut opt = AdamW::new(0.1);
        for i in 1..=3 {
            s.tensor_mut(id).grad = Some(vec![0.5]);
            opt.step(&mut s).unwrap();
            assert_eq!(opt.step_count(), i);
        }
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(warmup_linear(0, 10, 100, 1.0), 0.0);
        assert_eq!(warmup_linear(5, 10, 100, 1.0), 0.5);
        assert_eq!(warmup_linear(10, 10, 100, 1.0), 1.0);
        assert!((warmup_linear(55, 10, 100, 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(warmup_linear(100, 10, 100, 1.0), 0.0);
    }
}
