//! Adam with linear learning-rate warmup.

use ndarray::IxDyn;

use super::params::{ParamId, ParamStore, TensorIndexEntry};
use super::tape::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate ramps linearly from 0 to `lr`.
    pub warmup: usize,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, warmup: usize) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(IxDyn(store.value(id).shape())))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn set_step_count(&mut self, step: usize) {
        self.step = step;
    }

    fn lr_now(&self) -> f64 {
        let t = (self.step + 1) as f64;
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * (t / self.warmup as f64).min(1.0)
        }
    }

    /// Applies one update from `(parameter, gradient)` pairs.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        let lr = self.lr_now();
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (id, grad) in grads {
            let slot = id.index();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let theta = store.value_mut(*id);
            for ((mv, vv), (tv, gv)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(theta.iter_mut().zip(grad.iter()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *tv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        self.step += 1;
    }

    /// Serializes the optimizer state (m then v) as one blob.
    pub fn to_blob(&self) -> (Vec<u8>, Vec<TensorIndexEntry>) {
        let mut blob = Vec::new();
        let mut index = Vec::new();
        for (kind, tensors) in [("m", &self.m), ("v", &self.v)] {
            for (i, t) in tensors.iter().enumerate() {
                index.push(TensorIndexEntry {
                    name: format!("adam.{kind}.{i}"),
                    shape: t.shape().to_vec(),
                    offset: blob.len(),
                });
                for &x in t.iter() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        (blob, index)
    }

    pub fn load_blob(&mut self, blob: &[u8], index: &[TensorIndexEntry]) -> Result<()> {
        let n = self.m.len();
        if index.len() != 2 * n {
            return Err(crate::error::Error::data(
                "optimizer state does not match model",
            ));
        }
        for (slot, entry) in index.iter().enumerate() {
            let target = if slot < n {
                &mut self.m[slot]
            } else {
                &mut self.v[slot - n]
            };
            if entry.shape != target.shape() {
                return Err(crate::error::Error::data("optimizer tensor shape mismatch"));
            }
            for (i, v) in target.iter_mut().enumerate() {
                let o = entry.offset + i * 8;
                let mut bytes = [0u8; 8];
                bytes.copy_from_slice(&blob[o..o + 8]);
                *v = f64::from_le_bytes(bytes);
            }
        }
        Ok(())
    }
}
