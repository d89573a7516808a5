//! Named parameter storage with a flat binary serialization.
//!
//! Checkpoints are an opaque little-endian `f64` blob plus a JSON index of
//! `(name, shape, offset)` entries, so a save/load round trip reproduces the
//! exact bit pattern of every weight.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
}

/// All trainable tensors of one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites every tensor with `N(0, std^2)` draws. Test scaffolding for
    /// gradient checks that need all parameters away from zero.
    pub fn randomize(&mut self, std: f64, rng: &mut impl Rng) {
        for p in &mut self.params {
            for v in p.value.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * std;
            }
        }
    }

    /// Flattens all tensors into one little-endian byte blob plus its index.
    pub fn to_blob(&self) -> (Vec<u8>, Vec<TensorIndexEntry>) {
        let mut blob = Vec::with_capacity(self.total_elements() * 8);
        let mut index = Vec::with_capacity(self.params.len());
        for p in &self.params {
            index.push(TensorIndexEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: blob.len(),
            });
            for &v in p.value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (blob, index)
    }

    /// Restores tensor values from a blob written by [`Self::to_blob`].
    ///
    /// The index must match this store's layout (same names, shapes, order).
    pub fn load_blob(&mut self, blob: &[u8], index: &[TensorIndexEntry]) -> Result<()> {
        if index.len() != self.params.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, model expects {}",
                index.len(),
                self.params.len()
            )));
        }
        for (p, entry) in self.params.iter_mut().zip(index) {
            if entry.name != p.name || entry.shape != p.value.shape() {
                return Err(Error::data(format!(
                    "checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            let end = entry.offset + n * 8;
            if end > blob.len() {
                return Err(Error::data("checkpoint blob truncated"));
            }
            let mut next = Tensor::zeros(IxDyn(&entry.shape));
            for (i, v) in next.iter_mut().enumerate() {
                let o = entry.offset + i * 8;
                let mut bytes = [0u8; 8];
                bytes.copy_from_slice(&blob[o..o + 8]);
                *v = f64::from_le_bytes(bytes);
            }
            p.value = next;
        }
        Ok(())
    }
}

/// Kaiming-style init for convolution and linear weights.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    normal_init(shape, std, rng)
}

pub fn normal_init(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}
