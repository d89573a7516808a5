//! A small reverse-mode automatic differentiation engine over `f64` ndarrays.
//!
//! All tensors carry an explicit batch dimension (`[N, C, H, W]` for grids,
//! `[N, F]` for features); batched operations parallelize over the batch via
//! [`crate::par`] and reduce in index order, so results do not depend on the
//! thread count.
//!
//! The engine is deliberately minimal: exactly the operations the denoiser
//! U-Net, EEGNet and TSception need, each with a hand-derived backward pass
//! that is checked against central finite differences in the test suite.

mod adam;
mod params;
mod tape;

pub use adam::Adam;
pub use params::{he_normal, normal_init, ParamId, ParamStore, TensorIndexEntry};
pub use tape::{Grads, Tape, Tensor, Var};

use crate::error::Result;

/// One forward pass: a tape plus the binding of parameter ids to tape leaves.
///
/// Parameters are bound lazily the first time a layer asks for them, so a
/// pass only materializes the parameters it actually touches.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// The tape leaf holding `id`'s current value.
    pub fn param(&mut self, id: ParamId) -> Var {
        let slot = id.index();
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        self.bound[slot] = Some(v);
        v
    }

    /// Runs backward from `root` and collects gradients for every bound
    /// parameter, in parameter-id order.
    pub fn param_grads(&self, root: Var) -> Result<Vec<(ParamId, Tensor)>> {
        let grads = self.tape.backward(root);
        let mut out = Vec::new();
        for (slot, var) in self.bound.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads.get(*v) {
                    out.push((ParamId::from_index(slot), g.clone()));
                }
            }
        }
        Ok(out)
    }
}
