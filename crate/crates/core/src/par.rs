//! Data-parallel primitives with a sequential fallback.
//!
//! The hot loops in this crate (batched convolutions, per-epoch generation,
//! Monte-Carlo oracles, cross-validation folds) are all shaped as "map an
//! index range, collect in order". With the default `parallel` feature that
//! map runs on rayon; without it the same code runs sequentially.
//!
//! Ordered collection is the contract: every reduction over the mapped
//! results happens afterwards in index order, so parallel and sequential
//! builds produce bit-identical floating-point output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, collecting results in input order.
pub fn map_slice<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    map_indexed(items.len(), |i| f(&items[i]))
}

/// True when this build dispatches onto rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
