//! # eegdiff
//!
//! Conditional denoising diffusion for multichannel EEG epochs, plus the
//! evaluation harness that measures what mixing synthetic epochs into
//! classifier training does to accuracy.
//!
//! The crate is organised around five pieces:
//!
//! - [`schedule`] / [`diffusion`] — the Gaussian diffusion math: linear noise
//!   schedules, forward marginals, the closed-form posterior, noise-level
//!   sampling, target estimation and the iterative refinement sampler. The
//!   sampler is conditioned on a copy of a real epoch perturbed with scaled
//!   standard-normal noise (`x + delta * Z`).
//! - [`denoiser`] — the conditional noise-prediction U-Net `f(x_delta, y_t, gamma)`
//!   with continuous noise-level conditioning, built on the small reverse-mode
//!   [`nn`] engine in this crate.
//! - [`dataset`] / [`import`] / [`preprocess`] — ingest of DEAP-style and
//!   SADT-style recordings into a canonical on-disk format, channel padding,
//!   z-score normalization and subject-independent splitting.
//! - [`classifiers`] — SVM-RBF, EEGNet and TSception baselines with stratified
//!   cross-validation and confidence intervals.
//! - [`results`] — the resumable run-record store and report arithmetic used
//!   by the experiment CLI.
//!
//! Everything that draws randomness takes an explicit seeded stream (see
//! [`rng`]), so all sampling, training and evaluation paths are reproducible.
//! Batch work is data-parallel through [`par`]; building with
//! `--no-default-features` swaps in a sequential fallback that produces
//! bit-identical results.

pub mod classifiers;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod import;
pub mod nn;
pub mod par;
pub mod preprocess;
pub mod results;
pub mod rng;
pub mod schedule;
pub mod toy;
pub mod tsne;

pub use dataset::{EegEpoch, LabeledDataset, Provenance, TargetName};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use diffusion::{DiffusionConfig, NoisePredictor};
pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
