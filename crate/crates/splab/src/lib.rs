//! A desk-scale laboratory for rare spurious correlations in small image
//! classifiers.
//!
//! The crate covers the full experimental loop:
//!
//! * [`spurious`] — deterministic spurious patterns and dataset poisoning,
//! * [`nn`] — a from-scratch training engine (MLPs, a small CNN, CIFAR-style
//!   ResNets) with reverse-mode gradients and Hessian-vector products,
//! * [`data`] — IDX / CIFAR-10 binary loaders and train-time augmentation,
//! * [`metrics`] / [`stats`] — spurious scores, accuracy, pattern norms and
//!   Pearson correlation with exact two-sided p-values,
//! * [`probes`] — input-sensitivity curves and first-layer weight
//!   importance maps,
//! * [`deletion`] — incremental retraining and group-influence parameter
//!   updates, with a conjugate-gradient inverse-HVP solver,
//! * [`checkpoint`] — a stable binary model format,
//! * [`harness`] — config-driven experiment grids, resumable runs and
//!   report generation.

pub mod checkpoint;
pub mod data;
pub mod deletion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod probes;
pub mod rng;
pub mod spurious;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
