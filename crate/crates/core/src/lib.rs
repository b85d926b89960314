//! Conformal prediction whose conditional coverage survives distribution shift.
//!
//! The library trains an invertible two-branch flow that transports a shifted
//! test distribution onto the calibration distribution by minimizing an
//! entropic-regularized Wasserstein-1 distance, then builds prediction sets on
//! normalized inputs and maps them back to the original label space. Alongside
//! the transport model it provides the baselines (split CP, CQR, IW-CP, WC-CP),
//! the coverage diagnostics (worst-slice coverage and its gap, conditional
//! coverage gaps), and numerical verifiers for the transport inequalities the
//! method rests on.
//!
//! Module map:
//!
//! - [`neural`]: small dense networks with reverse-mode gradients, pinball
//!   loss, and Adam. Substrate for quantile regressors and flow subnetworks.
//! - [`ot`]: cost matrices, the Sinkhorn solver with sample-position
//!   gradients, and an exact small-instance Wasserstein-1 solver.
//! - [`flows`]: affine coupling layers, 1-D planar flows, and the branched
//!   transport model with its variants.
//! - [`conformal`]: prediction-set construction for every method.
//! - [`metrics`]: coverage evaluation and inequality verifiers.
//! - [`data`]: synthetic generators, multi-source partitioning, CSV ingestion.
//! - [`train`]: the end-to-end training and inference pipeline, checkpoints.

pub mod conformal;
pub mod data;
pub mod error;
pub mod flows;
pub mod metrics;
pub mod neural;
pub mod ot;
pub mod train;

pub use error::{Error, Result};
