//! Feed-forward, backpropagation-free 3D segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: grids, NIfTI-1 I/O, pooling / interpolation primitives and a
//!   synthetic phantom generator.
//! - [`preprocess`]: Lanczos resampling, per-slice CLAHE and intensity
//!   normalisation.
//! - [`saab`]: Saab / channel-wise Saab transforms and the four-level
//!   neighbourhood encoder.
//! - [`feat_learn`]: supervised feature generation (least-squares normal
//!   transform) and selection (relevant feature test).
//! - [`gbdt`]: histogram gradient-boosted regression trees.
//! - [`decoder`]: coarse regression plus bottom-up residual correction.
//! - [`gusl`]: one trained segmentation head tying the above together.
//! - [`pipeline`]: two-stage cascade, cross-validation and size reporting.
//! - [`bundle`]: on-disk model bundle.
//! - [`metrics`]: DSC, ABD and HD95.

pub mod bundle;
pub mod decoder;
pub mod error;
pub mod feat_learn;
pub mod gbdt;
pub mod gusl;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod saab;
mod seed;
pub mod volume;

pub use error::{Error, Result};
pub use seed::derive_seed;
