//! Core library for collective parking-availability forecasting.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode automatic differentiation
//!   on an explicit tape.
//! - [`spectral`]: orthonormal DCT-II/III transforms along an axis and the
//!   path-graph Laplacian oracle that certifies the spectral operator.
//! - [`model`]: the forecasting network — virtual-node spatial fusion, the
//!   Graph Cosine Operator, and causal masked multi-head attention.
//! - [`data`]: CSV ingestion, lot filtering, imputation, chronological
//!   splitting, sliding windows, and a synthetic generator.
//! - [`train`]: MAE optimization with Adam and a step learning-rate schedule,
//!   horizon-bucket metrics, and the HA/VAR classical baselines.
//! - [`checkpoint`]: versioned, digest-verified parameter serialization.
//! - [`timing`]: the GCO-vs-dense-MSA timing harness.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod spectral;
pub mod tensor;
pub mod timing;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
