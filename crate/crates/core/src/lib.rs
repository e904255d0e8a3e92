//! Gradient-based hyperparameter optimization with a hypernetwork response
//! function, cutting-plane constrained inner training, and a mixed-level
//! outer objective.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense `f64` tensors and tape-based reverse-mode
//!   automatic differentiation.
//! - [`gradcheck`]: finite-difference verification for every registered op.
//! - [`hyperparams`] / [`model`] / [`regularizers`]: the tunable
//!   hyperparameter vector, hypernetwork response layers, and the
//!   differentiable dropout/cutout regularizers they control.
//! - [`cuts`]: the response-gap function, linearized cut construction, and
//!   the Lagrangian penalty added to the inner loss.
//! - [`data`]: IDX-format image dataset ingestion, splitting, batching.
//! - [`training`]: the constrained inner / mixed-level outer training loop,
//!   plus the random-search baseline.

pub mod cuts;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hyperparams;
pub mod model;
pub mod regularizers;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
