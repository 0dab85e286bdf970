//! Block-wise rollback refine-tuning for retrieval networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`] and [`tensor`]: dense tensors with a reverse-mode tape.
//! - [`model`]: a block-partitioned convolutional extractor with an FC head.
//! - [`optim`]: SGD with Nesterov momentum, weight decay and per-group rates.
//! - [`rollback`]: snapshots, weight rollback and the strategy schedules.
//! - [`trainer`]: mini-batch training across a schedule.
//! - [`eval`]: flip-fused feature extraction, distances, CMC and mAP.
//! - [`data`]: the synthetic identity datasets and their binary format.
//! - [`checkpoint`]: the versioned tensor container used for checkpoints.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod real;
pub mod rollback;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Graph, Mode, ParamId, Var};
pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
