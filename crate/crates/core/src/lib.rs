//! Histopathology knowledge-transfer toolkit.
//!
//! * [`standardize`]: rescale images to a common physical resolution, tile
//!   them with overlap and drop low-contrast background patches.
//! * [`nn`]: a small residual CNN with exact gradients and the training,
//!   fine-tuning and deep-tuning protocol.
//! * [`distill`]: merge same-architecture checkpoints by stacking unfolded
//!   weights and truncating their SVD.
//! * [`xfer`]: synthetic domains and source-by-target transfer experiments.
//!
//! Numeric kernels are generic over [`Scalar`]; the aliases below pin the
//! precisions used on disk (`f32`) and for factorizations (`f64`).

pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod io;
pub mod nn;
pub mod pool;
pub mod rng;
pub mod scalar;
pub mod standardize;
pub mod tensor;
pub mod xfer;

pub use checkpoint::{assert_compatible, read_checkpoint, write_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Storage precision of checkpoints.
pub type Tensor32 = Tensor<f32>;
/// Precision of finite-difference checks.
pub type Tensor64 = Tensor<f64>;
pub type Matrix32 = distill::Matrix<f32>;
pub type Matrix64 = distill::Matrix<f64>;
/// Network in training precision.
pub type Network32 = nn::Network<f32>;
/// Network in gradient-check precision.
pub type Network64 = nn::Network<f64>;

/// Version string recorded in run provenance.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
