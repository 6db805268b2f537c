//! Minimal residual-network kit: layers with exact reverse-mode gradients,
//! losses, optimizers, the step-halving schedule, freezing and evaluation.
//!
//! All kernels are generic over [`Scalar`](crate::Scalar); training runs in
//! `f32`, gradient checks in `f64`.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod spec;
pub mod train;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::tensor::Tensor;

pub use data::{Batch, LabeledSet, Targets};
pub use eval::{argmax, evaluate, Metrics};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use init::{build_model, replace_head};
pub use loss::{class_weights, loss_ce, loss_weighted_ova, LossKind};
pub use model::{freeze_except_head, FreezeMask, Mode, Network};
pub use optim::{lr_schedule, OptState, OptimizerKind};
pub use spec::{ModelSpec, StageSpec};
pub use train::{fit, train_step, FitOptions, FitOutcome, HistoryRow, StepContext, TrainConfig};

/// Logits (`N x class_count`) of a checkpoint on a batch.
///
/// Train mode normalizes with batch statistics; the running statistics it
/// would update are discarded because checkpoints are immutable values.
pub fn forward(ckpt: &Checkpoint, batch: &Batch<f32>, mode: Mode) -> Result<Tensor<f32>> {
    let net = Network::<f32>::from_checkpoint(ckpt)?;
    let tape = net.forward(&batch.act(), mode, None)?;
    Tensor::new(vec![batch.len(), ckpt.class_count], tape.logits)
}
