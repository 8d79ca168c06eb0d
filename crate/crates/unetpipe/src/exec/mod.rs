//! Toy numeric engine: small dense tensors with hand-coded forward and
//! reverse-mode kernels for each layer kind, a serial reference executor,
//! and a staged micro-batch pipeline runner used to prove that pipelined
//! execution reproduces serial gradients.

mod gradcheck;
mod layers;
mod pipeline;
mod serial;
mod tensor;

use thiserror::Error;

pub use gradcheck::check_grad_finite_difference;
pub use layers::{infer_shapes, init_params, layer_forward, ParamInit, Params};
pub use pipeline::{run_pipeline, ExecMode, PipelineRun};
pub use serial::{
    backward_serial, forward_serial, forward_serial_chain, loss_value, ActivationCache,
    GradientSet, LossSpec,
};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("layer {layer} has no parameters")]
    MissingParams { layer: usize },
    #[error("batch of {batch} items is not divisible into {micro_batches} micro-batches")]
    BatchIndivisible { batch: usize, micro_batches: usize },
    #[error("config batch size {expected} does not match input batch {got}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("partition has {stages} stages but the schedule expects {devices} devices")]
    StageMismatch { stages: usize, devices: usize },
}
