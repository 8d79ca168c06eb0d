//! Pipeline-parallelism planning and verification for U-Net-style networks
//! at desk scale.
//!
//! The pieces, in dataflow order:
//!
//! - [`graph`]: the layered-network IR with compute/parameter/activation
//!   annotations, validation, and cost totals.
//! - [`unet`]: a parameterized U-Net graph builder (doubling filter widths,
//!   symmetric decoder, channel-concat skips).
//! - [`chain`]: the sequentializing transform that replaces long-range skip
//!   edges with pass-through slots, making the model a strict chain.
//! - [`partition`]: exact bottleneck-minimizing contiguous stage assignment.
//! - [`sim`]: deterministic event simulators for the micro-batch stage
//!   pipeline and for raw dependency schedules, plus the per-device memory
//!   model and steady-state throughput measurement.
//! - [`exec`]: a small numeric engine that actually runs serial and
//!   pipelined training steps and proves they produce the same gradients.
//! - [`curriculum`]: patch-size curriculum plans and positive-biased patch
//!   sampling.
//!
//! Every capability has a runnable demo under `examples/`.

pub mod chain;
pub mod cli;
pub mod curriculum;
pub mod exec;
pub mod formats;
pub mod graph;
pub mod manifest;
pub mod partition;
pub mod sim;
pub mod unet;

pub use chain::{passthrough_memory_overhead, sequentialize, Cell, SequentialModel};
pub use graph::{total_cost, validate_graph, LayerKind, LayerSpec, ModelGraph, ValidationReport};
pub use partition::{partition_balanced, partition_balanced_by, partition_fixed, Partition};
pub use sim::{
    estimate_memory, simulate_dependency_schedule, simulate_gpipe, steady_state_throughput,
    PipelineMetrics, ScheduleConfig, Timeline,
};
pub use unet::{build_unet, UNetConfig};
