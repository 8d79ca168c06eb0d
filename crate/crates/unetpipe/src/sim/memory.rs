//! Per-device peak activation memory under the micro-batch pipeline.
//!
//! Each stage holds, for the backward pass, its full-batch input boundary
//! (N items times the incoming activation size, slots included) plus the
//! working set of one micro-batch across its own layers; with recomputation
//! off, the working set covers the whole batch instead. For a uniform
//! unit-activation chain of L compute layers on K devices this is exactly
//! N + (L/K) * (N/M) per device.

use super::ScheduleConfig;
use crate::partition::Partition;

pub fn estimate_memory(partition: &Partition, cfg: &ScheduleConfig) -> Vec<u64> {
    let n = cfg.batch_size as u64;
    let micro = cfg.micro_items() as u64;
    (0..partition.stages())
        .map(|s| {
            let stash = n * (partition.stage_input_acts[s] + partition.stage_slot_in[s]);
            let working = if cfg.recompute_activations {
                micro * partition.stage_working_acts[s]
            } else {
                n * partition.stage_working_acts[s]
            };
            stash + working
        })
        .collect()
}
