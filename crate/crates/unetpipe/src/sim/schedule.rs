//! Workload builders for the two schedule families, plus windowed
//! steady-state throughput.

use super::memory::estimate_memory;
use super::{
    metrics_from_timeline, run_schedule, Phase, PipelineMetrics, ScheduleConfig, SimError,
    TaskSpec, Timeline,
};
use crate::graph::{LayerKind, ModelGraph};
use crate::partition::Partition;

/// Micro-batch pipeline over a contiguous stage partition: forward flows
/// stage to stage; with the phase barrier, backward starts only after every
/// forward of the round, and rounds are serialized (the gradient step).
#[allow(clippy::needless_range_loop)] // task ids are cross-referenced by (stage, micro)
pub fn simulate_gpipe(
    partition: &Partition,
    cfg: &ScheduleConfig,
) -> Result<(Timeline, PipelineMetrics), SimError> {
    cfg.validate()?;
    let stages = partition.stages();
    if stages != cfg.devices {
        return Err(SimError::StageDeviceMismatch { stages, devices: cfg.devices });
    }
    let m = cfg.micro_batches;
    let rounds = cfg.repeat_batches;
    let items = cfg.micro_items() as f64;
    let has_backward = cfg.backward_cost_ratio > 0.0;
    let comm = cfg.comm_cost_per_boundary;
    // Pseudo-devices for the boundary links sit after the compute devices.
    let link = |s: usize| stages + s;
    let device_count = stages + stages.saturating_sub(1);

    let mut tasks: Vec<TaskSpec> = Vec::new();
    let mut round_tail: Option<usize> = None; // last task of the previous round

    for round in 0..rounds {
        let mut fwd_id = vec![vec![0usize; m]; stages];
        for micro in 0..m {
            for stage in 0..stages {
                let mut deps = Vec::new();
                if stage > 0 {
                    if comm > 0.0 {
                        let c = TaskSpec {
                            device: Some(link(stage - 1)),
                            duration: comm,
                            phase: Phase::Comm,
                            micro,
                            priority_micro: micro,
                            stage: stage - 1,
                            round,
                            deps: vec![fwd_id[stage - 1][micro]],
                        };
                        tasks.push(c);
                        deps.push(tasks.len() - 1);
                    } else {
                        deps.push(fwd_id[stage - 1][micro]);
                    }
                }
                if cfg.phase_barrier {
                    if let Some(tail) = round_tail {
                        deps.push(tail);
                    }
                }
                tasks.push(TaskSpec {
                    device: Some(stage),
                    duration: partition.stage_costs[stage] * items,
                    phase: Phase::Forward,
                    micro,
                    priority_micro: micro,
                    stage,
                    round,
                    deps,
                });
                fwd_id[stage][micro] = tasks.len() - 1;
            }
        }
        // One synchronization point after all forwards of the round.
        let fence = TaskSpec {
            device: None,
            duration: 0.0,
            phase: Phase::Forward,
            micro: 0,
            priority_micro: 0,
            stage: 0,
            round,
            deps: fwd_id.iter().flat_map(|v| v.iter().copied()).collect(),
        };
        tasks.push(fence);
        let fence_id = tasks.len() - 1;

        if has_backward {
            let mut bwd_id = vec![vec![0usize; m]; stages];
            for micro in (0..m).rev() {
                for stage in (0..stages).rev() {
                    let mut deps = vec![fwd_id[stage][micro]];
                    if cfg.phase_barrier {
                        deps.push(fence_id);
                    }
                    if stage + 1 < stages {
                        if comm > 0.0 {
                            let c = TaskSpec {
                                device: Some(link(stage)),
                                duration: comm,
                                phase: Phase::Comm,
                                micro,
                                priority_micro: m - 1 - micro,
                                stage,
                                round,
                                deps: vec![bwd_id[stage + 1][micro]],
                            };
                            tasks.push(c);
                            deps.push(tasks.len() - 1);
                        } else {
                            deps.push(bwd_id[stage + 1][micro]);
                        }
                    }
                    tasks.push(TaskSpec {
                        device: Some(stage),
                        duration: partition.stage_costs[stage] * items * cfg.backward_cost_ratio,
                        phase: Phase::Backward,
                        micro,
                        priority_micro: m - 1 - micro,
                        stage,
                        round,
                        deps,
                    });
                    bwd_id[stage][micro] = tasks.len() - 1;
                }
            }
            let tail = TaskSpec {
                device: None,
                duration: 0.0,
                phase: Phase::Backward,
                micro: 0,
                priority_micro: 0,
                stage: 0,
                round,
                deps: bwd_id.iter().flat_map(|v| v.iter().copied()).collect(),
            };
            tasks.push(tail);
            round_tail = Some(tasks.len() - 1);
        } else {
            round_tail = Some(fence_id);
        }
    }

    let (_, timeline) = run_schedule(&tasks, device_count);
    let memory = estimate_memory(partition, cfg);
    let metrics = metrics_from_timeline(
        &timeline,
        cfg.devices,
        cfg.batch_size * cfg.repeat_batches,
        memory,
    );
    Ok((timeline, metrics))
}

/// Earliest-start schedule honoring the raw graph edges under a per-layer
/// device placement. Cross-device skip edges are followed directly: the
/// producing device holds its output and the consumer reads it whenever it
/// runs, however far downstream. The `stage` field of emitted events is the
/// layer id.
pub fn simulate_dependency_schedule(
    graph: &ModelGraph,
    placement: &[usize],
    cfg: &ScheduleConfig,
) -> Result<(Timeline, PipelineMetrics), SimError> {
    cfg.validate()?;
    let n = graph.layers.len();
    if placement.len() != n {
        return Err(SimError::IncompletePlacement { expected: n, got: placement.len() });
    }
    for (layer, &device) in placement.iter().enumerate() {
        if device >= cfg.devices {
            return Err(SimError::PlacementOutOfRange { layer, device, devices: cfg.devices });
        }
    }

    let m = cfg.micro_batches;
    let rounds = cfg.repeat_batches;
    let items = cfg.micro_items() as f64;
    let has_backward = cfg.backward_cost_ratio > 0.0;
    let comm = cfg.comm_cost_per_boundary;
    // Links between device pairs, allocated on demand.
    let mut links: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
    let mut device_count = cfg.devices;
    let consumers = graph.consumers();

    let mut tasks: Vec<TaskSpec> = Vec::new();
    let mut round_tail: Option<usize> = None;

    for round in 0..rounds {
        let mut fwd_id = vec![vec![0usize; n]; m];
        for micro in 0..m {
            for layer in &graph.layers {
                let lid = layer.id;
                let mut deps = Vec::new();
                for &u in &layer.inputs {
                    if comm > 0.0 && placement[u] != placement[lid] {
                        let pair = (placement[u].min(placement[lid]), placement[u].max(placement[lid]));
                        let link = *links.entry(pair).or_insert_with(|| {
                            let id = device_count;
                            device_count += 1;
                            id
                        });
                        tasks.push(TaskSpec {
                            device: Some(link),
                            duration: comm,
                            phase: Phase::Comm,
                            micro,
                            priority_micro: micro,
                            stage: u,
                            round,
                            deps: vec![fwd_id[micro][u]],
                        });
                        deps.push(tasks.len() - 1);
                    } else {
                        deps.push(fwd_id[micro][u]);
                    }
                }
                // Micro-batches of one layer run in order.
                if micro > 0 {
                    deps.push(fwd_id[micro - 1][lid]);
                }
                if cfg.phase_barrier {
                    if let Some(tail) = round_tail {
                        deps.push(tail);
                    }
                }
                tasks.push(TaskSpec {
                    device: Some(placement[lid]),
                    duration: layer.compute_cost * items,
                    phase: Phase::Forward,
                    micro,
                    priority_micro: micro,
                    stage: lid,
                    round,
                    deps,
                });
                fwd_id[micro][lid] = tasks.len() - 1;
            }
        }
        let fence = TaskSpec {
            device: None,
            duration: 0.0,
            phase: Phase::Forward,
            micro: 0,
            priority_micro: 0,
            stage: 0,
            round,
            deps: fwd_id.iter().flat_map(|v| v.iter().copied()).collect(),
        };
        tasks.push(fence);
        let fence_id = tasks.len() - 1;

        if has_backward {
            let mut bwd_id = vec![vec![0usize; n]; m];
            for micro in (0..m).rev() {
                for layer in graph.layers.iter().rev() {
                    let lid = layer.id;
                    let mut deps = vec![fwd_id[micro][lid]];
                    if cfg.phase_barrier {
                        deps.push(fence_id);
                    }
                    for &c in &consumers[lid] {
                        deps.push(bwd_id[micro][c]);
                    }
                    if micro + 1 < m {
                        deps.push(bwd_id[micro + 1][lid]);
                    }
                    tasks.push(TaskSpec {
                        device: Some(placement[lid]),
                        duration: layer.compute_cost * items * cfg.backward_cost_ratio,
                        phase: Phase::Backward,
                        micro,
                        priority_micro: m - 1 - micro,
                        stage: lid,
                        round,
                        deps,
                    });
                    bwd_id[micro][lid] = tasks.len() - 1;
                }
            }
            let tail = TaskSpec {
                device: None,
                duration: 0.0,
                phase: Phase::Backward,
                micro: 0,
                priority_micro: 0,
                stage: 0,
                round,
                deps: bwd_id.iter().flat_map(|v| v.iter().copied()).collect(),
            };
            tasks.push(tail);
            round_tail = Some(tasks.len() - 1);
        } else {
            round_tail = Some(fence_id);
        }
    }

    let (_, timeline) = run_schedule(&tasks, device_count);
    let memory = placement_memory(graph, placement, cfg);
    let metrics = metrics_from_timeline(
        &timeline,
        cfg.devices,
        cfg.batch_size * cfg.repeat_batches,
        memory,
    );
    Ok((timeline, metrics))
}

/// Coarse per-device memory for a raw placement: the micro-batch working
/// set of resident layers plus full-batch stashes for activations another
/// device consumes.
fn placement_memory(graph: &ModelGraph, placement: &[usize], cfg: &ScheduleConfig) -> Vec<u64> {
    let n_items = cfg.batch_size as u64;
    let micro_items = cfg.micro_items() as u64;
    let consumers = graph.consumers();
    let mut peak = vec![0u64; cfg.devices];
    for layer in &graph.layers {
        let device = placement[layer.id];
        if matches!(layer.kind, LayerKind::Source | LayerKind::Sink) {
            continue;
        }
        let crosses = consumers[layer.id].iter().any(|&c| placement[c] != device);
        peak[device] += if crosses {
            n_items * layer.activation_elems
        } else {
            micro_items * layer.activation_elems
        };
    }
    if let Some(source) = graph.source_id() {
        peak[placement[source]] += n_items * graph.layers[source].activation_elems;
    }
    peak
}

/// What to push through [`steady_state_throughput`].
pub enum Workload<'a> {
    /// Sequentialized model under the stage pipeline.
    Pipelined { partition: &'a Partition },
    /// Raw graph under a per-layer placement.
    Raw { graph: &'a ModelGraph, placement: &'a [usize] },
}

/// Work-normalized throughput over the steady window: busy device time
/// between the completion of round `k-1` and the completion of round
/// `R-1-k`, divided by the window length and the total simulated cost per
/// batch item. With unit-scaled costs this counts completed batch-sized
/// units of work per unit time; warm-up and drain are excluded.
pub fn steady_state_throughput(workload: Workload, cfg: &ScheduleConfig) -> Result<f64, SimError> {
    cfg.validate()?;
    let needed = (2 * cfg.devices + 1).max(8);
    if cfg.repeat_batches < needed {
        return Err(SimError::InsufficientRounds { repeat: cfg.repeat_batches, needed });
    }

    let (timeline, per_item_cost) = match workload {
        Workload::Pipelined { partition } => {
            let (timeline, _) = simulate_gpipe(partition, cfg)?;
            let fwd: f64 = partition.stage_costs.iter().sum();
            (timeline, fwd * (1.0 + cfg.backward_cost_ratio))
        }
        Workload::Raw { graph, placement } => {
            let (timeline, _) = simulate_dependency_schedule(graph, placement, cfg)?;
            let fwd: f64 = graph.layers.iter().map(|l| l.compute_cost).sum();
            (timeline, fwd * (1.0 + cfg.backward_cost_ratio))
        }
    };
    if per_item_cost <= 0.0 {
        return Ok(0.0);
    }

    let k = cfg.devices;
    let round_end = |round: usize| -> f64 {
        timeline
            .events
            .iter()
            .filter(|e| e.round == round)
            .map(|e| e.end)
            .fold(0.0, f64::max)
    };
    let t1 = round_end(k - 1);
    let t2 = round_end(cfg.repeat_batches - 1 - k);
    if t2 <= t1 {
        return Ok(0.0);
    }

    let busy: f64 = timeline
        .events
        .iter()
        .filter(|e| e.device < cfg.devices && e.phase != Phase::Comm)
        .map(|e| {
            let lo = e.start.max(t1);
            let hi = e.end.min(t2);
            (hi - lo).max(0.0)
        })
        .sum();
    Ok(busy / ((t2 - t1) * per_item_cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::sequentialize;
    use crate::graph::{LayerSpec, ModelGraph};
    use crate::partition::partition_balanced;
    use crate::sim::{check_gpipe_timeline, phase_horizon, phase_utilization};

    fn unit_chain(len: usize) -> ModelGraph {
        let mut layers = vec![LayerSpec {
            id: 0,
            name: "in".into(),
            kind: LayerKind::Source,
            compute_cost: 0.0,
            param_count: 0,
            activation_elems: 1,
            inputs: vec![],
        }];
        for i in 1..=len {
            layers.push(LayerSpec {
                id: i,
                name: format!("l{i}"),
                kind: LayerKind::Affine,
                compute_cost: 1.0,
                param_count: 1,
                activation_elems: 1,
                inputs: vec![i - 1],
            });
        }
        layers.push(LayerSpec {
            id: len + 1,
            name: "out".into(),
            kind: LayerKind::Sink,
            compute_cost: 0.0,
            param_count: 0,
            activation_elems: 0,
            inputs: vec![len],
        });
        ModelGraph { layers, output_id: len }
    }

    fn unit_partition(k: usize) -> crate::partition::Partition {
        let seq = sequentialize(&unit_chain(k)).unwrap();
        partition_balanced(&seq, k).unwrap()
    }

    #[test]
    fn forward_horizon_is_pipeline_fill() {
        // k=3, m=2, unit stage costs: forward span = k + m - 1.
        let p = unit_partition(3);
        let mut cfg = ScheduleConfig::new(3, 2, 2);
        cfg.backward_cost_ratio = 0.0;
        let (timeline, _) = simulate_gpipe(&p, &cfg).unwrap();
        assert_eq!(phase_horizon(&timeline, Phase::Forward), 4.0);
        check_gpipe_timeline(&timeline, 3, true).unwrap();
    }

    #[test]
    fn single_device_has_no_bubble() {
        let p = unit_partition(1);
        for m in [1, 2, 4, 8] {
            let cfg = ScheduleConfig::new(1, m, m);
            let (timeline, metrics) = simulate_gpipe(&p, &cfg).unwrap();
            assert_eq!(metrics.utilization, 1.0);
            assert_eq!(metrics.bubble_fraction, 0.0);
            assert_eq!(phase_utilization(&timeline, Phase::Forward, 1), 1.0);
            assert_eq!(phase_utilization(&timeline, Phase::Backward, 1), 1.0);
        }
    }

    #[test]
    fn forward_phase_utilization_closed_form() {
        // k=4, m=8: forward utilization m/(m+k-1) = 8/11, exactly.
        let p = unit_partition(4);
        let cfg = ScheduleConfig::new(4, 8, 8);
        let (timeline, _) = simulate_gpipe(&p, &cfg).unwrap();
        assert_eq!(phase_utilization(&timeline, Phase::Forward, 4), 8.0 / 11.0);
    }

    #[test]
    fn backward_runs_micros_in_reverse() {
        let p = unit_partition(2);
        let cfg = ScheduleConfig::new(2, 3, 3);
        let (timeline, _) = simulate_gpipe(&p, &cfg).unwrap();
        let backs: Vec<usize> = timeline
            .events
            .iter()
            .filter(|e| e.phase == Phase::Backward && e.device == 1)
            .map(|e| e.micro)
            .collect();
        assert_eq!(backs, vec![2, 1, 0]);
    }

    #[test]
    fn chain_dependency_schedule_matches_gpipe() {
        // A contiguous placement of a pure chain must reproduce the stage
        // pipeline's timing exactly.
        let g = unit_chain(4);
        let seq = sequentialize(&g).unwrap();
        let p = partition_balanced(&seq, 2).unwrap();
        let cfg = ScheduleConfig::new(2, 2, 2);
        let (_, gp) = simulate_gpipe(&p, &cfg).unwrap();

        let ranges = p.stage_ranges();
        let placement: Vec<usize> = (0..g.layers.len())
            .map(|l| ranges.iter().position(|r| r.contains(&l)).unwrap())
            .collect();
        let (_, dep) = simulate_dependency_schedule(&g, &placement, &cfg).unwrap();
        assert_eq!(gp.makespan, dep.makespan);
        assert_eq!(gp.throughput, dep.throughput);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = unit_partition(2);
        let cfg = ScheduleConfig::new(3, 1, 1);
        assert!(matches!(
            simulate_gpipe(&p, &cfg),
            Err(SimError::StageDeviceMismatch { stages: 2, devices: 3 })
        ));

        let g = unit_chain(3);
        let cfg = ScheduleConfig::new(2, 1, 1);
        assert!(matches!(
            simulate_dependency_schedule(&g, &[0, 0], &cfg),
            Err(SimError::IncompletePlacement { .. })
        ));
        assert!(matches!(
            simulate_dependency_schedule(&g, &[0, 0, 5, 0, 0], &cfg),
            Err(SimError::PlacementOutOfRange { layer: 2, device: 5, .. })
        ));
    }

    #[test]
    fn steady_throughput_single_device_is_inverse_cost() {
        // One device: one batch per total per-batch cost.
        let p = unit_partition(1);
        let mut cfg = ScheduleConfig::new(1, 1, 1);
        cfg.backward_cost_ratio = 1.0;
        cfg.repeat_batches = 16;
        let thr = steady_state_throughput(Workload::Pipelined { partition: &p }, &cfg).unwrap();
        assert!((thr - 0.5).abs() < 1e-12); // cost 1 forward + 1 backward
        let mut fwd_only = cfg.clone();
        fwd_only.backward_cost_ratio = 0.0;
        let thr =
            steady_state_throughput(Workload::Pipelined { partition: &p }, &fwd_only).unwrap();
        assert!((thr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn comm_occupies_links_not_devices() {
        let p = unit_partition(3);
        let mut cfg = ScheduleConfig::new(3, 2, 2);
        cfg.comm_cost_per_boundary = 0.5;
        cfg.backward_cost_ratio = 0.0;
        let (timeline, _) = simulate_gpipe(&p, &cfg).unwrap();
        let comm: Vec<_> =
            timeline.events.iter().filter(|e| e.phase == Phase::Comm).collect();
        assert!(!comm.is_empty());
        assert!(comm.iter().all(|e| e.device >= 3), "links sit after compute devices");
        // Downstream forward waits for the transfer.
        let f10 = timeline
            .events
            .iter()
            .find(|e| e.phase == Phase::Forward && e.stage == 1 && e.micro == 0)
            .unwrap();
        assert_eq!(f10.start, 1.5);
    }

    #[test]
    fn steady_throughput_needs_enough_rounds() {
        let p = unit_partition(2);
        let cfg = ScheduleConfig::new(2, 1, 1);
        assert!(matches!(
            steady_state_throughput(Workload::Pipelined { partition: &p }, &cfg),
            Err(SimError::InsufficientRounds { .. })
        ));
    }
}
