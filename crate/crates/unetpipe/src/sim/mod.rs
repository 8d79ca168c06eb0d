//! Event-driven schedule simulator for partitioned models.
//!
//! Both simulators (the stage pipeline and the raw dependency schedule)
//! compile their workload into a task list and hand it to one deterministic
//! earliest-start list scheduler: among ready tasks, the next to run is the
//! one with the smallest (start time, round, phase, micro, stage) key, so
//! identical inputs always produce identical timelines. Communication over
//! a stage boundary occupies the link (modelled as a pseudo-device), never
//! the compute devices.

mod memory;
mod schedule;

use std::fmt;

use thiserror::Error;

pub use memory::estimate_memory;
pub use schedule::{
    simulate_dependency_schedule, simulate_gpipe, steady_state_throughput, Workload,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Forward,
    Backward,
    Comm,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::Comm => "comm",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One scheduled occupancy interval. For stage schedules `stage` is the
/// stage index; for raw dependency schedules it is the layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub device: usize,
    pub start: f64,
    pub end: f64,
    pub phase: Phase,
    pub micro: usize,
    pub stage: usize,
    pub round: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    pub events: Vec<SimEvent>,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineMetrics {
    pub makespan: f64,
    /// Completed batch items per unit time over the whole run.
    pub throughput: f64,
    /// Busy compute-device time over available device time.
    pub utilization: f64,
    pub bubble_fraction: f64,
    pub per_device_peak_memory: Vec<u64>,
}

/// Schedule parameters shared by the simulators and the executor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub devices: usize,
    pub micro_batches: usize,
    pub batch_size: usize,
    /// Backward event duration as a multiple of forward duration.
    pub backward_cost_ratio: f64,
    pub comm_cost_per_boundary: f64,
    /// Backward starts only after every forward of the round; rounds are
    /// serialized. Without it, tasks run as soon as dependencies allow.
    pub phase_barrier: bool,
    pub repeat_batches: usize,
    /// Intra-stage activations are recomputed in backward (only the
    /// micro-batch working set is held). Affects the memory model only.
    pub recompute_activations: bool,
}

impl ScheduleConfig {
    pub fn new(devices: usize, micro_batches: usize, batch_size: usize) -> ScheduleConfig {
        ScheduleConfig {
            devices,
            micro_batches,
            batch_size,
            backward_cost_ratio: 2.0,
            comm_cost_per_boundary: 0.0,
            phase_barrier: true,
            repeat_batches: 1,
            recompute_activations: true,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.devices < 1 {
            return Err(SimError::InvalidConfig { reason: "devices must be >= 1".into() });
        }
        if self.micro_batches < 1 {
            return Err(SimError::InvalidConfig { reason: "micro_batches must be >= 1".into() });
        }
        if !self.batch_size.is_multiple_of(self.micro_batches) {
            return Err(SimError::InvalidConfig {
                reason: format!(
                    "batch size {} not divisible into {} micro-batches",
                    self.batch_size, self.micro_batches
                ),
            });
        }
        if self.repeat_batches < 1 {
            return Err(SimError::InvalidConfig { reason: "repeat_batches must be >= 1".into() });
        }
        if !self.backward_cost_ratio.is_finite() || self.backward_cost_ratio < 0.0 {
            return Err(SimError::InvalidConfig { reason: "backward ratio must be >= 0".into() });
        }
        Ok(())
    }

    /// Items per micro-batch.
    pub fn micro_items(&self) -> usize {
        self.batch_size / self.micro_batches
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid schedule config: {reason}")]
    InvalidConfig { reason: String },
    #[error("partition has {stages} stages but the schedule expects {devices} devices")]
    StageDeviceMismatch { stages: usize, devices: usize },
    #[error("placement covers {got} layers, expected {expected}")]
    IncompletePlacement { expected: usize, got: usize },
    #[error("layer {layer} placed on device {device}, but only {devices} devices exist")]
    PlacementOutOfRange { layer: usize, device: usize, devices: usize },
    #[error("steady state needs repeat_batches >= {needed}, got {repeat}")]
    InsufficientRounds { repeat: usize, needed: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineViolation {
    #[error("device {device} runs two events at once (t={at})")]
    DeviceOverlap { device: usize, at: f64 },
    #[error("round {round} micro {micro}: stage {stage} {phase} starts before its dependency ends")]
    DependencyOrder { round: usize, micro: usize, stage: usize, phase: Phase },
    #[error("round {round}: backward starts at {backward_start} before all forwards end at {forward_end}")]
    BarrierBroken { round: usize, backward_start: f64, forward_end: f64 },
}

// ---------------------------------------------------------------------------
// Scheduling engine

pub(crate) struct TaskSpec {
    /// None marks a synchronization point that occupies no resource.
    pub device: Option<usize>,
    pub duration: f64,
    pub phase: Phase,
    pub micro: usize,
    /// Tie-break rank within (round, phase, stage); lets backward run
    /// micro-batches in reverse order.
    pub priority_micro: usize,
    pub stage: usize,
    pub round: usize,
    pub deps: Vec<usize>,
}

/// Earliest-start list schedule over all devices. Returns per-task
/// (start, end) and the assembled timeline of real events.
pub(crate) fn run_schedule(tasks: &[TaskSpec], device_count: usize) -> (Vec<(f64, f64)>, Timeline) {
    let n = tasks.len();
    let mut remaining: Vec<usize> = tasks.iter().map(|t| t.deps.len()).collect();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            dependents[d].push(i);
        }
    }
    let mut ready_time: Vec<f64> = vec![0.0; n];
    let mut ready: Vec<usize> = (0..n).filter(|&i| remaining[i] == 0).collect();
    let mut free: Vec<f64> = vec![0.0; device_count];
    let mut spans: Vec<(f64, f64)> = vec![(0.0, 0.0); n];
    let mut done = vec![false; n];
    let mut events: Vec<SimEvent> = Vec::new();

    let finish = |i: usize,
                      start: f64,
                      ready: &mut Vec<usize>,
                      ready_time: &mut Vec<f64>,
                      remaining: &mut Vec<usize>,
                      done: &mut Vec<bool>,
                      spans: &mut Vec<(f64, f64)>| {
        let end = start + tasks[i].duration;
        spans[i] = (start, end);
        done[i] = true;
        for &j in &dependents[i] {
            ready_time[j] = ready_time[j].max(end);
            remaining[j] -= 1;
            if remaining[j] == 0 {
                ready.push(j);
            }
        }
        end
    };

    while !ready.is_empty() {
        // Synchronization tasks fire as soon as they are ready.
        if let Some(pos) = ready.iter().position(|&i| tasks[i].device.is_none()) {
            let i = ready.swap_remove(pos);
            let start = ready_time[i];
            finish(i, start, &mut ready, &mut ready_time, &mut remaining, &mut done, &mut spans);
            continue;
        }

        let mut best: Option<(usize, f64)> = None;
        for &i in &ready {
            let device = tasks[i].device.unwrap();
            let start = ready_time[i].max(free[device]);
            let better = match best {
                None => true,
                Some((b, bstart)) => {
                    let (ta, tb) = (&tasks[i], &tasks[b]);
                    (
                        start,
                        ta.round,
                        ta.phase,
                        ta.priority_micro,
                        ta.stage,
                        ta.device,
                        i,
                    ) < (bstart, tb.round, tb.phase, tb.priority_micro, tb.stage, tb.device, b)
                }
            };
            if better {
                best = Some((i, start));
            }
        }
        let (i, start) = best.expect("ready set non-empty");
        ready.retain(|&j| j != i);
        let device = tasks[i].device.unwrap();
        let end =
            finish(i, start, &mut ready, &mut ready_time, &mut remaining, &mut done, &mut spans);
        free[device] = end;
        let t = &tasks[i];
        events.push(SimEvent {
            device,
            start,
            end,
            phase: t.phase,
            micro: t.micro,
            stage: t.stage,
            round: t.round,
        });
    }
    debug_assert!(done.iter().all(|&d| d), "dependency cycle in task graph");

    events.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.device.cmp(&b.device))
            .then(a.phase.cmp(&b.phase))
            .then(a.micro.cmp(&b.micro))
    });
    let horizon = events.iter().map(|e| e.end).fold(0.0, f64::max);
    (spans, Timeline { events, horizon })
}

// ---------------------------------------------------------------------------
// Timeline checks and metrics helpers

/// Per-device exclusivity: no two positive-width events overlap.
pub fn check_device_exclusivity(timeline: &Timeline) -> Result<(), TimelineViolation> {
    let mut by_device: std::collections::BTreeMap<usize, Vec<&SimEvent>> = Default::default();
    for e in &timeline.events {
        by_device.entry(e.device).or_default().push(e);
    }
    for (device, mut events) in by_device {
        events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        for pair in events.windows(2) {
            if pair[1].start < pair[0].end - 1e-9 {
                return Err(TimelineViolation::DeviceOverlap { device, at: pair[1].start });
            }
        }
    }
    Ok(())
}

/// Full validity of a stage-pipeline timeline: exclusivity, adjacency
/// dependencies, and (when `barrier`) the per-round forward/backward fence.
pub fn check_gpipe_timeline(
    timeline: &Timeline,
    stages: usize,
    barrier: bool,
) -> Result<(), TimelineViolation> {
    check_device_exclusivity(timeline)?;
    let find = |round: usize, stage: usize, micro: usize, phase: Phase| {
        timeline
            .events
            .iter()
            .find(|e| e.round == round && e.stage == stage && e.micro == micro && e.phase == phase)
    };
    for e in &timeline.events {
        match e.phase {
            Phase::Forward if e.stage > 0 => {
                if let Some(dep) = find(e.round, e.stage - 1, e.micro, Phase::Forward) {
                    if e.start < dep.end - 1e-9 {
                        return Err(TimelineViolation::DependencyOrder {
                            round: e.round,
                            micro: e.micro,
                            stage: e.stage,
                            phase: e.phase,
                        });
                    }
                }
            }
            Phase::Backward if e.stage + 1 < stages => {
                if let Some(dep) = find(e.round, e.stage + 1, e.micro, Phase::Backward) {
                    if e.start < dep.end - 1e-9 {
                        return Err(TimelineViolation::DependencyOrder {
                            round: e.round,
                            micro: e.micro,
                            stage: e.stage,
                            phase: e.phase,
                        });
                    }
                }
            }
            _ => {}
        }
    }
    if barrier {
        let mut rounds: std::collections::BTreeSet<usize> = Default::default();
        for e in &timeline.events {
            rounds.insert(e.round);
        }
        for round in rounds {
            let forward_end = timeline
                .events
                .iter()
                .filter(|e| e.round == round && e.phase == Phase::Forward)
                .map(|e| e.end)
                .fold(0.0, f64::max);
            let backward_start = timeline
                .events
                .iter()
                .filter(|e| e.round == round && e.phase == Phase::Backward)
                .map(|e| e.start)
                .fold(f64::INFINITY, f64::min);
            if backward_start.is_finite() && backward_start < forward_end - 1e-9 {
                return Err(TimelineViolation::BarrierBroken { round, backward_start, forward_end });
            }
        }
    }
    Ok(())
}

/// Latest end among events of one phase (phases start the run at zero).
pub fn phase_horizon(timeline: &Timeline, phase: Phase) -> f64 {
    timeline.events.iter().filter(|e| e.phase == phase).map(|e| e.end).fold(0.0, f64::max)
}

/// Busy fraction of the compute devices within one phase's span.
pub fn phase_utilization(timeline: &Timeline, phase: Phase, devices: usize) -> f64 {
    let events: Vec<&SimEvent> =
        timeline.events.iter().filter(|e| e.phase == phase && e.device < devices).collect();
    if events.is_empty() {
        return 0.0;
    }
    let lo = events.iter().map(|e| e.start).fold(f64::INFINITY, f64::min);
    let hi = events.iter().map(|e| e.end).fold(0.0, f64::max);
    if hi <= lo {
        return 0.0;
    }
    let busy: f64 = events.iter().map(|e| e.end - e.start).sum();
    busy / ((hi - lo) * devices as f64)
}

pub(crate) fn metrics_from_timeline(
    timeline: &Timeline,
    devices: usize,
    total_items: usize,
    per_device_peak_memory: Vec<u64>,
) -> PipelineMetrics {
    let busy: f64 = timeline
        .events
        .iter()
        .filter(|e| e.device < devices && e.phase != Phase::Comm)
        .map(|e| e.end - e.start)
        .sum();
    let makespan = timeline.horizon;
    let utilization = if makespan > 0.0 { busy / (makespan * devices as f64) } else { 0.0 };
    PipelineMetrics {
        makespan,
        throughput: if makespan > 0.0 { total_items as f64 / makespan } else { 0.0 },
        utilization,
        bubble_fraction: 1.0 - utilization,
        per_device_peak_memory,
    }
}
