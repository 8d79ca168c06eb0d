//! Contiguous stage assignment over a sequential chain.
//!
//! The default objective minimizes the bottleneck stage compute cost, since
//! the slowest stage governs pipeline steady-state throughput. The solver is
//! an exact dynamic program over prefix sums; ties resolve to the
//! lexicographically smallest boundary vector.

use thiserror::Error;

use crate::chain::SequentialModel;
use crate::graph::LayerKind;

/// What to balance across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    Compute,
    Params,
    Activations,
}

/// Assignment of contiguous cell ranges to stages, with per-stage
/// aggregates the simulator and memory model consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Cut positions: stage `j` covers cells `boundaries[j-1] .. boundaries[j]`
    /// with implicit 0 and `num_cells` at the ends. Length is `stages - 1`.
    pub boundaries: Vec<usize>,
    pub num_cells: usize,
    /// Body compute work units per stage, per batch item.
    pub stage_costs: Vec<f64>,
    pub stage_params: Vec<u64>,
    /// Body activations plus slot-forwarding elements per stage.
    pub stage_activations: Vec<u64>,
    /// Activation elements entering each stage along the chain (the model
    /// input for stage 0).
    pub stage_input_acts: Vec<u64>,
    /// Compute-layer activations per stage (source/sink emit none).
    pub stage_working_acts: Vec<u64>,
    /// Sizes of slots crossing into each stage.
    pub stage_slot_in: Vec<u64>,
}

impl Partition {
    pub fn stages(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn stage_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut starts = vec![0];
        starts.extend_from_slice(&self.boundaries);
        let mut ends = self.boundaries.clone();
        ends.push(self.num_cells);
        starts.into_iter().zip(ends).map(|(s, e)| s..e).collect()
    }

    pub fn bottleneck_cost(&self) -> f64 {
        self.stage_costs.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("stage count {stages} out of range for {cells} cells")]
    InvalidStageCount { stages: usize, cells: usize },
    #[error("boundary {value} out of range 1..{cells}")]
    BoundaryOutOfRange { value: usize, cells: usize },
    #[error("boundaries must be strictly increasing")]
    BoundariesNotIncreasing,
}

fn cell_weights(seq: &SequentialModel, objective: Objective) -> Vec<f64> {
    match objective {
        Objective::Compute => seq.cell_costs(),
        Objective::Params => seq
            .cells
            .iter()
            .map(|c| c.body.iter().map(|&l| seq.graph.layers[l].param_count as f64).sum())
            .collect(),
        Objective::Activations => seq
            .cells
            .iter()
            .map(|c| c.body.iter().map(|&l| seq.graph.layers[l].activation_elems as f64).sum())
            .collect(),
    }
}

/// Minimizes the bottleneck stage compute cost over all contiguous
/// splits into `stages` non-empty stages.
pub fn partition_balanced(seq: &SequentialModel, stages: usize) -> Result<Partition, PartitionError> {
    partition_balanced_by(seq, stages, Objective::Compute)
}

/// Same solver with a selectable balance objective.
pub fn partition_balanced_by(
    seq: &SequentialModel,
    stages: usize,
    objective: Objective,
) -> Result<Partition, PartitionError> {
    let n = seq.cells.len();
    if stages < 1 || stages > n {
        return Err(PartitionError::InvalidStageCount { stages, cells: n });
    }
    let w = cell_weights(seq, objective);
    let boundaries = solve_min_bottleneck(&w, stages);
    Ok(build_partition(seq, boundaries))
}

/// Partition with caller-specified cuts.
pub fn partition_fixed(seq: &SequentialModel, boundaries: &[usize]) -> Result<Partition, PartitionError> {
    let n = seq.cells.len();
    if boundaries.len() + 1 > n {
        return Err(PartitionError::InvalidStageCount { stages: boundaries.len() + 1, cells: n });
    }
    let mut prev = 0usize;
    for &b in boundaries {
        if b < 1 || b >= n {
            return Err(PartitionError::BoundaryOutOfRange { value: b, cells: n });
        }
        if b <= prev {
            return Err(PartitionError::BoundariesNotIncreasing);
        }
        prev = b;
    }
    Ok(build_partition(seq, boundaries.to_vec()))
}

/// Exact DP, then a left-greedy sweep that keeps every cut as early as the
/// optimum allows. All window sums come from one prefix-sum table so the
/// feasibility checks agree bit-for-bit with the DP.
#[allow(clippy::needless_range_loop)]
fn solve_min_bottleneck(w: &[f64], stages: usize) -> Vec<usize> {
    let n = w.len();
    let mut prefix = vec![0.0f64; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + w[i];
    }
    let window = |s: usize, e: usize| prefix[e] - prefix[s];

    // dp[j][i]: minimal bottleneck splitting the first i cells into j stages.
    let mut dp = vec![vec![f64::INFINITY; n + 1]; stages + 1];
    dp[0][0] = 0.0;
    for j in 1..=stages {
        for i in j..=n {
            let mut best = f64::INFINITY;
            for t in (j - 1)..i {
                let cand = dp[j - 1][t].max(window(t, i));
                if cand < best {
                    best = cand;
                }
            }
            dp[j][i] = best;
        }
    }
    let bottleneck = dp[stages][n];

    // Minimal stage count needed for the suffix starting at `s` under the
    // bottleneck cap, by maximal greedy packing.
    let min_stages_from = |s: usize| -> usize {
        if s == n {
            return 0;
        }
        let mut count = 1;
        let mut start = s;
        for i in s + 1..n {
            if window(start, i + 1) > bottleneck {
                count += 1;
                start = i;
            }
        }
        count
    };

    let mut boundaries = Vec::with_capacity(stages - 1);
    let mut pos = 0usize;
    for remaining in (1..stages).rev() {
        let mut cut = pos + 1;
        loop {
            let fits = window(pos, cut) <= bottleneck;
            let suffix_ok = (n - cut) >= remaining && min_stages_from(cut) <= remaining;
            if fits && suffix_ok {
                break;
            }
            cut += 1;
            debug_assert!(cut < n, "DP guarantees a feasible split");
        }
        boundaries.push(cut);
        pos = cut;
    }
    boundaries
}

fn build_partition(seq: &SequentialModel, boundaries: Vec<usize>) -> Partition {
    let n = seq.cells.len();
    let mut starts = vec![0usize];
    starts.extend_from_slice(&boundaries);
    let mut ends = boundaries.clone();
    ends.push(n);

    let costs = seq.cell_costs();
    let mut stage_costs = Vec::new();
    let mut stage_params = Vec::new();
    let mut stage_activations = Vec::new();
    let mut stage_input_acts = Vec::new();
    let mut stage_working_acts = Vec::new();
    let mut stage_slot_in = Vec::new();

    for (&s, &e) in starts.iter().zip(&ends) {
        let cells = &seq.cells[s..e];
        stage_costs.push(cells.iter().map(|c| costs[c.id]).sum());
        let mut params = 0u64;
        let mut working = 0u64;
        let mut forwarding = 0u64;
        for cell in cells {
            for &l in &cell.body {
                let layer = &seq.graph.layers[l];
                params += layer.param_count;
                if !matches!(layer.kind, LayerKind::Source | LayerKind::Sink) {
                    working += layer.activation_elems;
                }
            }
            forwarding += cell
                .passthrough_slots
                .iter()
                .filter(|slot| !cell.consumes_slots.contains(slot))
                .map(|slot| seq.slot_sizes[slot])
                .sum::<u64>();
        }
        stage_params.push(params);
        stage_working_acts.push(working);
        stage_activations.push(working + forwarding);

        if s == 0 {
            // The model input: what the source emits per item.
            let source = seq.graph.layers.iter().find(|l| l.kind == LayerKind::Source);
            stage_input_acts.push(source.map(|l| l.activation_elems).unwrap_or(0));
        } else {
            let prev_last = *seq.cells[s - 1].body.last().unwrap();
            stage_input_acts.push(seq.graph.layers[prev_last].activation_elems);
        }

        // Slots produced before this stage and still alive at its start.
        let entering: u64 = seq
            .cells
            .iter()
            .take(s)
            .flat_map(|c| c.produces_slots.iter())
            .filter(|slot| {
                let last_use = seq
                    .cells
                    .iter()
                    .rposition(|c| c.consumes_slots.contains(slot))
                    .unwrap_or(0);
                last_use >= s
            })
            .map(|slot| seq.slot_sizes[slot])
            .sum();
        stage_slot_in.push(entering);
    }

    Partition {
        boundaries,
        num_cells: n,
        stage_costs,
        stage_params,
        stage_activations,
        stage_input_acts,
        stage_working_acts,
        stage_slot_in,
    }
}
