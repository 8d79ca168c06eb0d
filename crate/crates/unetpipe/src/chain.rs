//! Rewrites a skip-connected graph into a strict sequential chain.
//!
//! Pipeline schedulers want models where data flows only between adjacent
//! stages. Skip connections break that: an encoder output is consumed again
//! many layers later. The transform here keeps every compute layer in
//! declaration order (one chain cell per layer) and turns each long-range
//! edge into a named pass-through slot. The producing cell duplicates its
//! output into the slot; every intermediate cell forwards the slot unchanged
//! (memory, no compute); the consuming cell reads it back. The result is a
//! chain in which information moves only between neighbours, so any
//! contiguous cut is a legal stage boundary.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{validate_graph, LayerKind, ModelGraph, ValidationReport};

/// One chain unit. `body` holds the layer ids executed here (always one for
/// transform output); slots are identified by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub id: usize,
    pub body: Vec<usize>,
    /// Slots read by this cell's body.
    pub consumes_slots: Vec<String>,
    /// Slots this cell introduces (duplicates of its body output).
    pub produces_slots: Vec<String>,
    /// Slots carried to the next cell without compute.
    pub passthrough_slots: Vec<String>,
}

/// A chain of cells over the layers of `graph`, plus the per-item size of
/// every pass-through slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialModel {
    pub graph: ModelGraph,
    pub cells: Vec<Cell>,
    pub slot_sizes: BTreeMap<String, u64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("graph fails validation:\n{0}")]
    InvalidGraph(ValidationReport),
    #[error("layer order is not source-first, sink-last")]
    NotChainOrdered,
    #[error("edge {from} -> {to} is not expressible as a pass-through: layer {to} has no chain predecessor")]
    NonAdjacentDependency { from: usize, to: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainViolation {
    #[error("cell {cell} reads slot {slot} that the preceding cell does not offer")]
    SlotNotAdjacent { cell: usize, slot: String },
    #[error("cell {cell} body layer {layer} reads layer {input} without a slot")]
    BodyEscapesChain { cell: usize, layer: usize, input: usize },
    #[error("layer {layer} covered by {count} cells")]
    BodyCoverage { layer: usize, count: usize },
}

struct Slot {
    name: String,
    producer: usize,
    consumers: Vec<usize>,
}

/// Rewrites `graph` into a [`SequentialModel`]. The layer multiset is
/// preserved exactly; only the dataflow bookkeeping changes.
pub fn sequentialize(graph: &ModelGraph) -> Result<SequentialModel, TransformError> {
    let report = validate_graph(graph);
    if !report.is_empty() {
        return Err(TransformError::InvalidGraph(report));
    }
    let n = graph.layers.len();
    if graph.layers[0].kind != LayerKind::Source || graph.layers[n - 1].kind != LayerKind::Sink {
        return Err(TransformError::NotChainOrdered);
    }
    // The sink must terminate the chain directly; taps into the middle of
    // the model have no chain representation.
    if graph.layers[n - 1].inputs != [n - 2] || graph.output_id != n - 2 {
        return Err(TransformError::NotChainOrdered);
    }

    // Chain continuity: every layer after the source must consume its
    // immediate predecessor; all other inputs become slots.
    for layer in &graph.layers[1..] {
        if !layer.inputs.contains(&(layer.id - 1)) {
            let from = *layer.inputs.iter().max().expect("validated arity");
            return Err(TransformError::NonAdjacentDependency { from, to: layer.id });
        }
    }

    // One slot per skip source, numbered by producer order.
    let mut by_producer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (u, v) in graph.skip_edges() {
        by_producer.entry(u).or_default().push(v);
    }
    let slots: Vec<Slot> = by_producer
        .into_iter()
        .enumerate()
        .map(|(i, (producer, mut consumers))| {
            consumers.sort_unstable();
            Slot { name: format!("skip_{}", i + 1), producer, consumers }
        })
        .collect();

    let mut cells: Vec<Cell> = (0..n)
        .map(|id| Cell {
            id,
            body: vec![id],
            consumes_slots: Vec::new(),
            produces_slots: Vec::new(),
            passthrough_slots: Vec::new(),
        })
        .collect();

    let mut slot_sizes = BTreeMap::new();
    for slot in &slots {
        slot_sizes.insert(slot.name.clone(), graph.layers[slot.producer].activation_elems);
        cells[slot.producer].produces_slots.push(slot.name.clone());
        let last = *slot.consumers.last().expect("slot has a consumer");
        for (idx, cell) in cells.iter_mut().enumerate().take(last + 1).skip(slot.producer + 1) {
            if slot.consumers.contains(&idx) {
                cell.consumes_slots.push(slot.name.clone());
            }
            // Forward until the final consumer takes it.
            if idx < last {
                cell.passthrough_slots.push(slot.name.clone());
            }
        }
    }

    Ok(SequentialModel { graph: graph.clone(), cells, slot_sizes })
}

/// Elements per batch item spent carrying slots through cells that only
/// forward them.
pub fn passthrough_memory_overhead(seq: &SequentialModel) -> u64 {
    seq.cells
        .iter()
        .map(|c| {
            c.passthrough_slots
                .iter()
                .filter(|s| !c.consumes_slots.contains(s))
                .map(|s| seq.slot_sizes[s])
                .sum::<u64>()
        })
        .sum()
}

impl SequentialModel {
    /// Machine check of the chain property: no cell references data that is
    /// not offered by its immediate predecessor, and bodies cover the layer
    /// set exactly once.
    pub fn check_chain(&self) -> Result<(), ChainViolation> {
        let mut covered = vec![0usize; self.graph.layers.len()];
        for cell in &self.cells {
            for &l in &cell.body {
                covered[l] += 1;
            }
        }
        for (layer, &count) in covered.iter().enumerate() {
            if count != 1 {
                return Err(ChainViolation::BodyCoverage { layer, count });
            }
        }

        // Slot availability from the predecessor cell.
        for (i, cell) in self.cells.iter().enumerate() {
            let offered: Vec<&String> = if i == 0 {
                Vec::new()
            } else {
                let prev = &self.cells[i - 1];
                prev.produces_slots.iter().chain(prev.passthrough_slots.iter()).collect()
            };
            for slot in cell.consumes_slots.iter().chain(cell.passthrough_slots.iter()) {
                if !offered.contains(&slot) {
                    return Err(ChainViolation::SlotNotAdjacent { cell: i, slot: slot.clone() });
                }
            }
        }

        // Body dataflow: an input must be inside the cell, the previous
        // cell's last body layer, or the producer of a consumed slot.
        let slot_producer: BTreeMap<&String, usize> = self
            .cells
            .iter()
            .flat_map(|c| c.produces_slots.iter().map(move |s| (s, *c.body.last().unwrap())))
            .collect();
        for (i, cell) in self.cells.iter().enumerate() {
            let prev_out = if i == 0 { None } else { self.cells[i - 1].body.last().copied() };
            for &layer in &cell.body {
                for &input in &self.graph.layers[layer].inputs {
                    let in_cell = cell.body.contains(&input);
                    let from_prev = prev_out == Some(input);
                    let via_slot = cell
                        .consumes_slots
                        .iter()
                        .any(|s| slot_producer.get(s) == Some(&input));
                    if !(in_cell || from_prev || via_slot) {
                        return Err(ChainViolation::BodyEscapesChain { cell: i, layer, input });
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-cell body compute cost.
    pub fn cell_costs(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| c.body.iter().map(|&l| self.graph.layers[l].compute_cost).sum())
            .collect()
    }
}
