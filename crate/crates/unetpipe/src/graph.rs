//! Layered-network intermediate representation.
//!
//! A model is a DAG of [`LayerSpec`]s with a fixed topological numbering:
//! layer ids equal their position in the layer list and inputs always point
//! at earlier layers. Each layer carries abstract cost annotations (compute
//! work units, parameter count, activation elements per batch item) that the
//! partitioner, the schedule simulator, and the memory model consume.

use std::fmt;

/// What a layer computes. `Affine` stands in for convolution-like layers
/// (a per-voxel channel map); `Slice` is reserved and treated as identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Affine,
    Relu,
    Downsample2x,
    Upsample2x,
    Concat,
    Passthrough,
    Slice,
    Source,
    Sink,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Affine => "affine",
            LayerKind::Relu => "relu",
            LayerKind::Downsample2x => "downsample2x",
            LayerKind::Upsample2x => "upsample2x",
            LayerKind::Concat => "concat",
            LayerKind::Passthrough => "passthrough",
            LayerKind::Slice => "slice",
            LayerKind::Source => "source",
            LayerKind::Sink => "sink",
        }
    }

    pub fn parse(s: &str) -> Option<LayerKind> {
        Some(match s {
            "affine" => LayerKind::Affine,
            "relu" => LayerKind::Relu,
            "downsample2x" => LayerKind::Downsample2x,
            "upsample2x" => LayerKind::Upsample2x,
            "concat" => LayerKind::Concat,
            "passthrough" => LayerKind::Passthrough,
            "slice" => LayerKind::Slice,
            "source" => LayerKind::Source,
            "sink" => LayerKind::Sink,
            _ => return None,
        })
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One layer of the model with its cost annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    /// Abstract work units per batch item.
    pub compute_cost: f64,
    pub param_count: u64,
    /// Elements emitted per batch item.
    pub activation_elems: u64,
    /// Producer layer ids, in consumption order.
    pub inputs: Vec<usize>,
}

/// A whole model: layers in topological order plus the id of the layer
/// feeding the sink (the model's semantic output).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub output_id: usize,
}

/// Sums of the per-layer cost annotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTotals {
    pub compute: f64,
    pub params: u64,
    pub activations: u64,
}

/// A single invariant violation found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Layer id does not equal its position in the layer list.
    IdMismatch { index: usize, id: usize },
    /// Input points at the layer itself or a later layer (breaks the
    /// topological numbering, i.e. would form a cycle).
    Cycle { layer: usize, input: usize },
    /// Input id is not a declared layer.
    DanglingInput { layer: usize, input: usize },
    /// Wrong number of inputs for the layer kind.
    BadArity { layer: usize, kind: LayerKind, arity: usize },
    /// Not exactly one source layer.
    SourceCount { found: usize },
    /// Not exactly one sink layer.
    SinkCount { found: usize },
    /// `output_id` does not name the sink's producer.
    BadOutput { output_id: usize },
    /// Layer cannot be reached from the source.
    UnreachableFromSource { layer: usize },
    /// No path from the layer to the sink.
    DoesNotReachSink { layer: usize },
    /// Negative or non-finite compute cost.
    BadCost { layer: usize, cost: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IdMismatch { index, id } => {
                write!(f, "layer at index {index} has id {id}")
            }
            Violation::Cycle { layer, input } => {
                write!(f, "layer {layer} depends on {input}, which is not earlier (cycle)")
            }
            Violation::DanglingInput { layer, input } => {
                write!(f, "layer {layer} references undeclared layer {input}")
            }
            Violation::BadArity { layer, kind, arity } => {
                write!(f, "layer {layer} ({kind}) has {arity} inputs")
            }
            Violation::SourceCount { found } => write!(f, "expected 1 source layer, found {found}"),
            Violation::SinkCount { found } => write!(f, "expected 1 sink layer, found {found}"),
            Violation::BadOutput { output_id } => {
                write!(f, "output_id {output_id} is not the sink's producer")
            }
            Violation::UnreachableFromSource { layer } => {
                write!(f, "layer {layer} is unreachable from the source (dead)")
            }
            Violation::DoesNotReachSink { layer } => {
                write!(f, "layer {layer} does not reach the sink (dead)")
            }
            Violation::BadCost { layer, cost } => {
                write!(f, "layer {layer} has invalid compute cost {cost}")
            }
        }
    }
}

/// Result of a full-graph invariant check. Empty iff the graph is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "graph ok");
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

impl ModelGraph {
    pub fn layer(&self, id: usize) -> &LayerSpec {
        &self.layers[id]
    }

    pub fn source_id(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.kind == LayerKind::Source)
    }

    pub fn sink_id(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.kind == LayerKind::Sink)
    }

    /// Consumers of each layer, derived from the input lists.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.layers.len()];
        for l in &self.layers {
            for &i in &l.inputs {
                if i < out.len() {
                    out[i].push(l.id);
                }
            }
        }
        out
    }

    /// Edges (u, v) with u feeding v but not the immediately preceding
    /// layer. These are the long-range dependencies the chain transform
    /// turns into pass-through slots.
    pub fn skip_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for l in &self.layers {
            for &u in &l.inputs {
                if u + 1 < l.id {
                    edges.push((u, l.id));
                }
            }
        }
        edges
    }
}

/// Checks every structural invariant and reports all violations found.
/// Report-only: never fails.
#[allow(clippy::needless_range_loop)] // reachability reads earlier entries while writing later ones
pub fn validate_graph(graph: &ModelGraph) -> ValidationReport {
    let mut violations = Vec::new();
    let n = graph.layers.len();

    for (index, layer) in graph.layers.iter().enumerate() {
        if layer.id != index {
            violations.push(Violation::IdMismatch { index, id: layer.id });
        }
        for &input in &layer.inputs {
            if input >= n {
                violations.push(Violation::DanglingInput { layer: index, input });
            } else if input >= index {
                violations.push(Violation::Cycle { layer: index, input });
            }
        }
        let arity = layer.inputs.len();
        let arity_ok = match layer.kind {
            LayerKind::Source => arity == 0,
            LayerKind::Concat => arity >= 2,
            LayerKind::Sink => arity >= 1,
            _ => arity <= 1,
        };
        if !arity_ok {
            violations.push(Violation::BadArity { layer: index, kind: layer.kind, arity });
        }
        if !layer.compute_cost.is_finite() || layer.compute_cost < 0.0 {
            violations.push(Violation::BadCost { layer: index, cost: layer.compute_cost });
        }
    }

    let sources: Vec<usize> =
        (0..n).filter(|&i| graph.layers[i].kind == LayerKind::Source).collect();
    let sinks: Vec<usize> = (0..n).filter(|&i| graph.layers[i].kind == LayerKind::Sink).collect();
    if sources.len() != 1 {
        violations.push(Violation::SourceCount { found: sources.len() });
    }
    if sinks.len() != 1 {
        violations.push(Violation::SinkCount { found: sinks.len() });
    }
    if let [sink] = sinks.as_slice() {
        let sink_in = &graph.layers[*sink].inputs;
        if !sink_in.contains(&graph.output_id) {
            violations.push(Violation::BadOutput { output_id: graph.output_id });
        }
    }

    // Reachability in both directions. Only meaningful edges (backward
    // references already reported above are skipped).
    if let [source] = sources.as_slice() {
        let mut from_source = vec![false; n];
        from_source[*source] = true;
        for i in 0..n {
            if graph.layers[i].inputs.iter().any(|&u| u < i && from_source[u]) {
                from_source[i] = true;
            }
        }
        for i in 0..n {
            if !from_source[i] {
                violations.push(Violation::UnreachableFromSource { layer: i });
            }
        }
    }
    if let [sink] = sinks.as_slice() {
        let mut to_sink = vec![false; n];
        to_sink[*sink] = true;
        for i in (0..n).rev() {
            if to_sink[i] {
                for &u in &graph.layers[i].inputs {
                    if u < i {
                        to_sink[u] = true;
                    }
                }
            }
        }
        for i in 0..n {
            if !to_sink[i] {
                violations.push(Violation::DoesNotReachSink { layer: i });
            }
        }
    }

    ValidationReport { violations }
}

/// Sums compute, parameter, and activation annotations over all layers.
pub fn total_cost(graph: &ModelGraph) -> CostTotals {
    let mut totals = CostTotals { compute: 0.0, params: 0, activations: 0 };
    for l in &graph.layers {
        totals.compute += l.compute_cost;
        totals.params += l.param_count;
        totals.activations += l.activation_elems;
    }
    totals
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(id: usize, kind: LayerKind, inputs: Vec<usize>) -> LayerSpec {
        LayerSpec {
            id,
            name: format!("l{id}"),
            kind,
            compute_cost: 0.0,
            param_count: 0,
            activation_elems: 1,
            inputs,
        }
    }

    pub(crate) fn tiny_chain() -> ModelGraph {
        ModelGraph {
            layers: vec![
                layer(0, LayerKind::Source, vec![]),
                layer(1, LayerKind::Passthrough, vec![0]),
                layer(2, LayerKind::Relu, vec![1]),
                layer(3, LayerKind::Sink, vec![2]),
            ],
            output_id: 2,
        }
    }

    #[test]
    fn valid_chain_has_empty_report() {
        assert!(validate_graph(&tiny_chain()).is_empty());
    }

    #[test]
    fn self_reference_reports_cycle() {
        let mut g = tiny_chain();
        g.layers[2].inputs = vec![2];
        let report = validate_graph(&g);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle { layer: 2, input: 2 })));
    }

    #[test]
    fn concat_with_one_input_reports_arity() {
        let mut g = tiny_chain();
        g.layers[2].kind = LayerKind::Concat;
        let report = validate_graph(&g);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::BadArity { layer: 2, .. })));
    }

    #[test]
    fn dangling_input_reported() {
        let mut g = tiny_chain();
        g.layers[1].inputs = vec![9];
        let report = validate_graph(&g);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DanglingInput { layer: 1, input: 9 })));
    }

    #[test]
    fn dead_layer_reported() {
        let mut g = tiny_chain();
        // A layer nothing consumes and that consumes nothing reachable.
        g.layers.push(layer(4, LayerKind::Relu, vec![]));
        let report = validate_graph(&g);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UnreachableFromSource { layer: 4 })));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DoesNotReachSink { layer: 4 })));
    }

    #[test]
    fn totals_sum_fields() {
        let mut g = tiny_chain();
        g.layers[1].compute_cost = 1.0;
        g.layers[2].compute_cost = 2.0;
        g.layers[1].param_count = 7;
        let t = total_cost(&g);
        assert_eq!(t.compute, 3.0);
        assert_eq!(t.params, 7);
        assert_eq!(t.activations, 4);
    }

    #[test]
    fn three_layer_costs_sum_to_six() {
        let mut g = ModelGraph {
            layers: vec![
                layer(0, LayerKind::Source, vec![]),
                layer(1, LayerKind::Relu, vec![0]),
                layer(2, LayerKind::Relu, vec![1]),
                layer(3, LayerKind::Relu, vec![2]),
                layer(4, LayerKind::Sink, vec![3]),
            ],
            output_id: 3,
        };
        for (i, c) in [1.0, 2.0, 3.0].iter().enumerate() {
            g.layers[i + 1].compute_cost = *c;
        }
        assert_eq!(total_cost(&g).compute, 6.0);
    }

    #[test]
    fn empty_costs_total_zero() {
        let g = ModelGraph {
            layers: vec![
                LayerSpec {
                    id: 0,
                    name: "in".into(),
                    kind: LayerKind::Source,
                    compute_cost: 0.0,
                    param_count: 0,
                    activation_elems: 0,
                    inputs: vec![],
                },
                LayerSpec {
                    id: 1,
                    name: "out".into(),
                    kind: LayerKind::Sink,
                    compute_cost: 0.0,
                    param_count: 0,
                    activation_elems: 0,
                    inputs: vec![0],
                },
            ],
            output_id: 0,
        };
        let t = total_cost(&g);
        assert_eq!((t.compute, t.params, t.activations), (0.0, 0, 0));
    }
}
