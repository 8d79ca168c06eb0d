//! Single-process reference execution: forward with an activation cache and
//! exact reverse-mode gradients under a sum-reduced squared-error loss.

use std::collections::BTreeMap;

use super::layers::{layer_backward, layer_forward, Params};
use super::tensor::Tensor;
use super::ExecError;
use crate::chain::SequentialModel;
use crate::graph::{LayerKind, ModelGraph};

/// Sum of squared error against a fixed target, sum reduction. Sum (not
/// mean) keeps micro-batch gradient accumulation exactly additive.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub target: Tensor,
}

impl LossSpec {
    pub fn value(&self, output: &Tensor) -> f64 {
        output
            .data
            .iter()
            .zip(&self.target.data)
            .map(|(y, t)| (y - t) * (y - t))
            .sum()
    }

    pub fn grad(&self, output: &Tensor) -> Tensor {
        let data = output
            .data
            .iter()
            .zip(&self.target.data)
            .map(|(y, t)| 2.0 * (y - t))
            .collect();
        Tensor { shape: output.shape.clone(), data }
    }

    /// Loss restricted to batch rows `start .. start + len`.
    pub fn slice_batch(&self, start: usize, len: usize) -> LossSpec {
        LossSpec { target: self.target.slice_batch(start, len) }
    }
}

/// Parameter gradients by layer id; shapes match the owning weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub grads: BTreeMap<usize, Tensor>,
}

impl GradientSet {
    pub fn add_assign(&mut self, other: &GradientSet) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    /// Largest relative elementwise deviation between two gradient sets.
    pub fn max_rel_diff(&self, other: &GradientSet) -> f64 {
        let keys: Vec<usize> =
            self.grads.keys().chain(other.grads.keys()).copied().collect();
        let mut worst = 0.0f64;
        for id in keys {
            match (self.grads.get(&id), other.grads.get(&id)) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data.iter().zip(&b.data) {
                        let denom = x.abs().max(y.abs()).max(1e-12);
                        worst = worst.max((x - y).abs() / denom);
                    }
                }
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
        worst
    }
}

/// Per-layer outputs retained for the backward pass.
#[derive(Debug)]
pub struct ActivationCache {
    pub outputs: Vec<Option<Tensor>>,
}

/// Evaluates the graph in declaration order.
pub fn forward_serial(
    graph: &ModelGraph,
    params: &Params,
    input: &Tensor,
) -> Result<(Tensor, ActivationCache), ExecError> {
    if let Some(source) = graph.source_id() {
        if !input.all_finite() {
            return Err(ExecError::ShapeMismatch {
                layer: source,
                detail: "input contains non-finite values".into(),
            });
        }
    }
    let mut outputs: Vec<Option<Tensor>> = vec![None; graph.layers.len()];
    for layer in &graph.layers {
        let out = if layer.kind == LayerKind::Source {
            input.clone()
        } else {
            let ins: Vec<&Tensor> = layer
                .inputs
                .iter()
                .map(|&u| outputs[u].as_ref().expect("topological order"))
                .collect();
            layer_forward(layer, &ins, params)?
        };
        outputs[layer.id] = Some(out);
    }
    let out = outputs[graph.output_id].clone().expect("output evaluated");
    Ok((out, ActivationCache { outputs }))
}

/// Evaluates a sequential model cell by cell, carrying pass-through slots
/// explicitly. Produces bit-identical results to [`forward_serial`] on the
/// embedded graph.
pub fn forward_serial_chain(
    seq: &SequentialModel,
    params: &Params,
    input: &Tensor,
) -> Result<Tensor, ExecError> {
    let mut main: Option<Tensor> = None;
    let mut slots: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut output: Option<Tensor> = None;

    for cell in &seq.cells {
        for &lid in &cell.body {
            let layer = &seq.graph.layers[lid];
            let out = if layer.kind == LayerKind::Source {
                input.clone()
            } else {
                let ins: Vec<&Tensor> = layer
                    .inputs
                    .iter()
                    .map(|&u| resolve_chain_input(seq, cell, lid, u, main.as_ref(), &slots))
                    .collect::<Result<_, _>>()?;
                layer_forward(layer, &ins, params)?
            };
            if lid == seq.graph.output_id {
                output = Some(out.clone());
            }
            main = Some(out);
        }
        // Publish duplicated outputs, then drop slots that stop here.
        for name in &cell.produces_slots {
            slots.insert(name.clone(), main.clone().expect("cell has a body"));
        }
        slots.retain(|name, _| {
            cell.produces_slots.contains(name) || cell.passthrough_slots.contains(name)
        });
    }
    output.ok_or(ExecError::ShapeMismatch { layer: seq.graph.output_id, detail: "output never produced".into() })
}

fn resolve_chain_input<'a>(
    seq: &SequentialModel,
    cell: &crate::chain::Cell,
    layer: usize,
    producer: usize,
    main: Option<&'a Tensor>,
    slots: &'a BTreeMap<String, Tensor>,
) -> Result<&'a Tensor, ExecError> {
    // The chain invariant: the producer is either the running main value or
    // reachable through a consumed slot.
    if producer + 1 == layer {
        return main.ok_or(ExecError::ShapeMismatch { layer, detail: "missing chain input".into() });
    }
    for name in &cell.consumes_slots {
        let slot_producer = seq
            .cells
            .iter()
            .find(|c| c.produces_slots.contains(name))
            .and_then(|c| c.body.last().copied());
        if slot_producer == Some(producer) {
            return slots.get(name).ok_or(ExecError::ShapeMismatch {
                layer,
                detail: format!("slot {name} not carried"),
            });
        }
    }
    Err(ExecError::ShapeMismatch {
        layer,
        detail: format!("input {producer} not reachable through the chain"),
    })
}

/// Loss under `loss` after a full forward pass.
pub fn loss_value(
    graph: &ModelGraph,
    params: &Params,
    input: &Tensor,
    loss: &LossSpec,
) -> Result<f64, ExecError> {
    let (out, _) = forward_serial(graph, params, input)?;
    Ok(loss.value(&out))
}

/// Exact reverse-mode gradients for every parameterized layer.
pub fn backward_serial(
    graph: &ModelGraph,
    params: &Params,
    input: &Tensor,
    loss: &LossSpec,
) -> Result<GradientSet, ExecError> {
    let (output, cache) = forward_serial(graph, params, input)?;
    if output.shape != loss.target.shape {
        return Err(ExecError::ShapeMismatch {
            layer: graph.output_id,
            detail: format!(
                "target shape {:?} does not match output {:?}",
                loss.target.shape, output.shape
            ),
        });
    }

    let mut grad_by_layer: Vec<Option<Tensor>> = vec![None; graph.layers.len()];
    grad_by_layer[graph.output_id] = Some(loss.grad(&output));

    let mut grads = GradientSet::default();
    for layer in graph.layers.iter().rev() {
        let Some(g) = grad_by_layer[layer.id].take() else {
            continue; // e.g. the sink, or dead branches
        };
        let ins: Vec<&Tensor> = layer
            .inputs
            .iter()
            .map(|&u| cache.outputs[u].as_ref().expect("cached"))
            .collect();
        let (input_grads, dw) = layer_backward(layer, &ins, &g, params)?;
        if let Some(dw) = dw {
            grads.grads.insert(layer.id, dw);
        }
        for (&u, gu) in layer.inputs.iter().zip(input_grads) {
            match &mut grad_by_layer[u] {
                Some(acc) => acc.add_assign(&gu),
                slot @ None => *slot = Some(gu),
            }
        }
    }
    Ok(grads)
}
