//! Micro-batch pipeline execution over a partitioned sequential model.
//!
//! One worker per stage. Workers exchange only boundary activations and
//! pass-through slots with adjacent stages over ordered channels; parameter
//! gradients are buffered per micro-batch and summed in canonical order
//! (micro 0..M-1) at the end, so results are bit-reproducible regardless of
//! thread interleaving. A single-threaded reference mode drives the same
//! stage logic and produces bit-identical results.
//!
//! Each worker keeps a logical clock: an event starts at the later of the
//! worker's own clock and the producing message's timestamp. The recorded
//! event list is therefore an earliest-start pipeline schedule and can be
//! checked against the same timeline invariants the simulator uses.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::mpsc;

use super::layers::{layer_backward, layer_forward, Params};
use super::serial::{GradientSet, LossSpec};
use super::tensor::Tensor;
use super::ExecError;
use crate::chain::SequentialModel;
use crate::graph::LayerKind;
use crate::partition::Partition;
use crate::sim::{Phase, ScheduleConfig, SimEvent, Timeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Threaded,
    SingleThread,
}

#[derive(Debug)]
pub struct PipelineRun {
    pub output: Tensor,
    pub grads: GradientSet,
    pub timeline: Timeline,
}

struct FwdMsg {
    micro: usize,
    time: f64,
    main: Tensor,
    slots: BTreeMap<String, Tensor>,
}

struct BwdMsg {
    time: f64,
    g_main: Tensor,
    g_slots: BTreeMap<String, Tensor>,
}

struct MicroRecord {
    main_in: Tensor,
    slot_in: BTreeMap<String, Tensor>,
    layer_out: BTreeMap<usize, Tensor>,
}

struct StageRunner<'a> {
    seq: &'a SequentialModel,
    params: &'a Params,
    stage: usize,
    cells: Range<usize>,
    layers: Range<usize>,
    fwd_duration: f64,
    bwd_duration: f64,
    clock: f64,
    events: Vec<SimEvent>,
    records: Vec<Option<MicroRecord>>,
    grads_per_micro: Vec<BTreeMap<usize, Tensor>>,
    /// Producer layer of each slot, computed once.
    slot_producer: BTreeMap<String, usize>,
    outputs: Vec<Option<Tensor>>,
}

impl<'a> StageRunner<'a> {
    fn new(
        seq: &'a SequentialModel,
        partition: &Partition,
        params: &'a Params,
        cfg: &ScheduleConfig,
        stage: usize,
        micro_items: usize,
    ) -> StageRunner<'a> {
        let cells = partition.stage_ranges()[stage].clone();
        let first_layer = seq.cells[cells.start].body[0];
        let last_layer = *seq.cells[cells.end - 1].body.last().unwrap();
        let slot_producer = seq
            .cells
            .iter()
            .flat_map(|c| c.produces_slots.iter().map(move |s| (s.clone(), *c.body.last().unwrap())))
            .collect();
        let fwd_duration = partition.stage_costs[stage] * micro_items as f64;
        StageRunner {
            seq,
            params,
            stage,
            cells,
            layers: first_layer..last_layer + 1,
            fwd_duration,
            bwd_duration: fwd_duration * cfg.backward_cost_ratio,
            clock: 0.0,
            events: Vec::new(),
            records: (0..cfg.micro_batches).map(|_| None).collect(),
            grads_per_micro: vec![BTreeMap::new(); cfg.micro_batches],
            slot_producer,
            outputs: vec![None; cfg.micro_batches],
        }
    }

    fn record_event(&mut self, phase: Phase, micro: usize, ready: f64, duration: f64) -> f64 {
        let start = self.clock.max(ready);
        let end = start + duration;
        self.events.push(SimEvent {
            device: self.stage,
            start,
            end,
            phase,
            micro,
            stage: self.stage,
            round: 0,
        });
        self.clock = end;
        end
    }

    fn forward(&mut self, msg: FwdMsg) -> FwdMsg {
        let end = self.record_event(Phase::Forward, msg.micro, msg.time, self.fwd_duration);
        let FwdMsg { micro, main, mut slots, .. } = msg;
        let mut record = MicroRecord {
            main_in: main.clone(),
            slot_in: slots.clone(),
            layer_out: BTreeMap::new(),
        };
        let mut running = main;
        for cell_idx in self.cells.clone() {
            let cell = &self.seq.cells[cell_idx];
            for &lid in &cell.body {
                let layer = &self.seq.graph.layers[lid];
                let out = if layer.kind == LayerKind::Source {
                    running.clone()
                } else {
                    let ins: Vec<&Tensor> = layer
                        .inputs
                        .iter()
                        .map(|&u| {
                            resolve_value(u, lid, &self.layers, &record, &self.slot_producer)
                        })
                        .collect();
                    layer_forward(layer, &ins, self.params).expect("prevalidated shapes")
                };
                record.layer_out.insert(lid, out.clone());
                running = out;
            }
            for name in &cell.produces_slots {
                slots.insert(name.clone(), running.clone());
            }
            slots.retain(|name, _| {
                cell.produces_slots.contains(name) || cell.passthrough_slots.contains(name)
            });
        }
        // For the final stage this is the model output (the sink forwards
        // its producer's value unchanged).
        self.outputs[micro] = Some(running.clone());
        self.records[micro] = Some(record);
        FwdMsg { micro, time: end, main: running, slots }
    }

    fn backward(&mut self, micro: usize, msg: BwdMsg) -> BwdMsg {
        let end = self.record_event(Phase::Backward, micro, msg.time, self.bwd_duration);
        let record = self.records[micro].take().expect("forward ran");
        let mut g_by_layer: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut g_slots_in: BTreeMap<String, Tensor> = BTreeMap::new();

        let last_layer = self.layers.end - 1;
        g_by_layer.insert(last_layer, msg.g_main);
        for (name, g) in msg.g_slots {
            let producer = self.slot_producer[&name];
            if self.layers.contains(&producer) {
                // The duplicate's gradient joins the producing layer's.
                merge(&mut g_by_layer, producer, g);
            } else {
                merge_named(&mut g_slots_in, name, g);
            }
        }

        let mut g_main_in: Option<Tensor> = None;
        for cell_idx in self.cells.clone().rev() {
            let cell = &self.seq.cells[cell_idx];
            for &lid in cell.body.iter().rev() {
                let layer = &self.seq.graph.layers[lid];
                let g = match g_by_layer.remove(&lid) {
                    Some(g) => g,
                    None => Tensor::zeros(record.layer_out[&lid].shape.clone()),
                };
                if layer.kind == LayerKind::Source {
                    continue;
                }
                let ins: Vec<&Tensor> = layer
                    .inputs
                    .iter()
                    .map(|&u| resolve_value(u, lid, &self.layers, &record, &self.slot_producer))
                    .collect();
                let (input_grads, dw) =
                    layer_backward(layer, &ins, &g, self.params).expect("prevalidated shapes");
                if let Some(dw) = dw {
                    self.grads_per_micro[micro].insert(lid, dw);
                }
                for (&u, gu) in layer.inputs.iter().zip(input_grads) {
                    if self.layers.contains(&u) {
                        merge(&mut g_by_layer, u, gu);
                    } else if u + 1 == self.layers.start {
                        match &mut g_main_in {
                            Some(acc) => acc.add_assign(&gu),
                            slot => *slot = Some(gu),
                        }
                    } else {
                        let name = self
                            .slot_producer
                            .iter()
                            .find(|(_, &p)| p == u)
                            .map(|(n, _)| n.clone())
                            .expect("chain input is a slot");
                        merge_named(&mut g_slots_in, name, gu);
                    }
                }
            }
        }

        let g_main = g_main_in.unwrap_or_else(|| Tensor::zeros(record.main_in.shape.clone()));
        BwdMsg { time: end, g_main, g_slots: g_slots_in }
    }

    /// Sums per-micro gradients in canonical micro order.
    fn final_grads(&self) -> GradientSet {
        let mut grads = GradientSet::default();
        for per_micro in &self.grads_per_micro {
            for (&lid, dw) in per_micro {
                match grads.grads.get_mut(&lid) {
                    Some(acc) => acc.add_assign(dw),
                    None => {
                        grads.grads.insert(lid, dw.clone());
                    }
                }
            }
        }
        grads
    }
}

fn merge(map: &mut BTreeMap<usize, Tensor>, key: usize, g: Tensor) {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
        }
    }
}

fn merge_named(map: &mut BTreeMap<String, Tensor>, key: String, g: Tensor) {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
        }
    }
}

fn resolve_value<'r>(
    producer: usize,
    layer: usize,
    stage_layers: &Range<usize>,
    record: &'r MicroRecord,
    slot_producer: &BTreeMap<String, usize>,
) -> &'r Tensor {
    if stage_layers.contains(&producer) && producer < layer {
        return &record.layer_out[&producer];
    }
    if producer + 1 == layer {
        return &record.main_in;
    }
    let name = slot_producer
        .iter()
        .find(|(_, &p)| p == producer)
        .map(|(n, _)| n)
        .expect("chain input is a slot");
    &record.slot_in[name]
}

/// Checks everything that could fail at runtime, so stage workers can run
/// infallibly afterwards.
fn prevalidate(
    seq: &SequentialModel,
    partition: &Partition,
    params: &Params,
    input: &Tensor,
    loss: &LossSpec,
    cfg: &ScheduleConfig,
) -> Result<(), ExecError> {
    if partition.stages() != cfg.devices {
        return Err(ExecError::StageMismatch { stages: partition.stages(), devices: cfg.devices });
    }
    if input.batch() != cfg.batch_size {
        return Err(ExecError::BatchMismatch { expected: cfg.batch_size, got: input.batch() });
    }
    if !input.all_finite() || !loss.target.all_finite() {
        return Err(ExecError::ShapeMismatch {
            layer: 0,
            detail: "input or target contains non-finite values".into(),
        });
    }
    if cfg.micro_batches == 0 || !input.batch().is_multiple_of(cfg.micro_batches) {
        return Err(ExecError::BatchIndivisible {
            batch: input.batch(),
            micro_batches: cfg.micro_batches,
        });
    }
    let shapes = super::layers::infer_shapes(&seq.graph, input.item_shape())?;
    for layer in &seq.graph.layers {
        if layer.kind == LayerKind::Affine {
            let w = params.get(&layer.id).ok_or(ExecError::MissingParams { layer: layer.id })?;
            let c_in = shapes[layer.inputs[0]][0];
            let c_out = shapes[layer.id][0];
            if w.shape != [c_out, c_in] {
                return Err(ExecError::ShapeMismatch {
                    layer: layer.id,
                    detail: format!("weights {:?}, expected [{c_out}, {c_in}]", w.shape),
                });
            }
        }
    }
    let out_shape = &shapes[seq.graph.output_id];
    let mut expected = vec![input.batch()];
    expected.extend_from_slice(out_shape);
    if loss.target.shape != expected {
        return Err(ExecError::ShapeMismatch {
            layer: seq.graph.output_id,
            detail: format!("target {:?}, expected {:?}", loss.target.shape, expected),
        });
    }
    Ok(())
}

/// Splits the input into `cfg.micro_batches` micro-batches, pipelines them
/// through one worker per stage, and accumulates gradients across
/// micro-batches after all forwards complete. Outputs are concatenated in
/// micro order and match serial execution bit for bit.
pub fn run_pipeline(
    seq: &SequentialModel,
    partition: &Partition,
    params: &Params,
    input: &Tensor,
    loss: &LossSpec,
    cfg: &ScheduleConfig,
    mode: ExecMode,
) -> Result<PipelineRun, ExecError> {
    prevalidate(seq, partition, params, input, loss, cfg)?;
    let stages = partition.stages();
    let m = cfg.micro_batches;
    let micro_items = input.batch() / m;

    let mut runners: Vec<StageRunner> = (0..stages)
        .map(|s| StageRunner::new(seq, partition, params, cfg, s, micro_items))
        .collect();

    match mode {
        ExecMode::SingleThread => {
            let mut boundary: Vec<Option<FwdMsg>> = Vec::new();
            for micro in 0..m {
                let mut msg = FwdMsg {
                    micro,
                    time: 0.0,
                    main: input.slice_batch(micro * micro_items, micro_items),
                    slots: BTreeMap::new(),
                };
                for runner in runners.iter_mut() {
                    msg = runner.forward(msg);
                }
                boundary.push(Some(msg));
            }
            for micro in (0..m).rev() {
                let out = runners[stages - 1].outputs[micro].clone().expect("forward ran");
                let micro_loss = loss.slice_batch(micro * micro_items, micro_items);
                let mut msg =
                    BwdMsg { time: 0.0, g_main: micro_loss.grad(&out), g_slots: BTreeMap::new() };
                for runner in runners.iter_mut().rev() {
                    msg = runner.backward(micro, msg);
                }
            }
        }
        ExecMode::Threaded => {
            let mut fwd_tx: Vec<Option<mpsc::Sender<FwdMsg>>> = (0..stages).map(|_| None).collect();
            let mut fwd_rx: Vec<Option<mpsc::Receiver<FwdMsg>>> = (0..stages).map(|_| None).collect();
            let mut bwd_tx: Vec<Option<mpsc::Sender<BwdMsg>>> = (0..stages).map(|_| None).collect();
            let mut bwd_rx: Vec<Option<mpsc::Receiver<BwdMsg>>> = (0..stages).map(|_| None).collect();
            for s in 0..stages.saturating_sub(1) {
                let (tx, rx) = mpsc::channel();
                fwd_tx[s] = Some(tx);
                fwd_rx[s + 1] = Some(rx);
                let (tx, rx) = mpsc::channel();
                bwd_tx[s + 1] = Some(tx);
                bwd_rx[s] = Some(rx);
            }

            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for (s, mut runner) in runners.drain(..).enumerate() {
                    let tx_f = fwd_tx[s].take();
                    let rx_f = fwd_rx[s].take();
                    let tx_b = bwd_tx[s].take();
                    let rx_b = bwd_rx[s].take();
                    let loss = &*loss;
                    let input = &*input;
                    handles.push(scope.spawn(move || {
                        for micro in 0..m {
                            let msg = match &rx_f {
                                Some(rx) => rx.recv().expect("upstream worker alive"),
                                None => FwdMsg {
                                    micro,
                                    time: 0.0,
                                    main: input.slice_batch(micro * micro_items, micro_items),
                                    slots: BTreeMap::new(),
                                },
                            };
                            let out = runner.forward(msg);
                            if let Some(tx) = &tx_f {
                                tx.send(out).expect("downstream worker alive");
                            }
                        }
                        for micro in (0..m).rev() {
                            let msg = match &rx_b {
                                Some(rx) => rx.recv().expect("downstream worker alive"),
                                None => {
                                    let out =
                                        runner.outputs[micro].clone().expect("forward ran");
                                    let micro_loss =
                                        loss.slice_batch(micro * micro_items, micro_items);
                                    BwdMsg {
                                        time: 0.0,
                                        g_main: micro_loss.grad(&out),
                                        g_slots: BTreeMap::new(),
                                    }
                                }
                            };
                            let out = runner.backward(micro, msg);
                            if let Some(tx) = &tx_b {
                                tx.send(out).expect("upstream worker alive");
                            }
                        }
                        runner
                    }));
                }
                runners = handles.into_iter().map(|h| h.join().expect("worker panicked")).collect();
            });
        }
    }

    // Merge: gradients stage by stage (disjoint layers), outputs in micro
    // order.
    let mut grads = GradientSet::default();
    for runner in &runners {
        grads.add_assign(&runner.final_grads());
    }
    let outputs: Vec<Tensor> = runners[stages - 1]
        .outputs
        .iter()
        .map(|o| o.clone().expect("all micros ran"))
        .collect();
    let output = Tensor::concat_batch(&outputs);

    let mut events: Vec<SimEvent> = runners.iter().flat_map(|r| r.events.iter().cloned()).collect();
    events.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.device.cmp(&b.device))
            .then(a.phase.cmp(&b.phase))
            .then(a.micro.cmp(&b.micro))
    });
    let horizon = events.iter().map(|e| e.end).fold(0.0, f64::max);
    Ok(PipelineRun { output, grads, timeline: Timeline { events, horizon } })
}
