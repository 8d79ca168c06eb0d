//! Line-oriented text formats for every artifact the tools exchange:
//! model specs, graphs, chains, partition reports, schedule scenarios,
//! timelines, curriculum plans, and tensor fixtures. All emitters are
//! deterministic so reruns produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::chain::{Cell, SequentialModel};
use crate::curriculum::{CurriculumPlan, CurriculumStage, Sampling};
use crate::exec::Tensor;
use crate::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::partition::Partition;
use crate::sim::{ScheduleConfig, Timeline};
use crate::unet::{CostModel, UNetConfig};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl FormatError {
    fn parse(line: usize, message: impl Into<String>) -> FormatError {
        FormatError::Parse { line, message: message.into() }
    }
}

pub fn read_to_string(path: &Path) -> Result<String, FormatError> {
    std::fs::read_to_string(path)
        .map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

pub fn write_string(path: &Path, contents: &str) -> Result<(), FormatError> {
    std::fs::write(path, contents)
        .map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

/// Non-comment, non-empty lines with their 1-based numbers.
fn meaningful_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn split_key_value(line: &str, lineno: usize) -> Result<(&str, &str), FormatError> {
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| FormatError::parse(lineno, format!("expected `key = value`, got `{line}`")))?;
    Ok((key.trim(), value.trim()))
}

// ---------------------------------------------------------------------------
// Model spec

pub fn emit_model_spec(cfg: &UNetConfig) -> String {
    let (c, x, y, z) = cfg.input_shape;
    let cm = &cfg.cost_model;
    let mut s = String::new();
    let _ = writeln!(s, "# unetpipe model spec");
    let _ = writeln!(s, "base_filters = {}", cfg.base_filters);
    let _ = writeln!(s, "encoder_blocks = {}", cfg.encoder_blocks);
    let _ = writeln!(s, "input_shape = {c} {x} {y} {z}");
    let _ = writeln!(s, "se_blocks = {}", cfg.se_blocks);
    let _ = writeln!(s, "cost_model.affine = {}", cm.affine);
    let _ = writeln!(s, "cost_model.relu = {}", cm.relu);
    let _ = writeln!(s, "cost_model.downsample = {}", cm.downsample);
    let _ = writeln!(s, "cost_model.upsample = {}", cm.upsample);
    let _ = writeln!(s, "cost_model.concat = {}", cm.concat);
    s
}

pub fn parse_model_spec(text: &str) -> Result<UNetConfig, FormatError> {
    let mut cfg = UNetConfig { cost_model: CostModel::default(), ..UNetConfig::default() };
    for (lineno, line) in meaningful_lines(text) {
        let (key, value) = split_key_value(line, lineno)?;
        let bad = |what: &str| FormatError::parse(lineno, format!("bad {what}: `{value}`"));
        match key {
            "base_filters" => cfg.base_filters = value.parse().map_err(|_| bad("base_filters"))?,
            "encoder_blocks" => {
                cfg.encoder_blocks = value.parse().map_err(|_| bad("encoder_blocks"))?
            }
            "input_shape" => {
                let parts: Vec<u64> = value
                    .split_whitespace()
                    .map(|t| {
                        t.parse().map_err(|_| {
                            FormatError::parse(lineno, format!("bad shape value `{t}`"))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if parts.len() != 4 {
                    return Err(FormatError::parse(
                        lineno,
                        "input_shape needs 4 values: channels x y z",
                    ));
                }
                cfg.input_shape = (parts[0], parts[1], parts[2], parts[3]);
            }
            "se_blocks" => cfg.se_blocks = value.parse().map_err(|_| bad("se_blocks"))?,
            "cost_model.affine" => cfg.cost_model.affine = value.parse().map_err(|_| bad(key))?,
            "cost_model.relu" => cfg.cost_model.relu = value.parse().map_err(|_| bad(key))?,
            "cost_model.downsample" => {
                cfg.cost_model.downsample = value.parse().map_err(|_| bad(key))?
            }
            "cost_model.upsample" => {
                cfg.cost_model.upsample = value.parse().map_err(|_| bad(key))?
            }
            "cost_model.concat" => cfg.cost_model.concat = value.parse().map_err(|_| bad(key))?,
            other => {
                return Err(FormatError::parse(lineno, format!("unknown key `{other}`")));
            }
        }
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Graph edge list

fn emit_layer_line(s: &mut String, l: &LayerSpec) {
    let _ = write!(s, "{} {} {} {} {} {}", l.id, l.kind, l.compute_cost, l.param_count, l.activation_elems, l.name);
    for input in &l.inputs {
        let _ = write!(s, " {input}");
    }
    let _ = writeln!(s);
}

pub fn emit_graph(graph: &ModelGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# unetpipe graph");
    let _ = writeln!(s, "# id kind compute params acts name inputs...");
    for l in &graph.layers {
        emit_layer_line(&mut s, l);
    }
    let _ = writeln!(s, "output {}", graph.output_id);
    s
}

fn parse_layer_line(lineno: usize, line: &str) -> Result<LayerSpec, FormatError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 6 {
        return Err(FormatError::parse(lineno, "layer record needs id kind compute params acts name"));
    }
    let id: usize =
        tokens[0].parse().map_err(|_| FormatError::parse(lineno, format!("bad id `{}`", tokens[0])))?;
    let kind = LayerKind::parse(tokens[1])
        .ok_or_else(|| FormatError::parse(lineno, format!("unknown kind `{}`", tokens[1])))?;
    let compute_cost: f64 = tokens[2]
        .parse()
        .map_err(|_| FormatError::parse(lineno, format!("bad compute cost `{}`", tokens[2])))?;
    let param_count: u64 = tokens[3]
        .parse()
        .map_err(|_| FormatError::parse(lineno, format!("bad param count `{}`", tokens[3])))?;
    let activation_elems: u64 = tokens[4]
        .parse()
        .map_err(|_| FormatError::parse(lineno, format!("bad activation count `{}`", tokens[4])))?;
    let name = tokens[5].to_string();
    let inputs = tokens[6..]
        .iter()
        .map(|t| t.parse().map_err(|_| FormatError::parse(lineno, format!("bad input id `{t}`"))))
        .collect::<Result<Vec<usize>, _>>()?;
    Ok(LayerSpec { id, name, kind, compute_cost, param_count, activation_elems, inputs })
}

pub fn parse_graph(text: &str) -> Result<ModelGraph, FormatError> {
    let mut layers = Vec::new();
    let mut output_id = None;
    for (lineno, line) in meaningful_lines(text) {
        if let Some(rest) = line.strip_prefix("output ") {
            output_id = Some(rest.trim().parse::<usize>().map_err(|_| {
                FormatError::parse(lineno, format!("bad output id `{}`", rest.trim()))
            })?);
            continue;
        }
        let layer = parse_layer_line(lineno, line)?;
        if layer.id != layers.len() {
            return Err(FormatError::parse(
                lineno,
                format!("layer id {} out of order (expected {})", layer.id, layers.len()),
            ));
        }
        layers.push(layer);
    }
    let output_id =
        output_id.ok_or_else(|| FormatError::parse(0, "missing `output <id>` line"))?;
    Ok(ModelGraph { layers, output_id })
}

// ---------------------------------------------------------------------------
// Sequential model (embeds its graph so the file is self-contained)

pub fn emit_chain(seq: &SequentialModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# unetpipe chain");
    for l in &seq.graph.layers {
        emit_layer_line(&mut s, l);
    }
    let _ = writeln!(s, "output {}", seq.graph.output_id);
    for cell in &seq.cells {
        let _ = write!(s, "cell {} body", cell.id);
        for b in &cell.body {
            let _ = write!(s, " {b}");
        }
        let _ = write!(s, " | consumes");
        for n in &cell.consumes_slots {
            let _ = write!(s, " {n}");
        }
        let _ = write!(s, " | produces");
        for n in &cell.produces_slots {
            let _ = write!(s, " {n}");
        }
        let _ = write!(s, " | passthrough");
        for n in &cell.passthrough_slots {
            let _ = write!(s, " {n}");
        }
        let _ = writeln!(s);
    }
    for (name, size) in &seq.slot_sizes {
        let _ = writeln!(s, "slot {name} {size}");
    }
    s
}

pub fn parse_chain(text: &str) -> Result<SequentialModel, FormatError> {
    let mut layers = Vec::new();
    let mut output_id = None;
    let mut cells: Vec<Cell> = Vec::new();
    let mut slot_sizes = BTreeMap::new();
    for (lineno, line) in meaningful_lines(text) {
        if let Some(rest) = line.strip_prefix("cell ") {
            cells.push(parse_cell_line(lineno, rest)?);
        } else if let Some(rest) = line.strip_prefix("slot ") {
            let mut it = rest.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| FormatError::parse(lineno, "slot line needs a name"))?
                .to_string();
            let size: u64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| FormatError::parse(lineno, "slot line needs a size"))?;
            slot_sizes.insert(name, size);
        } else if let Some(rest) = line.strip_prefix("output ") {
            output_id = Some(rest.trim().parse::<usize>().map_err(|_| {
                FormatError::parse(lineno, format!("bad output id `{}`", rest.trim()))
            })?);
        } else {
            layers.push(parse_layer_line(lineno, line)?);
        }
    }
    let output_id =
        output_id.ok_or_else(|| FormatError::parse(0, "missing `output <id>` line"))?;
    Ok(SequentialModel { graph: ModelGraph { layers, output_id }, cells, slot_sizes })
}

fn parse_cell_line(lineno: usize, rest: &str) -> Result<Cell, FormatError> {
    let sections: Vec<&str> = rest.split('|').map(str::trim).collect();
    if sections.len() != 4 {
        return Err(FormatError::parse(lineno, "cell line needs body/consumes/produces/passthrough"));
    }
    let head: Vec<&str> = sections[0].split_whitespace().collect();
    if head.len() < 2 || head[1] != "body" {
        return Err(FormatError::parse(lineno, "cell line must start `cell <id> body ...`"));
    }
    let id: usize = head[0]
        .parse()
        .map_err(|_| FormatError::parse(lineno, format!("bad cell id `{}`", head[0])))?;
    let body = head[2..]
        .iter()
        .map(|t| t.parse().map_err(|_| FormatError::parse(lineno, format!("bad body id `{t}`"))))
        .collect::<Result<Vec<usize>, _>>()?;
    let names = |section: &str, tag: &str| -> Result<Vec<String>, FormatError> {
        let mut it = section.split_whitespace();
        match it.next() {
            Some(t) if t == tag => Ok(it.map(str::to_string).collect()),
            _ => Err(FormatError::parse(lineno, format!("expected `{tag}` section"))),
        }
    };
    Ok(Cell {
        id,
        body,
        consumes_slots: names(sections[1], "consumes")?,
        produces_slots: names(sections[2], "produces")?,
        passthrough_slots: names(sections[3], "passthrough")?,
    })
}

// ---------------------------------------------------------------------------
// Partition report

pub fn emit_partition(p: &Partition) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# unetpipe partition");
    let _ = writeln!(s, "cells {}", p.num_cells);
    let _ = write!(s, "boundaries");
    for b in &p.boundaries {
        let _ = write!(s, " {b}");
    }
    let _ = writeln!(s);
    for i in 0..p.stages() {
        let _ = writeln!(
            s,
            "stage {i} cost {} params {} activations {} input_acts {} working {} slot_in {}",
            p.stage_costs[i],
            p.stage_params[i],
            p.stage_activations[i],
            p.stage_input_acts[i],
            p.stage_working_acts[i],
            p.stage_slot_in[i],
        );
    }
    s
}

pub fn parse_partition(text: &str) -> Result<Partition, FormatError> {
    let mut num_cells = None;
    let mut boundaries = Vec::new();
    let mut rows: Vec<(usize, f64, u64, u64, u64, u64, u64)> = Vec::new();
    for (lineno, line) in meaningful_lines(text) {
        if let Some(rest) = line.strip_prefix("cells ") {
            num_cells = Some(rest.trim().parse::<usize>().map_err(|_| {
                FormatError::parse(lineno, format!("bad cell count `{}`", rest.trim()))
            })?);
        } else if let Some(rest) = line.strip_prefix("boundaries") {
            boundaries = rest
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| FormatError::parse(lineno, format!("bad boundary `{t}`")))
                })
                .collect::<Result<_, _>>()?;
        } else if let Some(rest) = line.strip_prefix("stage ") {
            let t: Vec<&str> = rest.split_whitespace().collect();
            if t.len() != 13 {
                return Err(FormatError::parse(lineno, "malformed stage line"));
            }
            let expect = |pos: usize, tag: &str| -> Result<(), FormatError> {
                if t[pos] != tag {
                    return Err(FormatError::parse(lineno, format!("expected `{tag}`")));
                }
                Ok(())
            };
            expect(1, "cost")?;
            expect(3, "params")?;
            expect(5, "activations")?;
            expect(7, "input_acts")?;
            expect(9, "working")?;
            expect(11, "slot_in")?;
            let num = |pos: usize| -> Result<u64, FormatError> {
                t[pos].parse().map_err(|_| FormatError::parse(lineno, format!("bad number `{}`", t[pos])))
            };
            let idx: usize =
                t[0].parse().map_err(|_| FormatError::parse(lineno, "bad stage index"))?;
            let cost: f64 =
                t[2].parse().map_err(|_| FormatError::parse(lineno, "bad stage cost"))?;
            rows.push((idx, cost, num(4)?, num(6)?, num(8)?, num(10)?, num(12)?));
        } else {
            return Err(FormatError::parse(lineno, format!("unexpected line `{line}`")));
        }
    }
    let num_cells = num_cells.ok_or_else(|| FormatError::parse(0, "missing `cells` line"))?;
    rows.sort_by_key(|r| r.0);
    if rows.is_empty() || rows.len() != boundaries.len() + 1 {
        return Err(FormatError::parse(0, "stage count does not match boundaries"));
    }
    Ok(Partition {
        boundaries,
        num_cells,
        stage_costs: rows.iter().map(|r| r.1).collect(),
        stage_params: rows.iter().map(|r| r.2).collect(),
        stage_activations: rows.iter().map(|r| r.3).collect(),
        stage_input_acts: rows.iter().map(|r| r.4).collect(),
        stage_working_acts: rows.iter().map(|r| r.5).collect(),
        stage_slot_in: rows.iter().map(|r| r.6).collect(),
    })
}

// ---------------------------------------------------------------------------
// Scenario

/// A shipped or user-written schedule scenario. `placement` selects the raw
/// dependency schedule over the referenced graph; without it the graph is
/// sequentialized, balanced over `devices` stages, and pipelined.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model_ref: PathBuf,
    pub devices: usize,
    pub micro_batches: usize,
    pub batch_size: usize,
    pub backward_ratio: f64,
    pub barrier: bool,
    pub repeat: usize,
    pub placement: Option<Vec<usize>>,
}

impl Scenario {
    pub fn schedule_config(&self) -> ScheduleConfig {
        let mut cfg = ScheduleConfig::new(self.devices, self.micro_batches, self.batch_size);
        cfg.backward_cost_ratio = self.backward_ratio;
        cfg.phase_barrier = self.barrier;
        cfg.repeat_batches = self.repeat;
        cfg
    }

    /// The referenced model path, relative to the scenario file's directory.
    pub fn resolve_model(&self, scenario_path: &Path) -> PathBuf {
        if self.model_ref.is_absolute() {
            self.model_ref.clone()
        } else {
            scenario_path.parent().unwrap_or(Path::new(".")).join(&self.model_ref)
        }
    }
}

pub fn emit_scenario(sc: &Scenario) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# unetpipe scenario");
    let _ = writeln!(s, "model = {}", sc.model_ref.display());
    let _ = writeln!(s, "devices = {}", sc.devices);
    let _ = writeln!(s, "micro_batches = {}", sc.micro_batches);
    let _ = writeln!(s, "batch_size = {}", sc.batch_size);
    let _ = writeln!(s, "backward_ratio = {}", sc.backward_ratio);
    let _ = writeln!(s, "barrier = {}", sc.barrier);
    let _ = writeln!(s, "repeat = {}", sc.repeat);
    if let Some(p) = &sc.placement {
        let _ = write!(s, "placement =");
        for d in p {
            let _ = write!(s, " {d}");
        }
        let _ = writeln!(s);
    }
    s
}

pub fn parse_scenario(text: &str) -> Result<Scenario, FormatError> {
    let mut sc = Scenario {
        model_ref: PathBuf::new(),
        devices: 1,
        micro_batches: 1,
        batch_size: 1,
        backward_ratio: 2.0,
        barrier: true,
        repeat: 1,
        placement: None,
    };
    let mut saw_model = false;
    for (lineno, line) in meaningful_lines(text) {
        let (key, value) = split_key_value(line, lineno)?;
        let bad = |what: &str| FormatError::parse(lineno, format!("bad {what}: `{value}`"));
        match key {
            "model" => {
                sc.model_ref = PathBuf::from(value);
                saw_model = true;
            }
            "devices" => sc.devices = value.parse().map_err(|_| bad(key))?,
            "micro_batches" => sc.micro_batches = value.parse().map_err(|_| bad(key))?,
            "batch_size" => sc.batch_size = value.parse().map_err(|_| bad(key))?,
            "backward_ratio" => sc.backward_ratio = value.parse().map_err(|_| bad(key))?,
            "barrier" => sc.barrier = value.parse().map_err(|_| bad(key))?,
            "repeat" => sc.repeat = value.parse().map_err(|_| bad(key))?,
            "placement" => {
                sc.placement = Some(
                    value
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| bad("placement")))
                        .collect::<Result<_, _>>()?,
                );
            }
            other => return Err(FormatError::parse(lineno, format!("unknown key `{other}`"))),
        }
    }
    if !saw_model {
        return Err(FormatError::parse(0, "scenario needs a `model =` line"));
    }
    Ok(sc)
}

// ---------------------------------------------------------------------------
// Timeline

pub fn emit_timeline(timeline: &Timeline) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# device start end phase stage micro round");
    for e in &timeline.events {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            e.device, e.start, e.end, e.phase, e.stage, e.micro, e.round
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Curriculum plan

pub fn emit_plan(plan: &CurriculumPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# unetpipe curriculum plan");
    let _ = writeln!(s, "reset_optimizer = {}", plan.reset_optimizer);
    let _ = writeln!(s, "clamped = {}", plan.clamped);
    for st in &plan.stages {
        let _ = writeln!(
            s,
            "stage patch {} {} {} batch {} epochs {} lr {} optimizer {} sampling {}",
            st.patch_size.0,
            st.patch_size.1,
            st.patch_size.2,
            st.batch_size,
            st.epochs,
            st.learning_rate,
            st.optimizer,
            st.sampling.as_str(),
        );
    }
    s
}

pub fn parse_plan(text: &str) -> Result<CurriculumPlan, FormatError> {
    let mut plan = CurriculumPlan { stages: Vec::new(), clamped: false, reset_optimizer: true };
    for (lineno, line) in meaningful_lines(text) {
        if let Some(rest) = line.strip_prefix("stage ") {
            let t: Vec<&str> = rest.split_whitespace().collect();
            if t.len() != 14
                || t[0] != "patch"
                || t[4] != "batch"
                || t[6] != "epochs"
                || t[8] != "lr"
                || t[10] != "optimizer"
                || t[12] != "sampling"
            {
                return Err(FormatError::parse(lineno, "malformed stage line"));
            }
            let n = |pos: usize| -> Result<usize, FormatError> {
                t[pos].parse().map_err(|_| FormatError::parse(lineno, format!("bad number `{}`", t[pos])))
            };
            let sampling = match t[13] {
                "positive_biased" => Sampling::PositiveBiased,
                "whole_image" => Sampling::WholeImage,
                other => {
                    return Err(FormatError::parse(lineno, format!("unknown sampling `{other}`")))
                }
            };
            plan.stages.push(CurriculumStage {
                patch_size: (n(1)?, n(2)?, n(3)?),
                batch_size: n(5)?,
                epochs: n(7)?,
                learning_rate: t[9]
                    .parse()
                    .map_err(|_| FormatError::parse(lineno, "bad learning rate"))?,
                optimizer: t[11].to_string(),
                sampling,
            });
        } else {
            let (key, value) = split_key_value(line, lineno)?;
            match key {
                "reset_optimizer" => {
                    plan.reset_optimizer = value
                        .parse()
                        .map_err(|_| FormatError::parse(lineno, "bad reset_optimizer"))?
                }
                "clamped" => {
                    plan.clamped =
                        value.parse().map_err(|_| FormatError::parse(lineno, "bad clamped"))?
                }
                other => return Err(FormatError::parse(lineno, format!("unknown key `{other}`"))),
            }
        }
    }
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Tensor fixtures

pub fn emit_tensor(t: &Tensor) -> String {
    let mut s = String::from("shape:");
    for d in &t.shape {
        let _ = write!(s, " {d}");
    }
    let _ = writeln!(s);
    for (i, v) in t.data.iter().enumerate() {
        let sep = if (i + 1) % 8 == 0 || i + 1 == t.data.len() { '\n' } else { ' ' };
        let _ = write!(s, "{v}{sep}");
    }
    s
}

pub fn parse_tensor(text: &str) -> Result<Tensor, FormatError> {
    let mut lines = text.lines().enumerate();
    let (lineno, header) = lines
        .by_ref()
        .map(|(i, l)| (i + 1, l.trim()))
        .find(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| FormatError::parse(0, "empty tensor file"))?;
    let shape_part = header
        .strip_prefix("shape:")
        .ok_or_else(|| FormatError::parse(lineno, "tensor file must start with `shape:`"))?;
    let shape: Vec<usize> = shape_part
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| FormatError::parse(lineno, format!("bad dimension `{t}`"))))
        .collect::<Result<_, _>>()?;
    let mut data = Vec::new();
    for (i, line) in lines {
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| FormatError::parse(i + 1, format!("bad value `{tok}`")))?,
            );
        }
    }
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(FormatError::parse(0, format!("expected {expected} values, got {}", data.len())));
    }
    Ok(Tensor { shape, data })
}
