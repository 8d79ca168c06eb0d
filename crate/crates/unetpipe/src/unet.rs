//! Parameterized encoder/decoder network builder.
//!
//! Emits a U-Net-shaped [`ModelGraph`]: `encoder_blocks` encoder blocks with
//! filter widths doubling per block, a symmetric decoder, and one channel
//! concatenation joining each non-bottom encoder block's output to the
//! decoder block at the same level. Every block is a fixed sub-chain
//! `affine -> relu -> affine -> relu -> downsample/upsample`; the affine
//! layers stand in for convolutions with weight-only parameter counts, so
//! parameter totals scale quadratically with width.

use thiserror::Error;

use crate::graph::{LayerKind, LayerSpec, ModelGraph};

/// Extra compute charged per block body layer when squeeze-excitation
/// blocks are enabled. The blocks themselves are not materialized.
pub const SE_COST_FACTOR: f64 = 1.15;

/// Per-kind compute multipliers. The cost basis is
/// `output_elems * input_channels` for affine layers and `output_elems`
/// for everything else that computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub affine: f64,
    pub relu: f64,
    pub downsample: f64,
    pub upsample: f64,
    pub concat: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { affine: 1.0, relu: 1.0, downsample: 1.0, upsample: 1.0, concat: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Filter count of the first encoder block; block `b` uses
    /// `base_filters * 2^(b-1)`.
    pub base_filters: u64,
    pub encoder_blocks: u32,
    /// (channels, x, y, z), all positive; spatial extents must be divisible
    /// by `2^encoder_blocks` so every downsample halves cleanly.
    pub input_shape: (u64, u64, u64, u64),
    pub cost_model: CostModel,
    pub se_blocks: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_filters: 32,
            encoder_blocks: 5,
            input_shape: (1, 192, 192, 192),
            cost_model: CostModel::default(),
            se_blocks: false,
        }
    }
}

impl UNetConfig {
    pub fn filters_at(&self, block: u32) -> u64 {
        self.base_filters << (block - 1)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error("need at least 2 encoder blocks, got {got}")]
    TooFewEncoderBlocks { got: u32 },
    #[error("base_filters must be positive")]
    ZeroBaseFilters,
    #[error("input shape must be positive in every dimension")]
    NonPositiveShape,
    #[error("spatial extent {extent} on axis {axis} is not divisible by 2^{blocks}")]
    IndivisibleShape { axis: char, extent: u64, blocks: u32 },
}

/// Where each block of a built graph lives, for placement helpers and
/// reports. Spans index into `ModelGraph::layers`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpan {
    pub label: String,
    /// Level 1 is the outermost encoder/decoder pair.
    pub level: u32,
    pub range: std::ops::Range<usize>,
}

struct Builder {
    layers: Vec<LayerSpec>,
    spans: Vec<BlockSpan>,
}

impl Builder {
    fn push(
        &mut self,
        name: String,
        kind: LayerKind,
        compute_cost: f64,
        param_count: u64,
        activation_elems: u64,
        inputs: Vec<usize>,
    ) -> usize {
        let id = self.layers.len();
        self.layers.push(LayerSpec {
            id,
            name,
            kind,
            compute_cost,
            param_count,
            activation_elems,
            inputs,
        });
        id
    }
}

/// Builds the graph described by `config`.
pub fn build_unet(config: &UNetConfig) -> Result<ModelGraph, BuildError> {
    let blocks = config.encoder_blocks;
    if blocks < 2 {
        return Err(BuildError::TooFewEncoderBlocks { got: blocks });
    }
    if config.base_filters == 0 {
        return Err(BuildError::ZeroBaseFilters);
    }
    let (channels, x, y, z) = config.input_shape;
    if channels == 0 || x == 0 || y == 0 || z == 0 {
        return Err(BuildError::NonPositiveShape);
    }
    for (axis, extent) in [('x', x), ('y', y), ('z', z)] {
        if extent % (1u64 << blocks) != 0 {
            return Err(BuildError::IndivisibleShape { axis, extent, blocks });
        }
    }

    let cm = &config.cost_model;
    let se = if config.se_blocks { SE_COST_FACTOR } else { 1.0 };
    let mut b = Builder { layers: Vec::new(), spans: Vec::new() };

    let input_elems = channels * x * y * z;
    b.push("input".into(), LayerKind::Source, 0.0, 0, input_elems, vec![]);

    // Spatial voxel count at the input of encoder block `level`.
    let voxels_at = |level: u32| -> u64 { (x >> (level - 1)) * (y >> (level - 1)) * (z >> (level - 1)) };

    let mut prev = 0usize;
    let mut prev_channels = channels;
    // Output id of each encoder block's downsample, indexed by level - 1.
    let mut skip_taps: Vec<usize> = Vec::new();

    for level in 1..=blocks {
        let f = config.filters_at(level);
        let voxels = voxels_at(level);
        let start = b.layers.len();
        let body = |bl: &mut Builder, tag: &str, kind, cost, params, acts, input| {
            bl.push(format!("e{level}.{tag}"), kind, cost, params, acts, vec![input])
        };
        let a0 = body(
            &mut b,
            "affine0",
            LayerKind::Affine,
            (f * voxels) as f64 * prev_channels as f64 * cm.affine * se,
            prev_channels * f,
            f * voxels,
            prev,
        );
        let r0 = body(&mut b, "relu0", LayerKind::Relu, (f * voxels) as f64 * cm.relu * se, 0, f * voxels, a0);
        let a1 = body(
            &mut b,
            "affine1",
            LayerKind::Affine,
            (f * voxels) as f64 * f as f64 * cm.affine * se,
            f * f,
            f * voxels,
            r0,
        );
        let r1 = body(&mut b, "relu1", LayerKind::Relu, (f * voxels) as f64 * cm.relu * se, 0, f * voxels, a1);
        let down_acts = f * voxels / 8;
        let down = body(
            &mut b,
            "down",
            LayerKind::Downsample2x,
            down_acts as f64 * cm.downsample * se,
            0,
            down_acts,
            r1,
        );
        b.spans.push(BlockSpan { label: format!("e{level}"), level, range: start..b.layers.len() });
        skip_taps.push(down);
        prev = down;
        prev_channels = f;
    }

    // Decoder, bottom level first. Each block runs at the downsampled
    // resolution of its level and upsamples on exit.
    for level in (1..=blocks).rev() {
        let f = config.filters_at(level);
        let voxels = voxels_at(level) / 8;
        let start = b.layers.len();
        if level < blocks {
            // Channel concatenation of (encoder tap, upstream decoder).
            let tap = skip_taps[(level - 1) as usize];
            let joined = f + config.filters_at(level + 1);
            let acts = joined * voxels;
            let concat = b.push(
                format!("s{level}"),
                LayerKind::Concat,
                acts as f64 * cm.concat,
                0,
                acts,
                vec![tap, prev],
            );
            prev = concat;
            prev_channels = joined;
        }
        let a0 = b.push(
            format!("d{level}.affine0"),
            LayerKind::Affine,
            (f * voxels) as f64 * prev_channels as f64 * cm.affine * se,
            prev_channels * f,
            f * voxels,
            vec![prev],
        );
        let r0 = b.push(
            format!("d{level}.relu0"),
            LayerKind::Relu,
            (f * voxels) as f64 * cm.relu * se,
            0,
            f * voxels,
            vec![a0],
        );
        let a1 = b.push(
            format!("d{level}.affine1"),
            LayerKind::Affine,
            (f * voxels) as f64 * f as f64 * cm.affine * se,
            f * f,
            f * voxels,
            vec![r0],
        );
        let r1 = b.push(
            format!("d{level}.relu1"),
            LayerKind::Relu,
            (f * voxels) as f64 * cm.relu * se,
            0,
            f * voxels,
            vec![a1],
        );
        let up_acts = f * voxels * 8;
        let up = b.push(
            format!("d{level}.up"),
            LayerKind::Upsample2x,
            up_acts as f64 * cm.upsample * se,
            0,
            up_acts,
            vec![r1],
        );
        b.spans.push(BlockSpan { label: format!("d{level}"), level, range: start..b.layers.len() });
        prev = up;
        prev_channels = f;
    }

    let output_id = prev;
    b.push("output".into(), LayerKind::Sink, 0.0, 0, 0, vec![output_id]);

    Ok(ModelGraph { layers: b.layers, output_id })
}

/// Block layout of a graph produced by [`build_unet`] with `config`.
/// Positions are recomputed from the fixed block shape, so the result is
/// only meaningful for graphs built from the same config.
pub fn block_layout(config: &UNetConfig) -> Vec<BlockSpan> {
    // Rebuild with zeroed shape checks is unnecessary: spans depend only on
    // block count.
    let blocks = config.encoder_blocks as usize;
    let mut spans = Vec::new();
    let mut at = 1usize; // skip source
    for level in 1..=blocks {
        spans.push(BlockSpan { label: format!("e{level}"), level: level as u32, range: at..at + 5 });
        at += 5;
    }
    for level in (1..=blocks).rev() {
        let len = if level == blocks { 5 } else { 6 }; // concat + block body
        spans.push(BlockSpan { label: format!("d{level}"), level: level as u32, range: at..at + len });
        at += len;
    }
    spans
}

/// Device per layer that keeps each skip connection device-local: level
/// `i`'s encoder and decoder blocks (and its concat) share a device.
/// Levels are distributed contiguously over `devices`.
pub fn mirrored_placement(config: &UNetConfig, devices: usize) -> Vec<usize> {
    let blocks = config.encoder_blocks as usize;
    let total_layers = 11 * blocks + 1;
    let device_of_level = |level: u32| -> usize {
        ((level as usize - 1) * devices / blocks).min(devices - 1)
    };
    let mut placement = vec![0usize; total_layers];
    for span in block_layout(config) {
        for i in span.range.clone() {
            placement[i] = device_of_level(span.level);
        }
    }
    placement[0] = device_of_level(1); // source with e1
    placement[total_layers - 1] = device_of_level(1); // sink with d1
    placement
}
