//! Rewrite a two-block U-Net into a chain and show how the skip travels as
//! a pass-through slot.
//!
//!     cargo run --example sequentialize

use unetpipe::chain::{passthrough_memory_overhead, sequentialize};
use unetpipe::unet::{build_unet, UNetConfig};

fn main() {
    let cfg = UNetConfig {
        base_filters: 2,
        encoder_blocks: 2,
        input_shape: (1, 8, 8, 8),
        ..UNetConfig::default()
    };
    let graph = build_unet(&cfg).expect("valid config");
    let seq = sequentialize(&graph).expect("U-Net shape is chain-expressible");
    seq.check_chain().expect("chain property");

    println!("{:<6} {:<14} {:>10} {:<30}", "cell", "layer", "cost", "slots");
    for cell in &seq.cells {
        let layer = &seq.graph.layers[cell.body[0]];
        let mut slots = String::new();
        for s in &cell.produces_slots {
            slots.push_str(&format!("+{s} "));
        }
        for s in &cell.passthrough_slots {
            slots.push_str(&format!("~{s} "));
        }
        for s in &cell.consumes_slots {
            slots.push_str(&format!("-{s} "));
        }
        println!("{:<6} {:<14} {:>10} {:<30}", cell.id, layer.name, layer.compute_cost, slots);
    }
    println!("\nslot sizes (elements per item): {:?}", seq.slot_sizes);
    println!("pass-through overhead: {} elements per item", passthrough_memory_overhead(&seq));
    println!("(+produced, ~forwarded, -consumed)");
}
