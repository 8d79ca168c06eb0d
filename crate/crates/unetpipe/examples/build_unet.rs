//! Build U-Net graphs of the 32/64/128 width family and compare their
//! sizes.
//!
//!     cargo run --example build_unet

use unetpipe::graph::{total_cost, validate_graph};
use unetpipe::unet::{build_unet, UNetConfig};

fn main() {
    println!("{:<10} {:>10} {:>14} {:>18} {:>16}", "model", "layers", "params", "compute", "activations");
    let mut prev_params = None;
    for base in [32u64, 64, 128] {
        let cfg = UNetConfig { base_filters: base, ..UNetConfig::default() };
        let graph = build_unet(&cfg).expect("default config is valid");
        assert!(validate_graph(&graph).is_empty());
        let totals = total_cost(&graph);
        println!(
            "unet-{base:<5} {:>10} {:>14} {:>18.3e} {:>16}",
            graph.layers.len(),
            totals.params,
            totals.compute,
            totals.activations
        );
        if let Some(prev) = prev_params {
            println!("           width x2 -> params x{:.4}", totals.params as f64 / prev as f64);
        }
        prev_params = Some(totals.params);
    }

    let cfg = UNetConfig::default();
    println!("\nencoder filter widths: {:?}", (1..=5).map(|b| cfg.filters_at(b)).collect::<Vec<_>>());
}
