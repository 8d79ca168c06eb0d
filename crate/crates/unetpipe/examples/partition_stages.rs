//! Balance the default U-Net chain across four devices and inspect the
//! stage loads.
//!
//!     cargo run --example partition_stages

use unetpipe::chain::sequentialize;
use unetpipe::partition::partition_balanced;
use unetpipe::unet::{build_unet, UNetConfig};

fn main() {
    let graph = build_unet(&UNetConfig::default()).expect("default config");
    let seq = sequentialize(&graph).expect("transformable");
    let total: f64 = seq.cell_costs().iter().sum();

    for k in [2usize, 3, 4] {
        let p = partition_balanced(&seq, k).expect("k within range");
        println!("k = {k}: bottleneck {:.3e} (ideal {:.3e})", p.bottleneck_cost(), total / k as f64);
        for (i, range) in p.stage_ranges().iter().enumerate() {
            let first = &graph.layers[seq.cells[range.start].body[0]].name;
            let last = &graph.layers[*seq.cells[range.end - 1].body.last().unwrap()].name;
            println!(
                "  stage {i}: cells {:>3}..{:<3} [{first} .. {last}] cost {:.3e} params {}",
                range.start, range.end, p.stage_costs[i], p.stage_params[i]
            );
        }
    }
}
