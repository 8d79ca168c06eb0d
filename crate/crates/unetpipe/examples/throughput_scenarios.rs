//! Run the two shipped three-device scenarios: the raw skip-connected model
//! under its mirrored placement versus the sequentialized chain under the
//! micro-batch pipeline.
//!
//!     cargo run --example throughput_scenarios

use std::path::Path;

use unetpipe::chain::sequentialize;
use unetpipe::formats;
use unetpipe::partition::partition_balanced;
use unetpipe::sim::{steady_state_throughput, Workload};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    println!("{:<22} {:>10} {:>12}", "scenario", "devices", "throughput");

    for name in ["conventional_unet", "sequential_unet"] {
        let path = dir.join(format!("{name}.scenario"));
        let scenario =
            formats::parse_scenario(&formats::read_to_string(&path).expect("scenario file"))
                .expect("well-formed scenario");
        let graph = formats::parse_graph(
            &formats::read_to_string(&scenario.resolve_model(&path)).expect("model file"),
        )
        .expect("well-formed graph");
        let cfg = scenario.schedule_config();

        let throughput = match &scenario.placement {
            Some(placement) => {
                steady_state_throughput(Workload::Raw { graph: &graph, placement }, &cfg)
            }
            None => {
                let seq = sequentialize(&graph).expect("chain-expressible");
                let partition = partition_balanced(&seq, scenario.devices).expect("balanced");
                steady_state_throughput(Workload::Pipelined { partition: &partition }, &cfg)
            }
        }
        .expect("steady state");
        println!("{name:<22} {:>10} {throughput:>12.4}", scenario.devices);
    }

    println!("\nBatch-equivalents of work per unit device-time, measured in the");
    println!("steady window (warm-up and drain rounds excluded).");
}
