//! Simulate the micro-batch pipeline over a uniform chain and check the
//! schedule against the fill/drain arithmetic.
//!
//!     cargo run --example simulate_pipeline

use unetpipe::chain::sequentialize;
use unetpipe::graph::{LayerKind, LayerSpec, ModelGraph};
use unetpipe::partition::partition_balanced;
use unetpipe::sim::{phase_horizon, phase_utilization, simulate_gpipe, Phase, ScheduleConfig};

fn uniform_chain(layers: usize) -> ModelGraph {
    let mut all = vec![LayerSpec {
        id: 0,
        name: "input".into(),
        kind: LayerKind::Source,
        compute_cost: 0.0,
        param_count: 0,
        activation_elems: 1,
        inputs: vec![],
    }];
    for i in 1..=layers {
        all.push(LayerSpec {
            id: i,
            name: format!("block{i}"),
            kind: LayerKind::Affine,
            compute_cost: 1.0,
            param_count: 0,
            activation_elems: 1,
            inputs: vec![i - 1],
        });
    }
    all.push(LayerSpec {
        id: layers + 1,
        name: "output".into(),
        kind: LayerKind::Sink,
        compute_cost: 0.0,
        param_count: 0,
        activation_elems: 0,
        inputs: vec![layers],
    });
    ModelGraph { layers: all, output_id: layers }
}

fn main() {
    let k = 4usize;
    let m = 8usize;
    let seq = sequentialize(&uniform_chain(k)).expect("chain");
    let partition = partition_balanced(&seq, k).expect("k stages");

    let mut cfg = ScheduleConfig::new(k, m, m);
    cfg.backward_cost_ratio = 2.0;
    let (timeline, metrics) = simulate_gpipe(&partition, &cfg).expect("simulate");

    println!("devices {k}, micro-batches {m}, unit stage costs, backward 2x forward");
    println!("forward horizon   {} (fill/drain says k+m-1 = {})", phase_horizon(&timeline, Phase::Forward), k + m - 1);
    println!(
        "forward util      {:.6} (m/(m+k-1) = {:.6})",
        phase_utilization(&timeline, Phase::Forward, k),
        m as f64 / (m + k - 1) as f64
    );
    println!("makespan          {}", metrics.makespan);
    println!("utilization       {:.6}", metrics.utilization);
    println!("bubble fraction   {:.6}", metrics.bubble_fraction);
    println!("peak memory       {:?}", metrics.per_device_peak_memory);

    println!("\nfirst events:");
    for e in timeline.events.iter().take(10) {
        println!("  device {} [{:>4.1}, {:>4.1}) {} stage {} micro {}", e.device, e.start, e.end, e.phase, e.stage, e.micro);
    }
}
