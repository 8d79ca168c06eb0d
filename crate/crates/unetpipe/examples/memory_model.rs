//! Per-device peak memory of the pipelined schedule: the boundary stash
//! scales with the batch, the working set with the micro-batch.
//!
//!     cargo run --example memory_model

use unetpipe::chain::sequentialize;
use unetpipe::graph::{LayerKind, LayerSpec, ModelGraph};
use unetpipe::partition::{partition_balanced, partition_fixed};
use unetpipe::sim::{estimate_memory, ScheduleConfig};
use unetpipe::unet::{build_unet, UNetConfig};

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
            name: format!("l{i}"),
            kind: LayerKind::Affine,
            compute_cost: 1.0,
            param_count: 0,
            activation_elems: 1,
            inputs: vec![i - 1],
        });
    }
    all.push(LayerSpec {
        id: layers + 1,
        name: "out".into(),
        kind: LayerKind::Sink,
        compute_cost: 0.0,
        param_count: 0,
        activation_elems: 0,
        inputs: vec![layers],
    });
    ModelGraph { layers: all, output_id: layers }
}

fn main() {
    // Uniform unit-activation chain: peak = N + (L/K)(N/M) per device.
    let (l, k, n) = (32usize, 4usize, 16usize);
    let seq = sequentialize(&uniform_chain(l)).expect("chain");
    let per = l / k;
    let boundaries: Vec<usize> = (1..k).map(|j| 1 + j * per).collect();
    let p = partition_fixed(&seq, &boundaries).expect("even split");

    println!("uniform chain: L={l} layers over K={k} devices, batch N={n}");
    println!("{:>4} {:>12} {:>14}", "M", "peak/device", "N + (L/K)(N/M)");
    for m in [1usize, 2, 4, 8, 16] {
        let cfg = ScheduleConfig::new(k, m, n);
        let peak = estimate_memory(&p, &cfg)[0];
        println!("{m:>4} {peak:>12} {:>14}", n + per * (n / m));
    }

    // The real model: memory per device for the default U-Net.
    let cfg = UNetConfig::default();
    let seq = sequentialize(&build_unet(&cfg).expect("default")).expect("chain");
    let p = partition_balanced(&seq, 4).expect("4 stages");
    let sched = ScheduleConfig::new(4, 8, 8);
    println!("\nunet-32 on 4 devices, batch 8, 8 micro-batches:");
    for (d, peak) in estimate_memory(&p, &sched).iter().enumerate() {
        println!("  device {d}: {peak} elements ({:.2} GiB at f32)", *peak as f64 * 4.0 / (1 << 30) as f64);
    }
}
