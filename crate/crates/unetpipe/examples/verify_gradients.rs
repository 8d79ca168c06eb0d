//! Run the same training step serially and as a staged pipeline, and
//! compare outputs and gradients.
//!
//!     cargo run --example verify_gradients

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unetpipe::chain::sequentialize;
use unetpipe::exec::{
    backward_serial, forward_serial, infer_shapes, init_params, run_pipeline, ExecMode, LossSpec,
    ParamInit, Tensor,
};
use unetpipe::partition::partition_balanced;
use unetpipe::sim::{check_gpipe_timeline, ScheduleConfig};
use unetpipe::unet::{build_unet, UNetConfig};

fn main() {
    let cfg = UNetConfig {
        base_filters: 2,
        encoder_blocks: 2,
        input_shape: (1, 4, 4, 4),
        ..UNetConfig::default()
    };
    let graph = build_unet(&cfg).expect("valid config");
    let seq = sequentialize(&graph).expect("chain-expressible");
    let partition = partition_balanced(&seq, 3).expect("3 stages");

    let item_shape = [1usize, 4, 4, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let params = init_params(&graph, &item_shape, &mut rng, ParamInit::Symmetric).expect("shapes");

    let batch = 8usize;
    let input = random(&mut rng, {
        let mut s = vec![batch];
        s.extend_from_slice(&item_shape);
        s
    });
    let out_shape = infer_shapes(&graph, &item_shape).expect("shapes")[graph.output_id].clone();
    let loss = LossSpec {
        target: random(&mut rng, {
            let mut s = vec![batch];
            s.extend_from_slice(&out_shape);
            s
        }),
    };

    let (serial_out, _) = forward_serial(&graph, &params, &input).expect("forward");
    let serial_grads = backward_serial(&graph, &params, &input, &loss).expect("backward");

    let mut sched = ScheduleConfig::new(3, 4, batch);
    sched.backward_cost_ratio = 2.0;
    let run = run_pipeline(&seq, &partition, &params, &input, &loss, &sched, ExecMode::Threaded)
        .expect("pipeline");

    println!("2-block U-Net, batch {batch} split into {} micro-batches over 3 workers", sched.micro_batches);
    println!("outputs bit-identical: {}", run.output == serial_out);
    println!("gradient max relative error: {:.3e}", run.grads.max_rel_diff(&serial_grads));
    println!(
        "observed schedule is a valid pipeline: {}",
        check_gpipe_timeline(&run.timeline, 3, true).is_ok()
    );
    println!("schedule events: {}", run.timeline.events.len());
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}
