//! Cross-module invariants: schedule validity, memory monotonicity, the
//! sequentialized-pipeline dominance claim, executor determinism, and the
//! documented finite-difference exclusion.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unetpipe::chain::sequentialize;
use unetpipe::exec::{
    check_grad_finite_difference, init_params, run_pipeline, ExecMode, LossSpec, ParamInit,
    Params, Tensor,
};
use unetpipe::graph::{LayerKind, LayerSpec, ModelGraph};
use unetpipe::partition::{partition_balanced, partition_fixed};
use unetpipe::sim::{
    check_device_exclusivity, check_gpipe_timeline, estimate_memory,
    simulate_dependency_schedule, simulate_gpipe, steady_state_throughput, ScheduleConfig,
    Workload,
};
use unetpipe::unet::{build_unet, mirrored_placement, UNetConfig};

fn random_config(rng: &mut ChaCha8Rng) -> UNetConfig {
    let blocks = rng.random_range(2..=4u32);
    UNetConfig {
        base_filters: rng.random_range(1..=4u64),
        encoder_blocks: blocks,
        input_shape: (rng.random_range(1..=3u64), 16, 16, 16),
        ..UNetConfig::default()
    }
}

fn uniform_chain(len: usize) -> ModelGraph {
    let mut layers = vec![LayerSpec {
        id: 0,
        name: "in".into(),
        kind: LayerKind::Source,
        compute_cost: 0.0,
        param_count: 0,
        activation_elems: 1,
        inputs: vec![],
    }];
    for i in 1..=len {
        layers.push(LayerSpec {
            id: i,
            name: format!("l{i}"),
            kind: LayerKind::Affine,
            compute_cost: 1.0,
            param_count: 0,
            activation_elems: 1,
            inputs: vec![i - 1],
        });
    }
    layers.push(LayerSpec {
        id: len + 1,
        name: "out".into(),
        kind: LayerKind::Sink,
        compute_cost: 0.0,
        param_count: 0,
        activation_elems: 0,
        inputs: vec![len],
    });
    ModelGraph { layers, output_id: len }
}

/// Sequentialized-and-pipelined throughput never loses to the raw graph
/// under its skip-local mirrored placement, with identical schedule
/// parameters on both sides.
#[test]
fn sequentialized_pipeline_dominates_raw_schedule() {
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut rng);
        let graph = build_unet(&cfg).unwrap();
        let seq = sequentialize(&graph).unwrap();
        for k in [2usize, 3, 4] {
            if k > cfg.encoder_blocks as usize {
                continue;
            }
            let partition = partition_balanced(&seq, k).unwrap();
            let placement = mirrored_placement(&cfg, k);
            for (micro, ratio, barrier) in [(k, 1.0, true), (1, 0.0, false)] {
                let mut sc = ScheduleConfig::new(k, micro, micro);
                sc.backward_cost_ratio = ratio;
                sc.phase_barrier = barrier;
                sc.repeat_batches = (2 * k + 2).max(9);
                let seq_thr =
                    steady_state_throughput(Workload::Pipelined { partition: &partition }, &sc)
                        .unwrap();
                let raw_thr = steady_state_throughput(
                    Workload::Raw { graph: &graph, placement: &placement },
                    &sc,
                )
                .unwrap();
                assert!(
                    seq_thr >= raw_thr - 1e-12,
                    "seed {seed} k {k} micro {micro}: seq {seq_thr} < raw {raw_thr}"
                );
            }
        }
    }
}

/// Every simulator output satisfies device exclusivity; stage pipelines
/// also satisfy adjacency order and the phase barrier.
#[test]
fn simulated_timelines_are_valid() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = random_config(&mut rng);
        let graph = build_unet(&cfg).unwrap();
        let seq = sequentialize(&graph).unwrap();
        let k = rng.random_range(1..=4usize);
        let partition = partition_balanced(&seq, k).unwrap();
        let m = rng.random_range(1..=4usize);
        let mut sc = ScheduleConfig::new(k, m, m);
        sc.backward_cost_ratio = [0.0, 1.0, 2.0][rng.random_range(0..3)];
        sc.phase_barrier = rng.random_range(0..2) == 0;
        sc.repeat_batches = rng.random_range(1..=3usize);
        sc.comm_cost_per_boundary = [0.0, 0.5][rng.random_range(0..2)];
        let (timeline, metrics) = simulate_gpipe(&partition, &sc).unwrap();
        check_gpipe_timeline(&timeline, k, sc.phase_barrier).unwrap();
        assert!(metrics.utilization >= 0.0 && metrics.utilization <= 1.0 + 1e-12);

        let placement = mirrored_placement(&cfg, k.min(cfg.encoder_blocks as usize));
        let mut sc = sc.clone();
        sc.devices = k.min(cfg.encoder_blocks as usize);
        let (timeline, _) = simulate_dependency_schedule(&graph, &placement, &sc).unwrap();
        check_device_exclusivity(&timeline).unwrap();
    }
}

/// Peak memory is non-increasing in the micro-batch count and in the
/// device count for uniform models.
#[test]
fn memory_monotone_in_micro_batches_and_devices() {
    let l = 32usize;
    let n = 16usize;
    for k in [1usize, 2, 4, 8] {
        let seq = sequentialize(&uniform_chain(l)).unwrap();
        let per = l / k;
        let boundaries: Vec<usize> = (1..k).map(|j| 1 + j * per).collect();
        let p = partition_fixed(&seq, &boundaries).unwrap();
        let mut prev = u64::MAX;
        for m in [1usize, 2, 4, 8, 16] {
            let sc = ScheduleConfig::new(k, m, n);
            let peak = *estimate_memory(&p, &sc).iter().max().unwrap();
            assert!(peak <= prev, "k={k}: peak grew from {prev} to {peak} at m={m}");
            prev = peak;
        }
    }
    for m in [1usize, 2, 4] {
        let mut prev = u64::MAX;
        for k in [1usize, 2, 4, 8] {
            let seq = sequentialize(&uniform_chain(l)).unwrap();
            let per = l / k;
            let boundaries: Vec<usize> = (1..k).map(|j| 1 + j * per).collect();
            let p = partition_fixed(&seq, &boundaries).unwrap();
            let sc = ScheduleConfig::new(k, m, n);
            let peak = *estimate_memory(&p, &sc).iter().max().unwrap();
            assert!(peak <= prev, "m={m}: peak grew from {prev} to {peak} at k={k}");
            prev = peak;
        }
    }
}

/// Steady-state throughput settles: doubling the round count moves the
/// measurement by less than the acceptance tolerance.
#[test]
fn steady_state_converges_with_rounds() {
    let cfg = UNetConfig {
        base_filters: 2,
        encoder_blocks: 3,
        input_shape: (1, 16, 16, 16),
        ..UNetConfig::default()
    };
    let graph = build_unet(&cfg).unwrap();
    let seq = sequentialize(&graph).unwrap();
    let p = partition_balanced(&seq, 3).unwrap();
    let mut last = None;
    for repeat in [9usize, 16, 32, 64] {
        let mut sc = ScheduleConfig::new(3, 3, 3);
        sc.backward_cost_ratio = 1.0;
        sc.repeat_batches = repeat;
        let thr = steady_state_throughput(Workload::Pipelined { partition: &p }, &sc).unwrap();
        if let Some(prev) = last {
            let delta: f64 = thr - prev;
            assert!(delta.abs() < 0.01, "throughput moved {delta} between round counts");
        }
        last = Some(thr);
    }
}

/// Identical seeds produce bit-identical gradients in both execution
/// modes, across repeated runs.
#[test]
fn pipeline_execution_is_deterministic() {
    let cfg = UNetConfig {
        base_filters: 2,
        encoder_blocks: 2,
        input_shape: (1, 8, 8, 8),
        ..UNetConfig::default()
    };
    let graph = build_unet(&cfg).unwrap();
    let seq = sequentialize(&graph).unwrap();
    let partition = partition_balanced(&seq, 3).unwrap();
    let item = [1usize, 8, 8, 8];

    let make_io = |seed: u64| -> (Params, Tensor, LossSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&graph, &item, &mut rng, ParamInit::Symmetric).unwrap();
        let input = Tensor::from_vec(
            vec![4, 1, 8, 8, 8],
            (0..4 * 512).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let shapes = unetpipe::exec::infer_shapes(&graph, &item).unwrap();
        let mut tshape = vec![4];
        tshape.extend_from_slice(&shapes[graph.output_id]);
        let n: usize = tshape.iter().product();
        let target = Tensor::from_vec(tshape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        (params, input, LossSpec { target })
    };

    let mut sc = ScheduleConfig::new(3, 4, 4);
    sc.backward_cost_ratio = 2.0;
    let (params, input, loss) = make_io(11);
    let a = run_pipeline(&seq, &partition, &params, &input, &loss, &sc, ExecMode::Threaded).unwrap();
    let b = run_pipeline(&seq, &partition, &params, &input, &loss, &sc, ExecMode::Threaded).unwrap();
    let c =
        run_pipeline(&seq, &partition, &params, &input, &loss, &sc, ExecMode::SingleThread).unwrap();
    assert_eq!(a.grads, b.grads, "repeated threaded runs must agree bit for bit");
    assert_eq!(a.output, b.output);
    assert_eq!(a.grads, c.grads, "threaded and reference modes must agree bit for bit");
    assert_eq!(a.output, c.output);
    assert_eq!(a.timeline, c.timeline, "logical schedules agree across modes");
}

/// One micro-batch on one worker degenerates to serial execution, bit for
/// bit — gradients included, since no reassociation happens.
#[test]
fn degenerate_pipeline_equals_serial_exactly() {
    use unetpipe::exec::{backward_serial, forward_serial};

    let cfg = UNetConfig {
        base_filters: 2,
        encoder_blocks: 2,
        input_shape: (1, 4, 4, 4),
        ..UNetConfig::default()
    };
    let graph = build_unet(&cfg).unwrap();
    let seq = sequentialize(&graph).unwrap();
    let partition = partition_balanced(&seq, 1).unwrap();
    let item = [1usize, 4, 4, 4];

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = init_params(&graph, &item, &mut rng, ParamInit::Symmetric).unwrap();
    let input = Tensor::from_vec(
        vec![3, 1, 4, 4, 4],
        (0..3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let shapes = unetpipe::exec::infer_shapes(&graph, &item).unwrap();
    let mut tshape = vec![3];
    tshape.extend_from_slice(&shapes[graph.output_id]);
    let n: usize = tshape.iter().product();
    let loss = LossSpec {
        target: Tensor::from_vec(tshape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
    };

    let (serial_out, _) = forward_serial(&graph, &params, &input).unwrap();
    let serial_grads = backward_serial(&graph, &params, &input, &loss).unwrap();
    let sched = ScheduleConfig::new(1, 1, 3);
    for mode in [ExecMode::Threaded, ExecMode::SingleThread] {
        let run = run_pipeline(&seq, &partition, &params, &input, &loss, &sched, mode).unwrap();
        assert_eq!(run.output, serial_out);
        assert_eq!(run.grads, serial_grads, "degenerate pipeline must match bit for bit");
    }
}

/// Purely linear models agree with central differences to rounding noise.
#[test]
fn finite_differences_exact_on_linear_model() {
    let graph = ModelGraph {
        layers: vec![
            LayerSpec {
                id: 0,
                name: "in".into(),
                kind: LayerKind::Source,
                compute_cost: 0.0,
                param_count: 0,
                activation_elems: 3,
                inputs: vec![],
            },
            LayerSpec {
                id: 1,
                name: "fc".into(),
                kind: LayerKind::Affine,
                compute_cost: 0.0,
                param_count: 6,
                activation_elems: 2,
                inputs: vec![0],
            },
            LayerSpec {
                id: 2,
                name: "out".into(),
                kind: LayerKind::Sink,
                compute_cost: 0.0,
                param_count: 0,
                activation_elems: 0,
                inputs: vec![1],
            },
        ],
        output_id: 1,
    };
    let mut params = Params::new();
    params.insert(1, Tensor::from_vec(vec![2, 3], vec![0.5, -0.75, 1.0, 0.75, 0.5, -0.6]));
    let input = Tensor::from_vec(vec![2, 3], vec![1.3, -0.8, 0.5, 1.1, 0.7, -0.4]);
    let loss = LossSpec { target: Tensor::from_vec(vec![2, 2], vec![3.0, -3.0, 4.0, -4.0]) };
    let err = check_grad_finite_difference(&graph, &params, &input, &loss, 1e-5).unwrap();
    assert!(err < 1e-9, "linear model fd error {err}");
}

/// A relu evaluated exactly at its kink is outside the finite-difference
/// contract: the check visibly fails there.
#[test]
fn finite_differences_break_at_relu_kink() {
    // y = relu(w * x) with x = 1, w = 0: the loss is non-differentiable in
    // w at 0, central differences straddle the kink.
    let graph = ModelGraph {
        layers: vec![
            LayerSpec {
                id: 0,
                name: "in".into(),
                kind: LayerKind::Source,
                compute_cost: 0.0,
                param_count: 0,
                activation_elems: 1,
                inputs: vec![],
            },
            LayerSpec {
                id: 1,
                name: "fc".into(),
                kind: LayerKind::Affine,
                compute_cost: 0.0,
                param_count: 1,
                activation_elems: 1,
                inputs: vec![0],
            },
            LayerSpec {
                id: 2,
                name: "act".into(),
                kind: LayerKind::Relu,
                compute_cost: 0.0,
                param_count: 0,
                activation_elems: 1,
                inputs: vec![1],
            },
            LayerSpec {
                id: 3,
                name: "out".into(),
                kind: LayerKind::Sink,
                compute_cost: 0.0,
                param_count: 0,
                activation_elems: 0,
                inputs: vec![2],
            },
        ],
        output_id: 2,
    };
    let mut params = Params::new();
    params.insert(1, Tensor::from_vec(vec![1, 1], vec![0.0]));
    let input = Tensor::from_vec(vec![1, 1], vec![1.0]);
    let loss = LossSpec { target: Tensor::from_vec(vec![1, 1], vec![1.0]) };
    let err = check_grad_finite_difference(&graph, &params, &input, &loss, 1e-5).unwrap();
    assert!(err > 1e-2, "kink should break the check, got {err}");
}
