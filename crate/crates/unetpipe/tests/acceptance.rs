//! Acceptance suite: one test per shipped claim, each printing a pass line
//! with the measured values. Run with `cargo test --test acceptance --
//! --nocapture` to see them.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unetpipe::chain::{sequentialize, SequentialModel};
use unetpipe::curriculum::{
    default_plan, exact_expected_fraction, sample_positive_patch, Sampling,
};
use unetpipe::exec::{
    backward_serial, check_grad_finite_difference, forward_serial, forward_serial_chain,
    infer_shapes, init_params, run_pipeline, ExecMode, LossSpec, ParamInit, Params, Tensor,
};
use unetpipe::formats;
use unetpipe::graph::{LayerKind, LayerSpec, ModelGraph};
use unetpipe::partition::{partition_balanced, partition_fixed};
use unetpipe::sim::{
    check_gpipe_timeline, estimate_memory, phase_horizon, phase_utilization, simulate_gpipe,
    steady_state_throughput, Phase, ScheduleConfig, Workload,
};
use unetpipe::unet::{build_unet, UNetConfig};

fn scenario_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Source + `len` unit-cost, unit-activation compute layers + sink.
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

fn random_small_config(rng: &mut ChaCha8Rng) -> UNetConfig {
    let blocks = rng.random_range(2..=3u32);
    let spatial = if blocks == 2 { [4usize, 8][rng.random_range(0..2)] } else { 8 };
    UNetConfig {
        base_filters: rng.random_range(1..=2u64),
        encoder_blocks: blocks,
        input_shape: (rng.random_range(1..=2u64), spatial as u64, spatial as u64, spatial as u64),
        ..UNetConfig::default()
    }
}

fn item_shape(cfg: &UNetConfig) -> Vec<usize> {
    let (c, x, y, z) = cfg.input_shape;
    vec![c as usize, x as usize, y as usize, z as usize]
}

fn model_io(
    rng: &mut ChaCha8Rng,
    graph: &ModelGraph,
    shape: &[usize],
    batch: usize,
    init: ParamInit,
) -> (Params, Tensor, LossSpec) {
    let params = init_params(graph, shape, rng, init).expect("consistent shapes");
    let (lo, hi) = match init {
        ParamInit::Positive => (0.1, 1.0),
        ParamInit::Symmetric => (-1.0, 1.0),
    };
    let mut in_shape = vec![batch];
    in_shape.extend_from_slice(shape);
    let input = random_tensor(rng, in_shape, lo, hi);
    let out_item = infer_shapes(graph, shape).expect("shapes")[graph.output_id].clone();
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&out_item);
    let loss = LossSpec { target: random_tensor(rng, out_shape, -1.0, 1.0) };
    (params, input, loss)
}

#[test]
fn criterion_1_appendix_throughput_reproduction() {
    let started = Instant::now();
    let mut measured = Vec::new();
    for (name, expected) in [("conventional_unet", 0.5f64), ("sequential_unet", 0.75f64)] {
        let path = scenario_dir().join(format!("{name}.scenario"));
        let scenario = formats::parse_scenario(&formats::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(scenario.devices, 3, "appendix scenarios run on 3 devices");
        assert!(scenario.repeat >= 16);
        let graph = formats::parse_graph(
            &formats::read_to_string(&scenario.resolve_model(&path)).unwrap(),
        )
        .unwrap();
        let cfg = scenario.schedule_config();
        let thr = match &scenario.placement {
            Some(placement) => {
                steady_state_throughput(Workload::Raw { graph: &graph, placement }, &cfg).unwrap()
            }
            None => {
                let seq = sequentialize(&graph).unwrap();
                let p = partition_balanced(&seq, scenario.devices).unwrap();
                steady_state_throughput(Workload::Pipelined { partition: &p }, &cfg).unwrap()
            }
        };
        assert!(
            (thr - expected).abs() <= 0.01,
            "{name}: throughput {thr} not within 0.01 of {expected}"
        );
        measured.push(thr);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "[criterion 1] PASS conventional {:.4}, sequential {:.4} ({elapsed:?})",
        measured[0], measured[1]
    );
}

#[test]
fn criterion_2_pipeline_fill_closed_form() {
    let started = Instant::now();
    for k in 1..=8usize {
        for m in 1..=8usize {
            let seq = sequentialize(&uniform_chain(k)).unwrap();
            let p = partition_balanced(&seq, k).unwrap();
            let mut cfg = ScheduleConfig::new(k, m, m);
            cfg.backward_cost_ratio = 1.0;
            let (timeline, _) = simulate_gpipe(&p, &cfg).unwrap();

            let fill = (k + m - 1) as f64;
            let fwd_span = phase_horizon(&timeline, Phase::Forward);
            assert_eq!(fwd_span, fill, "k={k} m={m} forward span");
            let bwd_events: Vec<f64> = timeline
                .events
                .iter()
                .filter(|e| e.phase == Phase::Backward)
                .flat_map(|e| [e.start, e.end])
                .collect();
            let bwd_span = bwd_events.iter().cloned().fold(0.0, f64::max)
                - bwd_events.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(bwd_span, fill, "k={k} m={m} backward span");

            let expected_util = m as f64 / (m + k - 1) as f64;
            assert_eq!(
                phase_utilization(&timeline, Phase::Forward, k),
                expected_util,
                "k={k} m={m} forward utilization"
            );
            assert_eq!(
                phase_utilization(&timeline, Phase::Backward, k),
                expected_util,
                "k={k} m={m} backward utilization"
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("[criterion 2] PASS horizon == K+M-1 and utilization == M/(M+K-1) on the 8x8 grid ({elapsed:?})");
}

#[test]
fn criterion_3_memory_formula_exact() {
    for l in [8usize, 16, 32] {
        for k in [1usize, 2, 4] {
            let seq = sequentialize(&uniform_chain(l)).unwrap();
            let per = l / k;
            let boundaries: Vec<usize> = (1..k).map(|j| 1 + j * per).collect();
            let p = partition_fixed(&seq, &boundaries).unwrap();
            for m in [1usize, 2, 4, 8] {
                for n in [8usize, 16] {
                    let cfg = ScheduleConfig::new(k, m, n);
                    let peak = estimate_memory(&p, &cfg);
                    let expected = (n + per * (n / m)) as u64;
                    assert!(
                        peak.iter().all(|&d| d == expected),
                        "L={l} K={k} M={m} N={n}: {peak:?} != {expected}"
                    );
                }
            }
        }
    }
    println!("[criterion 3] PASS per-device peak == N + (L/K)(N/M) over the full grid");
}

#[test]
fn criterion_4_gradient_accumulation_equivalence() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let draws = 100;
    for seed in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_small_config(&mut rng);
        let graph = build_unet(&cfg).unwrap();
        let seq = sequentialize(&graph).unwrap();
        let k = rng.random_range(1..=4usize);
        let partition = partition_balanced(&seq, k).unwrap();
        let n = [2usize, 4, 8][rng.random_range(0..3)];
        let divisors: Vec<usize> = (1..=n).filter(|d| n.is_multiple_of(*d)).collect();
        let m = divisors[rng.random_range(0..divisors.len())];

        let shape = item_shape(&cfg);
        let (params, input, loss) = model_io(&mut rng, &graph, &shape, n, ParamInit::Symmetric);
        let (serial_out, _) = forward_serial(&graph, &params, &input).unwrap();
        let serial_grads = backward_serial(&graph, &params, &input, &loss).unwrap();

        let mut sched = ScheduleConfig::new(k, m, n);
        sched.backward_cost_ratio = 2.0;
        let mode = if seed % 2 == 0 { ExecMode::Threaded } else { ExecMode::SingleThread };
        let run = run_pipeline(&seq, &partition, &params, &input, &loss, &sched, mode).unwrap();

        assert_eq!(run.output, serial_out, "seed {seed}: outputs differ");
        check_gpipe_timeline(&run.timeline, k, true).expect("observed schedule is valid");
        let rel = run.grads.max_rel_diff(&serial_grads);
        assert!(rel < 1e-9, "seed {seed}: max_rel_err {rel}");
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!("[criterion 4] PASS {draws} draws, outputs bit-identical, worst grad rel err {worst:.3e} ({elapsed:?})");
}

#[test]
fn criterion_5_sequentialization_preserves_forward() {
    let mut checked = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cfg = random_small_config(&mut rng);
        let graph = build_unet(&cfg).unwrap();
        let seq: SequentialModel = sequentialize(&graph).unwrap();
        seq.check_chain().expect("chain property");

        let shape = item_shape(&cfg);
        let batch = rng.random_range(1..=4usize);
        let (params, input, _) = model_io(&mut rng, &graph, &shape, batch, ParamInit::Symmetric);
        let (raw_out, _) = forward_serial(&graph, &params, &input).unwrap();
        let chain_out = forward_serial_chain(&seq, &params, &input).unwrap();
        assert_eq!(raw_out, chain_out, "seed {seed}: chain execution diverged");
        checked += 1;
    }
    println!("[criterion 5] PASS {checked} random configs, outputs bit-identical, chain property holds");
}

#[test]
fn criterion_6_partitioner_optimality_and_monotonicity() {
    fn brute_force(w: &[f64], stages: usize) -> f64 {
        fn rec(w: &[f64], start: usize, stages: usize, best: &mut f64, cur: f64) {
            if stages == 1 {
                let rest: f64 = w[start..].iter().sum();
                *best = best.min(cur.max(rest));
                return;
            }
            let mut sum = 0.0;
            for end in start + 1..=w.len() - (stages - 1) {
                sum += w[end - 1];
                rec(w, end, stages - 1, best, cur.max(sum));
            }
        }
        let mut best = f64::INFINITY;
        rec(w, 0, stages, &mut best, 0.0);
        best
    }

    /// Synthetic chain whose every cell carries one weight.
    fn chain_of(costs: &[f64]) -> SequentialModel {
        let mut layers = vec![LayerSpec {
            id: 0,
            name: "in".into(),
            kind: LayerKind::Source,
            compute_cost: costs[0],
            param_count: 0,
            activation_elems: 1,
            inputs: vec![],
        }];
        for (i, &c) in costs.iter().enumerate().skip(1) {
            let last = i == costs.len() - 1;
            layers.push(LayerSpec {
                id: i,
                name: format!("l{i}"),
                kind: if last { LayerKind::Sink } else { LayerKind::Relu },
                compute_cost: c,
                param_count: 0,
                activation_elems: 1,
                inputs: vec![i - 1],
            });
        }
        let out = costs.len() - 2;
        sequentialize(&ModelGraph { layers, output_id: out }).unwrap()
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 200;
    for _ in 0..draws {
        let cells = rng.random_range(2..=12usize);
        let costs: Vec<f64> = (0..cells).map(|_| rng.random_range(0..50u32) as f64).collect();
        let seq = chain_of(&costs);
        let k_max = 4.min(cells);
        let mut prev = f64::INFINITY;
        for k in 1..=k_max {
            let p = partition_balanced(&seq, k).unwrap();
            let expected = brute_force(&costs, k);
            assert_eq!(p.bottleneck_cost(), expected, "costs {costs:?} k {k}");
            assert!(p.bottleneck_cost() <= prev, "monotonicity violated at k={k}");
            prev = p.bottleneck_cost();
        }
    }
    println!("[criterion 6] PASS {draws} random cost vectors, DP == brute force, bottleneck non-increasing in k");
}

#[test]
fn criterion_7_width_scaling() {
    let g32 = build_unet(&UNetConfig::default()).unwrap();
    let g64 = build_unet(&UNetConfig { base_filters: 64, ..UNetConfig::default() }).unwrap();
    let g128 = build_unet(&UNetConfig { base_filters: 128, ..UNetConfig::default() }).unwrap();

    // Every convolution-like layer whose input width scales with the base
    // quadruples exactly; the stem bridges the fixed image channels and can
    // only double.
    let (mut sum32, mut sum64) = (0u64, 0u64);
    for (a, b) in g32.layers.iter().zip(&g64.layers) {
        if a.kind != LayerKind::Affine {
            continue;
        }
        if a.name == "e1.affine0" {
            assert_eq!(b.param_count, 2 * a.param_count, "stem scales with one dimension");
            continue;
        }
        assert_eq!(b.param_count, 4 * a.param_count, "layer {}", a.name);
        sum32 += a.param_count;
        sum64 += b.param_count;
    }
    assert_eq!(sum64, 4 * sum32, "non-stem affine total scales exactly 4x");

    let totals: Vec<u64> = [&g32, &g64, &g128]
        .iter()
        .map(|g| unetpipe::graph::total_cost(g).params)
        .collect();
    assert_eq!(totals, vec![1_395_744, 5_582_912, 22_331_520], "frozen family sizes");
    let ratio = totals[1] as f64 / totals[0] as f64;
    assert!((ratio - 4.0).abs() < 1e-3, "total ratio {ratio}");
    println!(
        "[criterion 7] PASS interior affines x4 exactly; totals {:?} (ratio {:.5})",
        totals, ratio
    );
}

#[test]
fn criterion_8_curriculum() {
    // The default schedule, verbatim.
    let plan = default_plan((192, 192, 192));
    let summary: Vec<_> = plan
        .stages
        .iter()
        .map(|s| (s.patch_size, s.batch_size, s.epochs, s.learning_rate, s.optimizer.as_str()))
        .collect();
    assert_eq!(
        summary,
        vec![
            ((64, 64, 64), 16, 4800, 1e-3, "rmsprop"),
            ((128, 128, 128), 4, 1200, 1e-3, "rmsprop"),
            ((192, 192, 192), 1, 300, 1e-3, "rmsprop"),
        ]
    );
    assert_eq!(plan.stages[0].sampling, Sampling::PositiveBiased);
    assert_eq!(plan.stages[2].sampling, Sampling::WholeImage);
    assert!(plan.is_monotonic());

    // Positive guarantee over 1000 draws on toy volumes with foreground.
    let mut labels = Tensor::zeros(vec![16, 16, 16]);
    for x in 5..9 {
        for y in 2..6 {
            for z in 11..15 {
                labels.data[(x * 16 + y) * 16 + z] = 1.0;
            }
        }
    }
    for seed in 0..1000u64 {
        let s = sample_positive_patch(&labels, &labels, (4, 4, 4), seed).unwrap();
        assert!(s.positive && s.labels.data.iter().any(|&v| v > 0.0), "seed {seed}");
    }

    // Monotone imbalance, exhaustively: an 8-cubed blob in a 32-cubed
    // volume, expected fraction non-increasing in patch size.
    let mut blob = Tensor::zeros(vec![32, 32, 32]);
    for x in 9..17 {
        for y in 14..22 {
            for z in 6..14 {
                blob.data[(x * 32 + y) * 32 + z] = 1.0;
            }
        }
    }
    let mut prev = f64::INFINITY;
    let mut fractions = Vec::new();
    for size in [4usize, 8, 12, 16, 24, 32] {
        let f = exact_expected_fraction(&blob, (size, size, size)).unwrap();
        assert!(f <= prev + 1e-12, "fraction grew at patch {size}");
        prev = f;
        fractions.push(f);
    }
    println!("[criterion 8] PASS plan verbatim, 1000 positive draws, fractions {fractions:?} non-increasing");
}

#[test]
fn criterion_9_finite_difference_hygiene() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let cfg = UNetConfig {
            base_filters: rng.random_range(1..=2u64),
            encoder_blocks: 2,
            input_shape: (1, 4, 4, 4),
            ..UNetConfig::default()
        };
        let graph = build_unet(&cfg).unwrap();
        let shape = item_shape(&cfg);
        // Positive weights and inputs keep every relu in its linear region.
        let (params, input, loss) = model_io(&mut rng, &graph, &shape, 2, ParamInit::Positive);
        let err = check_grad_finite_difference(&graph, &params, &input, &loss, 1e-5).unwrap();
        assert!(err < 1e-6, "seed {seed}: fd error {err}");
        worst = worst.max(err);
    }
    println!("[criterion 9] PASS 50 seeds, worst fd relative error {worst:.3e}");
}
