//! Command-line front end: reproducible workflows over the library, one
//! subcommand per pipeline step. Every command that writes an artifact also
//! writes a `<out>.manifest` with input/output digests; all randomness
//! flows from the `--seed` flag.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chain::{sequentialize, SequentialModel};
use crate::curriculum::default_plan;
use crate::exec::{
    backward_serial, forward_serial, init_params, run_pipeline, ExecMode, LossSpec, ParamInit,
    Tensor,
};
use crate::formats::{self, FormatError, Scenario};
use crate::graph::{total_cost, validate_graph, ModelGraph};
use crate::manifest::RunManifest;
use crate::partition::{partition_balanced_by, partition_fixed, Objective, Partition};
use crate::sim::{
    check_gpipe_timeline, simulate_dependency_schedule, simulate_gpipe, steady_state_throughput,
    PipelineMetrics, ScheduleConfig, Timeline, Workload,
};
use crate::unet::build_unet;

/// Exit codes: 0 success, 1 validation failure, 2 I/O failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> CliError {
        match e {
            FormatError::Io { .. } => CliError::Io(e.to_string()),
            FormatError::Parse { .. } => CliError::Validation(e.to_string()),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Machine,
}

#[derive(Debug, Parser)]
#[command(name = "unetpipe", version, about = "plan, simulate, and verify pipeline-parallel U-Net training")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a model graph from a model spec file.
    Build(BuildArgs),
    /// Rewrite a graph into a sequential chain with pass-through slots.
    Transform(TransformArgs),
    /// Split a chain into balanced contiguous stages.
    Partition(PartitionArgs),
    /// Simulate a schedule scenario and export the timeline.
    Simulate(SimulateArgs),
    /// Prove pipelined gradients match serial execution on a random model.
    Verify(VerifyArgs),
    /// Emit the patch-size curriculum plan for a volume shape.
    Plan(PlanArgs),
    /// Consolidated comparison table over scenarios.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// Model spec file (key = value lines).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TransformArgs {
    /// Graph file produced by `build`.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    /// Chain file produced by `transform`.
    #[arg(long)]
    chain: PathBuf,
    /// Stage count (devices).
    #[arg(long)]
    k: usize,
    /// Balance objective.
    #[arg(long, value_enum, default_value = "compute")]
    objective: ObjectiveArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Compute,
    Params,
    Activations,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Objective {
        match o {
            ObjectiveArg::Compute => Objective::Compute,
            ObjectiveArg::Params => Objective::Params,
            ObjectiveArg::Activations => Objective::Activations,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario file; flags below override its fields.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    micro_batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    backward_ratio: Option<f64>,
    #[arg(long, overrides_with = "no_barrier")]
    barrier: bool,
    #[arg(long, overrides_with = "barrier")]
    no_barrier: bool,
    #[arg(long)]
    repeat: Option<usize>,
    /// Timeline output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Model spec; built and transformed internally.
    #[arg(long, conflicts_with = "chain")]
    spec: Option<PathBuf>,
    /// Chain file; needs --shape for the input tensor layout.
    #[arg(long, requires = "shape")]
    chain: Option<PathBuf>,
    /// Per-item input shape `channels,x,y,z` when running from a chain file.
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    /// Fixed partition report; defaults to a balanced split over --k.
    #[arg(long)]
    partition: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    micro_batches: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Whole-image shape `x,y,z`.
    #[arg(long, value_delimiter = ',')]
    shape: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Scenario files to compare.
    #[arg(long = "scenario", required = true)]
    scenarios: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: OutputFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let _ = e.print();
            return if e.use_stderr() { EXIT_IO } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Transform(a) => cmd_transform(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Writes the primary artifact and its manifest, or prints to stdout when
/// no output path was given.
fn deliver(
    out: &Option<PathBuf>,
    contents: &str,
    mut manifest: RunManifest,
) -> Result<(), CliError> {
    match out {
        Some(path) => {
            formats::write_string(path, contents)?;
            manifest.record_output(path, contents);
            let manifest_path = manifest_path_for(path);
            formats::write_string(&manifest_path, &manifest.emit())?;
        }
        None => {
            print!("{contents}");
        }
    }
    Ok(())
}

/// Writes the artifact and manifest only when an output path was given;
/// the caller has already printed to stdout.
fn deliver_file(
    out: &Option<PathBuf>,
    contents: &str,
    mut manifest: RunManifest,
) -> Result<(), CliError> {
    if let Some(path) = out {
        formats::write_string(path, contents)?;
        manifest.record_output(path, contents);
        formats::write_string(&manifest_path_for(path), &manifest.emit())?;
    }
    Ok(())
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    out.with_file_name(name)
}

fn cmd_build(a: BuildArgs) -> Result<(), CliError> {
    let text = formats::read_to_string(&a.spec)?;
    let cfg = formats::parse_model_spec(&text)?;
    let graph = build_unet(&cfg).map_err(invalid)?;
    let report = validate_graph(&graph);
    if !report.is_empty() {
        return Err(CliError::Validation(format!("built graph fails validation:\n{report}")));
    }
    let mut manifest = RunManifest::new("build", 0);
    manifest.record_input(&a.spec, &text);
    let totals = total_cost(&graph);
    eprintln!(
        "built graph: {} layers, compute {}, params {}, activations {}",
        graph.layers.len(),
        totals.compute,
        totals.params,
        totals.activations
    );
    deliver(&a.out, &formats::emit_graph(&graph), manifest)
}

fn cmd_transform(a: TransformArgs) -> Result<(), CliError> {
    let text = formats::read_to_string(&a.graph)?;
    let graph = formats::parse_graph(&text)?;
    let seq = sequentialize(&graph).map_err(invalid)?;
    seq.check_chain().map_err(invalid)?;
    let mut manifest = RunManifest::new("transform", 0);
    manifest.record_input(&a.graph, &text);
    eprintln!(
        "chain: {} cells, {} pass-through slots, {} forwarded elements per item",
        seq.cells.len(),
        seq.slot_sizes.len(),
        crate::chain::passthrough_memory_overhead(&seq)
    );
    deliver(&a.out, &formats::emit_chain(&seq), manifest)
}

fn cmd_partition(a: PartitionArgs) -> Result<(), CliError> {
    let text = formats::read_to_string(&a.chain)?;
    let seq = formats::parse_chain(&text)?;
    let p = partition_balanced_by(&seq, a.k, a.objective.into()).map_err(invalid)?;
    let mut manifest = RunManifest::new("partition", 0);
    manifest.record_input(&a.chain, &text);
    eprintln!("partition: {} stages, bottleneck {}", p.stages(), p.bottleneck_cost());
    deliver(&a.out, &formats::emit_partition(&p), manifest)
}

struct LoadedScenario {
    scenario: Scenario,
    graph: ModelGraph,
    pipelined: Option<(SequentialModel, Partition)>,
    cfg: ScheduleConfig,
}

fn load_scenario(path: &Path, manifest: &mut RunManifest) -> Result<LoadedScenario, CliError> {
    let text = formats::read_to_string(path)?;
    manifest.record_input(path, &text);
    let scenario = formats::parse_scenario(&text)?;
    let model_path = scenario.resolve_model(path);
    let model_text = formats::read_to_string(&model_path)?;
    manifest.record_input(&model_path, &model_text);
    let graph = formats::parse_graph(&model_text)?;
    let report = validate_graph(&graph);
    if !report.is_empty() {
        return Err(CliError::Validation(format!("scenario model invalid:\n{report}")));
    }
    let cfg = scenario.schedule_config();
    let pipelined = if scenario.placement.is_none() {
        let seq = sequentialize(&graph).map_err(invalid)?;
        let p = partition_balanced_by(&seq, scenario.devices, Objective::Compute)
            .map_err(invalid)?;
        Some((seq, p))
    } else {
        None
    };
    Ok(LoadedScenario { scenario, graph, pipelined, cfg })
}

fn run_scenario(loaded: &LoadedScenario) -> Result<(Timeline, PipelineMetrics, Option<f64>), CliError> {
    let (timeline, metrics) = match (&loaded.scenario.placement, &loaded.pipelined) {
        (Some(placement), _) => {
            simulate_dependency_schedule(&loaded.graph, placement, &loaded.cfg).map_err(invalid)?
        }
        (None, Some((_, p))) => simulate_gpipe(p, &loaded.cfg).map_err(invalid)?,
        (None, None) => unreachable!("pipelined scenario always has a partition"),
    };
    let steady_needed = (2 * loaded.cfg.devices + 1).max(8);
    let steady = if loaded.cfg.repeat_batches >= steady_needed {
        let workload = match (&loaded.scenario.placement, &loaded.pipelined) {
            (Some(placement), _) => Workload::Raw { graph: &loaded.graph, placement },
            (None, Some((_, p))) => Workload::Pipelined { partition: p },
            (None, None) => unreachable!(),
        };
        Some(steady_state_throughput(workload, &loaded.cfg).map_err(invalid)?)
    } else {
        None
    };
    Ok((timeline, metrics, steady))
}

fn apply_overrides(a: &SimulateArgs, sc: &mut Scenario) {
    if let Some(k) = a.k {
        sc.devices = k;
    }
    if let Some(m) = a.micro_batches {
        sc.micro_batches = m;
    }
    if let Some(n) = a.batch_size {
        sc.batch_size = n;
    }
    if let Some(r) = a.backward_ratio {
        sc.backward_ratio = r;
    }
    if a.barrier {
        sc.barrier = true;
    }
    if a.no_barrier {
        sc.barrier = false;
    }
    if let Some(r) = a.repeat {
        sc.repeat = r;
    }
}

fn metrics_lines(metrics: &PipelineMetrics, steady: Option<f64>, format: OutputFormat) -> String {
    let mut s = String::new();
    match format {
        OutputFormat::Table => {
            let _ = writeln!(s, "makespan        {:.6}", metrics.makespan);
            let _ = writeln!(s, "throughput      {:.6}", metrics.throughput);
            let _ = writeln!(s, "utilization     {:.6}", metrics.utilization);
            let _ = writeln!(s, "bubble          {:.6}", metrics.bubble_fraction);
            if let Some(t) = steady {
                let _ = writeln!(s, "steady          {t:.6}");
            }
            let _ = writeln!(s, "peak memory     {:?}", metrics.per_device_peak_memory);
        }
        OutputFormat::Machine => {
            let _ = writeln!(s, "makespan {}", metrics.makespan);
            let _ = writeln!(s, "throughput {}", metrics.throughput);
            let _ = writeln!(s, "utilization {}", metrics.utilization);
            let _ = writeln!(s, "bubble {}", metrics.bubble_fraction);
            if let Some(t) = steady {
                let _ = writeln!(s, "steady {t}");
            }
            let _ = write!(s, "peak_memory");
            for m in &metrics.per_device_peak_memory {
                let _ = write!(s, " {m}");
            }
            let _ = writeln!(s);
        }
    }
    s
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("simulate", 0);
    let mut loaded = load_scenario(&a.scenario, &mut manifest)?;
    apply_overrides(&a, &mut loaded.scenario);
    loaded.cfg = loaded.scenario.schedule_config();
    if loaded.scenario.placement.is_none() {
        // Re-balance if the device count changed.
        let seq = sequentialize(&loaded.graph).map_err(invalid)?;
        let p = partition_balanced_by(&seq, loaded.scenario.devices, Objective::Compute)
            .map_err(invalid)?;
        loaded.pipelined = Some((seq, p));
    }
    let (timeline, metrics, steady) = run_scenario(&loaded)?;
    print!("{}", metrics_lines(&metrics, steady, a.format));
    deliver(&a.out, &formats::emit_timeline(&timeline), manifest)
}

fn cmd_verify(a: VerifyArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("verify", a.seed);
    let (seq, item_shape) = match (&a.spec, &a.chain) {
        (Some(spec_path), None) => {
            let text = formats::read_to_string(spec_path)?;
            manifest.record_input(spec_path, &text);
            let cfg = formats::parse_model_spec(&text)?;
            let graph = build_unet(&cfg).map_err(invalid)?;
            let (c, x, y, z) = cfg.input_shape;
            let shape = vec![c as usize, x as usize, y as usize, z as usize];
            (sequentialize(&graph).map_err(invalid)?, shape)
        }
        (None, Some(chain_path)) => {
            let text = formats::read_to_string(chain_path)?;
            manifest.record_input(chain_path, &text);
            let seq = formats::parse_chain(&text)?;
            let shape = a.shape.clone().expect("clap enforces --shape with --chain");
            (seq, shape)
        }
        _ => {
            return Err(CliError::Validation(
                "verify needs exactly one of --spec or --chain".into(),
            ))
        }
    };

    let partition = match &a.partition {
        Some(p) => {
            let text = formats::read_to_string(p)?;
            manifest.record_input(p, &text);
            let parsed = formats::parse_partition(&text)?;
            // Recompute aggregates against this chain to keep them honest.
            partition_fixed(&seq, &parsed.boundaries).map_err(invalid)?
        }
        None => partition_balanced_by(&seq, a.k, Objective::Compute).map_err(invalid)?,
    };

    let mut cfg = ScheduleConfig::new(partition.stages(), a.micro_batches, a.batch_size);
    cfg.backward_cost_ratio = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let params =
        init_params(&seq.graph, &item_shape, &mut rng, ParamInit::Symmetric).map_err(invalid)?;
    let mut input_shape = vec![a.batch_size];
    input_shape.extend_from_slice(&item_shape);
    let input = random_tensor(&mut rng, input_shape);
    let shapes = crate::exec::infer_shapes(&seq.graph, &item_shape).map_err(invalid)?;
    let mut target_shape = vec![a.batch_size];
    target_shape.extend_from_slice(&shapes[seq.graph.output_id]);
    let loss = LossSpec { target: random_tensor(&mut rng, target_shape) };

    let serial_out = forward_serial(&seq.graph, &params, &input).map_err(invalid)?.0;
    let serial_grads = backward_serial(&seq.graph, &params, &input, &loss).map_err(invalid)?;
    let threaded = run_pipeline(&seq, &partition, &params, &input, &loss, &cfg, ExecMode::Threaded)
        .map_err(invalid)?;
    let reference =
        run_pipeline(&seq, &partition, &params, &input, &loss, &cfg, ExecMode::SingleThread)
            .map_err(invalid)?;

    let outputs_identical = threaded.output == serial_out;
    let modes_identical =
        threaded.output == reference.output && threaded.grads == reference.grads;
    let max_rel = threaded.grads.max_rel_diff(&serial_grads);
    let schedule_ok =
        check_gpipe_timeline(&threaded.timeline, partition.stages(), true).is_ok();

    const TOL: f64 = 1e-9;
    let pass = outputs_identical && modes_identical && schedule_ok && max_rel < TOL;
    let mut report = String::new();
    match a.format {
        OutputFormat::Table => {
            let _ = writeln!(report, "outputs bit-identical   {outputs_identical}");
            let _ = writeln!(report, "modes bit-identical     {modes_identical}");
            let _ = writeln!(report, "schedule valid          {schedule_ok}");
            let _ = writeln!(report, "grad max_rel_err        {max_rel:.3e}");
            let _ = writeln!(
                report,
                "{} max_rel_err < {TOL:.0e}",
                if pass { "PASS" } else { "FAIL" }
            );
        }
        OutputFormat::Machine => {
            let _ = writeln!(report, "outputs_identical {outputs_identical}");
            let _ = writeln!(report, "modes_identical {modes_identical}");
            let _ = writeln!(report, "schedule_valid {schedule_ok}");
            let _ = writeln!(report, "max_rel_err {max_rel}");
            let _ = writeln!(report, "verdict {}", if pass { "PASS" } else { "FAIL" });
        }
    }
    print!("{report}");
    deliver_file(&a.out, &report, manifest)?;
    if !pass {
        return Err(CliError::Validation("gradient equivalence check failed".into()));
    }
    Ok(())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn cmd_plan(a: PlanArgs) -> Result<(), CliError> {
    if a.shape.len() != 3 || a.shape.contains(&0) {
        return Err(CliError::Validation("--shape needs three positive extents x,y,z".into()));
    }
    let plan = default_plan((a.shape[0], a.shape[1], a.shape[2]));
    let manifest = RunManifest::new("plan", 0);
    deliver(&a.out, &formats::emit_plan(&plan), manifest)
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("report", 0);
    let mut rows: Vec<(String, usize, f64, f64, f64, f64, u64)> = Vec::new();
    for path in &a.scenarios {
        let loaded = load_scenario(path, &mut manifest)?;
        let (_, metrics, steady) = run_scenario(&loaded)?;
        let bottleneck = match &loaded.pipelined {
            Some((_, p)) => p.bottleneck_cost(),
            None => {
                // heaviest per-device load under the placement
                let placement = loaded.scenario.placement.as_ref().unwrap();
                let mut load = vec![0.0; loaded.scenario.devices];
                for l in &loaded.graph.layers {
                    load[placement[l.id]] += l.compute_cost;
                }
                load.into_iter().fold(0.0, f64::max)
            }
        };
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push((
            name,
            loaded.scenario.devices,
            steady.unwrap_or(metrics.throughput),
            metrics.utilization,
            metrics.bubble_fraction,
            bottleneck,
            metrics.per_device_peak_memory.iter().copied().max().unwrap_or(0),
        ));
    }

    let mut out = String::new();
    match a.format {
        OutputFormat::Table => {
            let _ = writeln!(
                out,
                "{:<24} {:>7} {:>12} {:>12} {:>8} {:>12} {:>14}",
                "scenario", "devices", "throughput", "utilization", "bubble", "bottleneck", "peak memory"
            );
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{:<24} {:>7} {:>12.4} {:>12.4} {:>8.4} {:>12.4} {:>14}",
                    r.0, r.1, r.2, r.3, r.4, r.5, r.6
                );
            }
        }
        OutputFormat::Machine => {
            for r in &rows {
                let _ = writeln!(
                    out,
                    "scenario {} devices {} throughput {} utilization {} bubble {} bottleneck {} peak_memory {}",
                    r.0, r.1, r.2, r.3, r.4, r.5, r.6
                );
            }
        }
    }
    print!("{out}");
    deliver_file(&a.out, &out, manifest)
}
