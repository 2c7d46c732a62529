//! `layoutflow`: train, sample, evaluate and render layout generators.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use layoutflow::checkpoint::{Checkpoint, Head};
use layoutflow::conditioning::{
    build_mask, completion_mask_for, refinement_mask_from_noisy, ConditionMask, TaskKind,
};
use layoutflow::data::{
    generate_synthetic_dataset, layout_to_vector, load_dataset, save_dataset, vector_to_layout,
    CategorySet, Dataset, Element, Layout, SyntheticConfig,
};
use layoutflow::diffusion::{
    DiffusionSampleConfig, DiffusionSampler, NoiseSchedule, DIFFUSION_T_TRAIN,
};
use layoutflow::flow::TrajectoryKind;
use layoutflow::metrics::evaluate_set;
use layoutflow::model::{ModelConfig, VectorFieldModel};
use layoutflow::optimizer::{AdamState, AdamWConfig};
use layoutflow::prior::PriorKind;
use layoutflow::render::{render_svg, render_trace_svg, RenderStyle};
use layoutflow::sampler::{SampleConfig, Sampler, SolverKind};
use layoutflow::scalar::Scalar;
use layoutflow::trainer::{train, TrainConfig, TrainIo};

#[derive(Parser)]
#[command(name = "layoutflow", version, about = "Layout generation by flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lattice dataset
    Synth(SynthArgs),
    /// Train a model on a dataset file
    Train(TrainArgs),
    /// Draw layouts from a trained checkpoint
    Sample(SampleArgs),
    /// Compare a generated layout set against a reference set
    Eval(EvalArgs),
    /// Render layouts from a dataset file as SVG
    Render(RenderArgs),
    /// Visualize one sampling trajectory as SVG
    Trace(TraceArgs),
    /// Sweep solver/step settings and tabulate sample quality
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrajectoryArg {
    Linear,
    Sincos,
    Sine,
}

impl From<TrajectoryArg> for TrajectoryKind {
    fn from(a: TrajectoryArg) -> Self {
        match a {
            TrajectoryArg::Linear => TrajectoryKind::Linear,
            TrajectoryArg::Sincos => TrajectoryKind::SineCosine,
            TrajectoryArg::Sine => TrajectoryKind::Sine,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PriorArg {
    Gaussian,
    Uniform,
    Mixture,
}

impl From<PriorArg> for PriorKind {
    fn from(a: PriorArg) -> Self {
        match a {
            PriorArg::Gaussian => PriorKind::Gaussian,
            PriorArg::Uniform => PriorKind::Uniform,
            PriorArg::Mixture => PriorKind::Mixture,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    Flow,
    Diffusion,
}

impl From<HeadArg> for Head {
    fn from(a: HeadArg) -> Self {
        match a {
            HeadArg::Flow => Head::Flow,
            HeadArg::Diffusion => Head::Diffusion,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverArg {
    Euler,
    Heun,
}

impl From<SolverArg> for SolverKind {
    fn from(a: SolverArg) -> Self {
        match a {
            SolverArg::Euler => SolverKind::Euler,
            SolverArg::Heun => SolverKind::Heun,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    /// 2 layers, width 64: trains in minutes on a laptop core
    Desk,
    /// 4 layers, width 512
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset file (JSON)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    layouts: usize,
    #[arg(long, default_value_t = 4)]
    categories: usize,
    /// Maximum elements per layout
    #[arg(long, default_value_t = 8)]
    nmax: usize,
    /// Lattice resolution (boxes snap to a grid x grid lattice)
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file (JSON)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write (and resume from with --resume)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Weight of the geometry L1 loss term
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TrajectoryArg::Linear)]
    trajectory: TrajectoryArg,
    #[arg(long, value_enum, default_value_t = PriorArg::Gaussian)]
    prior: PriorArg,
    #[arg(long, value_enum, default_value_t = HeadArg::Flow)]
    head: HeadArg,
    /// Include the refinement task in the training mix
    #[arg(long)]
    train_refinement: bool,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// Element capacity (default: largest layout in the dataset)
    #[arg(long)]
    nmax: Option<usize>,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// JSONL training log file
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    log_every: u64,
    /// Run a sampling evaluation every N steps (0 = never)
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    #[arg(long, default_value_t = 64)]
    eval_samples: usize,
    /// Rewrite the checkpoint every N steps (0 = only at the end)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from the checkpoint at --out if it exists
    #[arg(long)]
    resume: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint file
    #[arg(long)]
    model: PathBuf,
    /// Output layout set (dataset JSON format)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Integration / denoising steps
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// ODE solver (flow head only)
    #[arg(long, value_enum, default_value_t = SolverArg::Euler)]
    solver: SolverArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Condition file (JSON: task, layout, retain)
    #[arg(long)]
    condition: Option<PathBuf>,
    /// Condition through field replacement instead of mask input
    #[arg(long)]
    trajectory_conditioning: bool,
    /// Stochasticity for the diffusion head (1 = ancestral, 0 = DDIM)
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Generated layout set (dataset JSON format)
    #[arg(long)]
    generated: PathBuf,
    /// Reference layout set (dataset JSON format)
    #[arg(long)]
    reference: PathBuf,
    /// Report file (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Element capacity for feature extraction (default: observed max)
    #[arg(long)]
    nmax: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    /// Layout set to render (dataset JSON format)
    #[arg(long)]
    layouts: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 512.0)]
    width: f64,
    #[arg(long, default_value_t = 512.0)]
    height: f64,
    #[arg(long)]
    no_labels: bool,
    /// Render only the layout at this index
    #[arg(long)]
    index: Option<usize>,
    /// Render at most this many layouts
    #[arg(long, default_value_t = 64)]
    limit: usize,
}

#[derive(Args)]
struct TraceArgs {
    /// Checkpoint file (flow head)
    #[arg(long)]
    model: PathBuf,
    /// Output SVG
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = SolverArg::Euler)]
    solver: SolverArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-step movement stats and straightness as JSON
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    condition: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Checkpoint file
    #[arg(long)]
    model: PathBuf,
    /// Reference dataset for the distribution metrics
    #[arg(long)]
    data: PathBuf,
    /// Samples per configuration
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Step counts to sweep
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 5, 10, 25, 50, 100])]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Markdown table output (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Condition file: which task to run and the layout it conditions on.
/// `layout` lists elements in the unit square; for `gen-type` only the
/// categories matter, for `gen-typesize` categories plus `w`/`h`, for
/// `completion` the whole elements (with `retain` naming the kept slot
/// indices), and for `refinement` the coarse layout to polish. An
/// `un-gen` spec with a layout fixes only the element count.
#[derive(Deserialize)]
struct ConditionSpec {
    task: TaskKind,
    #[serde(default)]
    layout: Option<Vec<Element>>,
    #[serde(default)]
    retain: Option<Vec<usize>>,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn run() -> Result<()> {
    if let Ok(threads) = std::env::var("LAYOUTFLOW_THREADS") {
        let n: usize = threads
            .parse()
            .with_context(|| format!("LAYOUTFLOW_THREADS={threads} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("rayon thread pool already initialized")?;
    }
    match Cli::parse().command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => match args.precision {
            PrecisionArg::F32 => cmd_train::<f32>(args),
            PrecisionArg::F64 => cmd_train::<f64>(args),
        },
        Command::Sample(args) => match args.precision {
            PrecisionArg::F32 => cmd_sample::<f32>(args),
            PrecisionArg::F64 => cmd_sample::<f64>(args),
        },
        Command::Eval(args) => cmd_eval(args),
        Command::Render(args) => cmd_render(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let dataset = generate_synthetic_dataset(&SyntheticConfig {
        num_layouts: args.layouts,
        num_categories: args.categories,
        nmax: args.nmax,
        grid: args.grid,
        seed: args.seed,
    })?;
    save_dataset(&dataset, &args.out)?;
    eprintln!(
        "wrote {} layouts ({} categories, up to {} elements) to {}",
        dataset.len(),
        dataset.categories().len(),
        dataset.max_elements(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train<S: Scalar>(args: TrainArgs) -> Result<()> {
    let loaded = load_dataset(&args.data, args.nmax.unwrap_or(usize::MAX))?;
    if loaded.skipped > 0 {
        eprintln!("skipped {} unusable layouts in {}", loaded.skipped, args.data.display());
    }
    let dataset = loaded.dataset;

    let resume_from = if args.resume && args.out.exists() {
        Some(Checkpoint::load(&args.out)?)
    } else {
        None
    };

    let (mut model, mut opt, cfg) = match resume_from {
        Some(ckpt) => {
            if ckpt.category_set()?.names() != dataset.categories().names() {
                bail!(
                    "checkpoint categories {:?} do not match the dataset",
                    ckpt.categories
                );
            }
            let model: VectorFieldModel<S> = ckpt.to_model()?;
            let opt = ckpt
                .optimizer_state()?
                .unwrap_or_else(|| AdamState::new(&model.config));
            let cfg = TrainConfig {
                steps: args.steps,
                batch_size: args.batch_size,
                lambda: args.lambda,
                seed: args.seed,
                trajectory: ckpt.trajectory,
                prior: ckpt.prior,
                head: ckpt.head,
                train_refinement: args.train_refinement,
                optimizer: AdamWConfig {
                    lr: args.lr,
                    weight_decay: args.weight_decay,
                    ..AdamWConfig::default()
                },
                log_every: args.log_every,
                eval_every: args.eval_every,
                eval_samples: args.eval_samples,
            };
            eprintln!(
                "resuming from step {} (head {}, prior {}, trajectory {})",
                opt.step,
                ckpt.head.name(),
                ckpt.prior.name(),
                ckpt.trajectory.name()
            );
            (model, opt, cfg)
        }
        None => {
            let nmax = args.nmax.unwrap_or(dataset.max_elements());
            let bits = dataset.categories().bits();
            let model_cfg = match args.preset {
                PresetArg::Desk => ModelConfig::desk(nmax, bits),
                PresetArg::Full => ModelConfig::full(nmax, bits),
            };
            let model = VectorFieldModel::<S>::new(model_cfg, args.seed)?;
            let opt = AdamState::new(&model.config);
            let cfg = TrainConfig {
                steps: args.steps,
                batch_size: args.batch_size,
                lambda: args.lambda,
                seed: args.seed,
                trajectory: args.trajectory.into(),
                prior: args.prior.into(),
                head: args.head.into(),
                train_refinement: args.train_refinement,
                optimizer: AdamWConfig {
                    lr: args.lr,
                    weight_decay: args.weight_decay,
                    ..AdamWConfig::default()
                },
                log_every: args.log_every,
                eval_every: args.eval_every,
                eval_samples: args.eval_samples,
            };
            (model, opt, cfg)
        }
    };

    let mut log_file = match &args.log {
        Some(path) => Some(fs::File::create(path).with_context(|| path.display().to_string())?),
        None => None,
    };
    let mut io = TrainIo {
        log: log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
        checkpoint_path: Some(&args.out),
        checkpoint_every: args.checkpoint_every,
    };
    eprintln!(
        "training {} parameters on {} layouts ({} steps, batch {})",
        model.num_params(),
        dataset.len(),
        cfg.steps,
        cfg.batch_size
    );
    let report = train(&mut model, &mut opt, &dataset, &cfg, &mut io)?;
    eprintln!(
        "done: step {} loss {:.5} (mse {:.5}, l1 {:.5}) in {:.1}s, checkpoint {}",
        report.steps_done,
        report.last_loss.total,
        report.last_loss.mse,
        report.last_loss.l1_geo,
        report.wall_ms_total / 1e3,
        args.out.display()
    );
    Ok(())
}

/// Builds the condition mask a spec describes, encoding its layout with
/// the checkpoint's capacity and categories.
fn build_condition<S: Scalar>(
    spec: &ConditionSpec,
    nmax: usize,
    cats: &CategorySet,
) -> Result<ConditionMask<S>> {
    let encode = |elements: &Vec<Element>| -> Result<_> {
        for (i, e) in elements.iter().enumerate() {
            if e.category >= cats.len() {
                bail!("condition element {i}: category {} out of range", e.category);
            }
        }
        Ok(layout_to_vector::<S>(&Layout::new(elements.clone()), cats, nmax)?)
    };
    // The mask builders only draw randomness for tasks the CLI resolves
    // explicitly, so a fixed seed keeps conditions reproducible.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mask = match (spec.task, &spec.layout) {
        (TaskKind::UnGen, None) => ConditionMask::un_gen(nmax, cats.bits()),
        (TaskKind::UnGen, Some(els)) => build_mask(TaskKind::UnGen, &encode(els)?, &mut rng)?,
        (TaskKind::GenType | TaskKind::GenTypeSize, Some(els)) => {
            build_mask(spec.task, &encode(els)?, &mut rng)?
        }
        (TaskKind::Completion, Some(els)) => {
            let retain = spec
                .retain
                .as_ref()
                .context("completion conditions need a `retain` index list")?;
            completion_mask_for(&encode(els)?, retain)?
        }
        (TaskKind::Refinement, Some(els)) => refinement_mask_from_noisy(&encode(els)?),
        (task, None) => bail!("a {task:?} condition needs a `layout`"),
    };
    Ok(mask)
}

fn load_condition<S: Scalar>(
    path: Option<&Path>,
    nmax: usize,
    cats: &CategorySet,
) -> Result<ConditionMask<S>> {
    match path {
        None => Ok(ConditionMask::un_gen(nmax, cats.bits())),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            let spec: ConditionSpec =
                serde_json::from_str(&text).with_context(|| p.display().to_string())?;
            build_condition(&spec, nmax, cats)
        }
    }
}

fn cmd_sample<S: Scalar>(args: SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.model)?;
    let model: VectorFieldModel<S> = ckpt.to_model()?;
    let cats = ckpt.category_set()?;
    let hist = ckpt.histogram_usize();
    let mask = load_condition::<S>(args.condition.as_deref(), model.config.nmax, &cats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut layouts = Vec::with_capacity(args.count);
    match ckpt.head {
        Head::Flow => {
            let sampler = Sampler::new(&model, ckpt.prior, &hist)?;
            let cfg = SampleConfig {
                steps: args.steps,
                solver: args.solver.into(),
                trajectory_conditioning: args.trajectory_conditioning,
            };
            for _ in 0..args.count {
                let v = sampler.sample(&mask, &cfg, &mut rng)?;
                layouts.push(vector_to_layout(&v, &cats)?);
            }
        }
        Head::Diffusion => {
            if args.trajectory_conditioning {
                bail!("trajectory conditioning is a flow-head feature");
            }
            let sampler =
                DiffusionSampler::new(&model, NoiseSchedule::linear(DIFFUSION_T_TRAIN)?, &hist)?;
            let cfg = DiffusionSampleConfig { steps: args.steps, eta: args.eta };
            for _ in 0..args.count {
                let v = sampler.sample(&mask, &cfg, &mut rng)?;
                layouts.push(vector_to_layout(&v, &cats)?);
            }
        }
    }
    let out_set = Dataset::new(layouts, cats)?;
    save_dataset(&out_set, &args.out)?;
    eprintln!("wrote {} layouts to {}", out_set.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let generated = load_dataset(&args.generated, usize::MAX)?.dataset;
    let reference = load_dataset(&args.reference, usize::MAX)?.dataset;
    let nmax = args
        .nmax
        .unwrap_or_else(|| generated.max_elements().max(reference.max_elements()));
    let report = evaluate_set(
        generated.layouts(),
        reference.layouts(),
        nmax,
        reference.categories().len(),
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let set = load_dataset(&args.layouts, usize::MAX)?.dataset;
    let style = RenderStyle {
        width: args.width,
        height: args.height,
        show_labels: !args.no_labels,
    };
    fs::create_dir_all(&args.out_dir)?;
    let indices: Vec<usize> = match args.index {
        Some(i) => {
            if i >= set.len() {
                bail!("index {i} out of range ({} layouts)", set.len());
            }
            vec![i]
        }
        None => (0..set.len().min(args.limit)).collect(),
    };
    for &i in &indices {
        let svg = render_svg(&set.layouts()[i], set.categories(), &style);
        fs::write(args.out_dir.join(format!("layout_{i:04}.svg")), svg)?;
    }
    eprintln!("rendered {} layouts into {}", indices.len(), args.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TraceStats {
    straightness: f64,
    steps: Vec<layoutflow::sampler::TraceStepStats>,
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.model)?;
    if ckpt.head != Head::Flow {
        bail!("trace visualizes flow trajectories; this checkpoint holds a diffusion head");
    }
    let model: VectorFieldModel<f32> = ckpt.to_model()?;
    let cats = ckpt.category_set()?;
    let mask = load_condition::<f32>(args.condition.as_deref(), model.config.nmax, &cats)?;
    let sampler = Sampler::new(&model, ckpt.prior, &ckpt.histogram_usize())?;
    let cfg = SampleConfig {
        steps: args.steps,
        solver: args.solver.into(),
        trajectory_conditioning: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (_, trace) = sampler.sample_with_trace(&mask, &cfg, &mut rng)?;
    let states: Vec<Layout> = trace
        .states
        .iter()
        .map(|v| vector_to_layout(v, &cats))
        .collect::<layoutflow::Result<_>>()?;
    let svg = render_trace_svg(&states, &cats, &RenderStyle::default());
    fs::write(&args.out, svg)?;
    if let Some(stats_path) = &args.stats {
        let stats = TraceStats {
            straightness: trace.straightness(),
            steps: trace.step_stats(),
        };
        fs::write(stats_path, serde_json::to_string_pretty(&stats)?)?;
    }
    eprintln!("traced {} steps into {}", args.steps, args.out.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.model)?;
    let model: VectorFieldModel<f32> = ckpt.to_model()?;
    let cats = ckpt.category_set()?;
    let hist = ckpt.histogram_usize();
    let reference = load_dataset(&args.data, usize::MAX)?.dataset;
    let nmax = model.config.nmax.max(reference.max_elements());
    let mask = ConditionMask::<f32>::un_gen(model.config.nmax, cats.bits());

    let mut rows = Vec::new();
    match ckpt.head {
        Head::Flow => {
            let sampler = Sampler::new(&model, ckpt.prior, &hist)?;
            for solver in SolverKind::ALL {
                for &steps in &args.steps {
                    let cfg = SampleConfig {
                        steps,
                        solver,
                        trajectory_conditioning: false,
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                    let started = Instant::now();
                    let mut layouts = Vec::with_capacity(args.count);
                    let mut straightness_sum = 0.0;
                    for _ in 0..args.count {
                        let (v, trace) = sampler.sample_with_trace(&mask, &cfg, &mut rng)?;
                        straightness_sum += trace.straightness();
                        layouts.push(vector_to_layout(&v, &cats)?);
                    }
                    let ms = started.elapsed().as_secs_f64() * 1e3 / args.count as f64;
                    let report =
                        evaluate_set(&layouts, reference.layouts(), nmax, cats.len())?;
                    rows.push(format!(
                        "| {} | {steps} | {:.4} | {:.2} | {:.4} | {:.4} | {ms:.2} |",
                        solver.name(),
                        report.frechet,
                        report.generated.alignment,
                        report.generated.overlap,
                        straightness_sum / args.count as f64,
                    ));
                }
            }
        }
        Head::Diffusion => {
            let sampler =
                DiffusionSampler::new(&model, NoiseSchedule::linear(DIFFUSION_T_TRAIN)?, &hist)?;
            for (label, eta) in [("ancestral", 1.0), ("ddim", 0.0)] {
                for &steps in &args.steps {
                    let cfg = DiffusionSampleConfig { steps, eta };
                    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                    let started = Instant::now();
                    let mut layouts = Vec::with_capacity(args.count);
                    for _ in 0..args.count {
                        let v = sampler.sample(&mask, &cfg, &mut rng)?;
                        layouts.push(vector_to_layout(&v, &cats)?);
                    }
                    let ms = started.elapsed().as_secs_f64() * 1e3 / args.count as f64;
                    let report =
                        evaluate_set(&layouts, reference.layouts(), nmax, cats.len())?;
                    rows.push(format!(
                        "| {label} | {steps} | {:.4} | {:.2} | {:.4} | - | {ms:.2} |",
                        report.frechet,
                        report.generated.alignment,
                        report.generated.overlap,
                    ));
                }
            }
        }
    }

    let mut table = String::new();
    table.push_str("| solver | steps | frechet | alignment | overlap | straightness | ms/sample |\n");
    table.push_str("|---|---|---|---|---|---|---|\n");
    for row in rows {
        table.push_str(&row);
        table.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, &table)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(table.as_bytes())?;
        }
    }
    Ok(())
}
