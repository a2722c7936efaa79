//! `sgf`: generate, train, run, evaluate and benchmark the scene graph engine.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgf_core::datagen::stream::{load_dataset, load_stream, save_scene};
use sgf_core::datagen::{generate_scene, labeled_graph, random_room, replay, DataError, RoomConfig, Vocabulary};
use sgf_core::eval::{evaluate, EvalConfig, EvalError, EvalScene};
use sgf_core::fusion::FusionError;
use sgf_core::pipeline::{run_pipeline, PipelineConfig, PipelineError, WorkerMode, CONFIG_ENV};
use sgf_core::scene_map::MapError;
use sgf_core::spn::{Spn, SpnConfig, SpnError};
use sgf_core::train::{majority_labels, train, write_loss_csv, LabeledGraph, OptimizerState, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "sgf", version, about = "Incremental 3D scene graph prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic room streams with ground truth.
    Gen(GenArgs),
    /// Train a network on a generated dataset.
    Train(TrainArgs),
    /// Run the pipeline on one stream and export the fused graph.
    Run(RunArgs),
    /// Score a network against a dataset.
    Eval(EvalArgs),
    /// Replay a stream repeatedly and report latencies.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per stream.
    #[arg(long)]
    frames: Option<u64>,
    /// Paint objects in their class color.
    #[arg(long)]
    class_colors: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Desk,
    Paper,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Checkpoint stem; writes `<stem>.json` and `<stem>.bin`.
    #[arg(long, default_value = "model")]
    model: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Last scenes of the dataset kept out of training.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    lr: Option<f64>,
    /// Loss curve output.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// TOML pipeline configuration.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Predict inline after every frame.
    #[arg(long, conflicts_with = "async_mode")]
    sync: bool,
    /// Predict on a second worker.
    #[arg(long = "async")]
    async_mode: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    /// Recompute every feature on every pass.
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    proximity_threshold: Option<f64>,
    #[arg(long)]
    min_segment_points: Option<usize>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if self.sync {
            cfg.mode = WorkerMode::Sync;
        }
        if self.async_mode {
            cfg.mode = WorkerMode::Async;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(q) = self.queue_capacity {
            cfg.queue_capacity = q;
        }
        if self.no_cache {
            cfg.use_cache = false;
        }
        if let Some(t) = self.proximity_threshold {
            cfg.graph.proximity_threshold = t;
        }
        if let Some(m) = self.min_segment_points {
            cfg.graph.min_segment_points = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, default_value = "model")]
    model: PathBuf,
    /// Graph JSON output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Latency report JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "model")]
    model: PathBuf,
    /// Evaluate only the last scenes; the rest provide the majority baseline.
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    edge_dropout: f64,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Stream to replay; a synthetic room is generated when absent.
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Checkpoint stem; an untrained desk network when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    /// Approximate segment count of the synthetic room.
    #[arg(long, default_value_t = 500)]
    segments: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

/// Process exit codes.
const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SpnError>() {
            return match e {
                SpnError::NonFinite(_) => NUMERIC,
                _ => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Spn(SpnError::NonFinite(_)) => NUMERIC,
                _ => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Spn(SpnError::NonFinite(_))
                | EvalError::Pipeline(PipelineError::Spn(SpnError::NonFinite(_))) => NUMERIC,
                _ => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Config(_) => USAGE,
                PipelineError::Spn(SpnError::NonFinite(_)) => NUMERIC,
                _ => DATA,
            };
        }
        if cause.is::<DataError>()
            || cause.is::<MapError>()
            || cause.is::<FusionError>()
            || cause.is::<std::io::Error>()
        {
            return DATA;
        }
    }
    USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    if a.scenes == 0 {
        bail!("--scenes must be positive");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let vocab = Vocabulary::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut room = RoomConfig::default();
    room.stream.class_colors = a.class_colors;
    if let Some(f) = a.frames {
        room.stream.frames = f;
    }
    for i in 0..a.scenes {
        let spec = random_room(&room, &mut rng);
        let scene = generate_scene(&spec, &vocab, &mut rng)?;
        save_scene(&a.out, i, &scene.frames, &scene.gt)?;
    }
    println!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

/// Labelled graphs, evaluation scenes, class names and predicate names.
type Dataset = (Vec<LabeledGraph>, Vec<EvalScene>, Vec<String>, Vec<String>);

fn load_graphs(dir: &Path, cfg: &PipelineConfig) -> Result<Dataset> {
    let data = load_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let Some(first) = data.first() else {
        return Err(DataError::Format(format!("no scenes in {}", dir.display())).into());
    };
    let (classes, predicates) = (first.2.classes.clone(), first.2.predicates.clone());
    let mut graphs = Vec::with_capacity(data.len());
    let mut scenes = Vec::with_capacity(data.len());
    for (name, frames, gt) in data {
        if gt.classes != classes || gt.predicates != predicates {
            return Err(DataError::Format(format!("{name}: vocabulary differs from the first scene")).into());
        }
        let map = replay(&frames).with_context(|| format!("replaying {name}"))?;
        graphs.push(labeled_graph(
            &map,
            &gt,
            cfg.graph.min_segment_points,
            cfg.graph.proximity_threshold,
        ));
        scenes.push(EvalScene { frames, gt });
    }
    Ok((graphs, scenes, classes, predicates))
}

fn split(n: usize, holdout: usize) -> Result<usize> {
    if holdout >= n {
        return Err(DataError::Format(format!("holdout {holdout} leaves no training scenes out of {n}")).into());
    }
    Ok(n - holdout)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let pcfg = PipelineConfig::default();
    let (graphs, _, classes, predicates) = load_graphs(&a.data, &pcfg)?;
    let cut = split(graphs.len(), a.holdout)?;
    let (c, p) = (classes.len(), predicates.len());
    let mut net_cfg = match a.preset {
        Preset::Tiny => SpnConfig::tiny(c, p),
        Preset::Desk => SpnConfig::desk(c, p),
        Preset::Paper => SpnConfig::paper(c, p),
    };
    net_cfg.init_seed = a.seed;
    let mut spn = Spn::new(net_cfg)?;
    let mut state = OptimizerState::new(&spn.params);
    let mut cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::desk()
    };
    if let Some(lr) = a.lr {
        cfg.optimizer.lr_base = lr;
    }
    let history = train(&mut spn, &mut state, &graphs[..cut], &cfg, |s| {
        println!(
            "epoch {:>4}  loss {:.5}  obj {:.5}  pred {:.5}  lr {:.2e}",
            s.epoch, s.loss.total, s.loss.object, s.loss.predicate, s.learning_rate
        );
    })?;
    spn.save(&a.model)?;
    let csv = a.loss_csv.unwrap_or_else(|| a.model.with_extension("loss.csv"));
    write_loss_csv(&csv, &history).with_context(|| format!("writing {}", csv.display()))?;
    println!(
        "saved {} and {}",
        a.model.with_extension("json").display(),
        csv.display()
    );
    Ok(())
}

fn load_model(stem: &Path) -> Result<Arc<Spn>> {
    Ok(Arc::new(
        Spn::load(stem).with_context(|| format!("loading checkpoint {}", stem.display()))?,
    ))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let frames = load_stream(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let spn = load_model(&a.model)?;
    let out = run_pipeline(&frames, spn, &cfg)?;
    let json = out.document().to_json();
    let mut h = DefaultHasher::new();
    json.hash(&mut h);
    match a.out.as_ref().or(cfg.graph_path.as_ref()) {
        Some(path) => write(path, &json)?,
        None => println!("{json}"),
    }
    if let Some(path) = a.report.as_ref().or(cfg.report_path.as_ref()) {
        write(path, &out.report.to_json())?;
    }
    eprintln!(
        "{} nodes, {} edges, {} instances; graph hash {:016x}",
        out.fused.nodes.len(),
        out.fused.edges.len(),
        out.fused.cluster_instances().instances.len(),
        h.finish()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let (graphs, scenes, classes, predicates) = load_graphs(&a.data, &cfg)?;
    let spn = load_model(&a.model)?;
    if spn.config.num_classes != classes.len() || spn.config.num_predicates != predicates.len() {
        return Err(DataError::Format("checkpoint vocabulary does not match the dataset".into()).into());
    }
    let (scenes, baseline) = match a.holdout {
        Some(h) => {
            let cut = split(scenes.len(), h)?;
            (
                &scenes[cut..],
                Some(majority_labels(&graphs[..cut], classes.len(), predicates.len())),
            )
        }
        None => (&scenes[..], None),
    };
    let ecfg = EvalConfig {
        edge_dropout: a.edge_dropout,
        seed: cfg.seed,
        ..EvalConfig::default()
    };
    let report = evaluate(spn, scenes, baseline, &ecfg, &cfg)?;
    print!("{}", report.to_csv());
    if let Some(path) = &a.json {
        write(path, &report.to_json())?;
    }
    if let Some(path) = &a.csv {
        write(path, &report.to_csv())?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let frames = match &a.stream {
        Some(path) => load_stream(path).with_context(|| format!("reading {}", path.display()))?,
        None => synthetic_stream(a.segments, cfg.seed)?,
    };
    let spn = match &a.model {
        Some(stem) => load_model(stem)?,
        None => {
            let v = Vocabulary::desk();
            Arc::new(Spn::new(SpnConfig::desk(v.classes.len(), v.predicates.len()))?)
        }
    };
    let mut last = None;
    for i in 0..a.repeat.max(1) {
        let out = run_pipeline(&frames, spn.clone(), &cfg)?;
        println!(
            "run {}: {} segments, {} passes",
            i + 1,
            out.graph.len(),
            out.report.recompute.passes
        );
        last = Some(out);
    }
    let out = last.expect("at least one run");
    print!("{}", out.report.render());
    if out.report.recompute.plan_mismatches > 0 {
        bail!(
            "{} passes computed features outside their plan",
            out.report.recompute.plan_mismatches
        );
    }
    if let Some(path) = a.report.as_ref().or(cfg.report_path.as_ref()) {
        write(path, &out.report.to_json())?;
    }
    Ok(())
}

/// A large room whose objects are split finely enough to reach roughly
/// `segments` segments.
fn synthetic_stream(segments: usize, seed: u64) -> Result<Vec<sgf_core::scene_map::FrameUpdate>> {
    let vocab = Vocabulary::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = segments.saturating_sub(4).div_ceil(13).max(1);
    let room = RoomConfig {
        tables: (2, 2),
        chairs: (4, 4),
        shelves: (2, 2),
        floor_segments: per * 3,
        wall_segments: per,
        table_segments: per,
        chair_segments: per / 2 + 1,
        shelf_segments: per,
        ..RoomConfig::default()
    };
    let mut spec = random_room(&room, &mut rng);
    spec.stream.density = 400.0;
    spec.stream.min_object_points = 64 * per;
    Ok(generate_scene(&spec, &vocab, &mut rng)?.frames)
}
