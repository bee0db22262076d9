//! `pixemb`: train, evaluate, benchmark and inspect pixel-embedding models.

mod source;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use pixemb_core::bench::{self, FirstLayerBench, Method, Schedule};
use pixemb_core::embed::{format_codes, merge_table, OneHotIndex, TableInit};
use pixemb_core::io::{self, Checkpoint, Mode};
use pixemb_core::network::{ForwardMode, ModelSpec, Preset};
use pixemb_core::trainer::{evaluate, train, TrainConfig};
use pixemb_core::ImageBatch;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "pixemb", version, about = "Pixel-embedding quantized CNNs: train, eval, bench, inspect")]
struct Cli {
    /// Worker threads for the kernels.
    #[arg(long, global = true, env = "PIXEMB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint, metrics CSV and manifest.
    Train(TrainArgs),
    /// Report top-1 (and top-5) accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Time inference round-robin across checkpoints or the first layer.
    Bench(BenchArgs),
    /// Print the merged pixel-embedding codes of a checkpoint.
    InspectTable(InspectArgs),
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
        format!("unknown preset {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_table_init(s: &str) -> Result<TableInit, String> {
    s.parse().map_err(|_| format!("unknown table init {s:?}; expected uniform, sorted-uniform or staggered-ramp"))
}

/// Every field is optional so that a manifest given with `--config` fills
/// whatever the command line leaves unset.
#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    #[arg(long, value_parser = parse_preset)]
    #[serde(deserialize_with = "de_preset")]
    preset: Option<Preset>,
    /// `toy`, `synthetic[:N]` or a CIFAR binary directory.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Embedding width (pixemb-first only).
    #[arg(long)]
    d: Option<usize>,
    /// JSON manifest supplying defaults for unset flags.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long, value_delimiter = ',')]
    lr_decay_steps: Option<Vec<usize>>,
    #[arg(long)]
    lr_decay_factor: Option<f32>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    float_head: Option<bool>,
    #[arg(long, value_parser = parse_table_init)]
    #[serde(deserialize_with = "de_table_init")]
    table_init: Option<TableInit>,
    /// Use the whole CIFAR-10 training set instead of the desk subset.
    #[arg(long)]
    full_data: Option<bool>,
    #[arg(skip)]
    command: Option<String>,
    #[arg(skip)]
    threads: Option<usize>,
    #[arg(skip)]
    version: Option<String>,
}

fn de_preset<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Preset>, D::Error> {
    Option::<String>::deserialize(d)?
        .map(|s| parse_preset(&s).map_err(serde::de::Error::custom))
        .transpose()
}

fn de_table_init<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<TableInit>, D::Error> {
    Option::<String>::deserialize(d)?
        .map(|s| parse_table_init(&s).map_err(serde::de::Error::custom))
        .transpose()
}

/// Effective training configuration, written next to every run.
#[derive(Debug, Clone, Serialize)]
struct TrainManifest {
    command: &'static str,
    version: &'static str,
    preset: String,
    data: String,
    full_data: bool,
    out: PathBuf,
    seed: u64,
    d: usize,
    epochs: usize,
    steps: usize,
    batch_size: usize,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    lr_decay_steps: Vec<usize>,
    lr_decay_factor: f32,
    eval_every: usize,
    augment: bool,
    float_head: bool,
    table_init: String,
    threads: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, value_enum, default_value_t = PathKind::Packed)]
    path: PathKind,
    #[arg(long)]
    full_data: bool,
    /// CSV to append a `preset,path,top1,top5` row to.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum PathKind {
    Float,
    Packed,
    /// Packed where supported, float otherwise.
    Auto,
}

impl PathKind {
    fn name(self) -> &'static str {
        match self {
            PathKind::Float => "float",
            PathKind::Packed => "packed",
            PathKind::Auto => "auto",
        }
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoints to time; may repeat.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Input image, resized to the model input outside the timed region.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = bench::DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Calls per timed run.
    #[arg(long, default_value_t = 1)]
    inner: usize,
    #[arg(long, value_enum, default_value_t = PathKind::Auto)]
    path: PathKind,
    /// Time only the first layer: pixel embedding with a binary conv
    /// against a float conv on RGB.
    #[arg(long)]
    first_layer: bool,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    out_channels: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", usage_for_args());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Usage of the subcommand named on the command line, or of the whole tool.
fn usage_for_args() -> String {
    let mut cmd = Cli::command();
    let name = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if let Some(sub) = name.and_then(|n| cmd.find_subcommand_mut(&n).cloned()) {
        let bin = format!("pixemb {}", sub.get_name());
        let mut sub = sub.bin_name(bin);
        return sub.render_usage().to_string();
    }
    cmd.render_usage().to_string()
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Train(args) => cmd_train(args, threads),
        Command::Eval(args) => cmd_eval(args, threads),
        Command::Bench(args) => cmd_bench(args, threads),
        Command::InspectTable(args) => cmd_inspect_table(args),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `out.csv` becomes `out.manifest.json`.
fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn cmd_train(cli: TrainArgs, threads: usize) -> Result<()> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainArgs>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainArgs::default(),
    };
    macro_rules! pick {
        ($field:ident) => {
            cli.$field.clone().or(file.$field.clone())
        };
    }
    let preset = pick!(preset).context("--preset is required")?;
    let data = pick!(data).context("--data is required")?;
    let out = pick!(out).context("--out is required")?;
    let full_data = pick!(full_data).unwrap_or(false);
    let (train_set, val_set) = source::load(&data, full_data)?;
    info!("{} training and {} held-out images from {data}", train_set.len(), val_set.len());

    let seed = pick!(seed).unwrap_or(0);
    let batch_size = pick!(batch_size).unwrap_or(64);
    let epochs = pick!(epochs).unwrap_or(3);
    let steps = pick!(steps).unwrap_or_else(|| TrainConfig::steps_for_epochs(epochs, train_set.len(), batch_size));
    let mut cfg = TrainConfig::desk(steps, seed);
    cfg.batch_size = batch_size;
    cfg.base_lr = pick!(lr).unwrap_or(cfg.base_lr);
    cfg.momentum = pick!(momentum).unwrap_or(cfg.momentum);
    cfg.weight_decay = pick!(weight_decay).unwrap_or(cfg.weight_decay);
    cfg.lr_decay_steps = pick!(lr_decay_steps).unwrap_or(cfg.lr_decay_steps);
    cfg.lr_decay_factor = pick!(lr_decay_factor).unwrap_or(cfg.lr_decay_factor);
    cfg.eval_every = pick!(eval_every).unwrap_or(cfg.eval_every);
    cfg.augment = pick!(augment).unwrap_or(cfg.augment);
    cfg.validate()?;

    let mut spec = ModelSpec::new(preset, pick!(d).unwrap_or(8), train_set.num_classes());
    spec.height = train_set.height();
    spec.width = train_set.width();
    spec.float_head = pick!(float_head).unwrap_or(false);
    spec.table_init = pick!(table_init).unwrap_or_default();

    let manifest = TrainManifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        preset: preset.name().into(),
        data: data.clone(),
        full_data,
        out: out.clone(),
        seed,
        d: spec.d,
        epochs,
        steps,
        batch_size,
        lr: cfg.base_lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        lr_decay_steps: cfg.lr_decay_steps.clone(),
        lr_decay_factor: cfg.lr_decay_factor,
        eval_every: cfg.eval_every,
        augment: cfg.augment,
        float_head: spec.float_head,
        table_init: spec.table_init.name().into(),
        threads,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("manifest.json"), &manifest)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model = spec.build(&mut rng)?;
    info!("training {preset} for {steps} steps");
    let (model, log) = train(model, &train_set, Some(&val_set), &cfg)?;
    fs::write(out.join("metrics.csv"), log.to_csv())?;
    let train_bytes = io::save(&model, Mode::Train)?;
    fs::write(out.join("checkpoint.pxeb"), &train_bytes)?;
    let infer_bytes = io::save(&model, Mode::Infer)?;
    fs::write(out.join("deploy.pxeb"), &infer_bytes)?;
    if let Some(last) = log.records().last() {
        info!(
            "final loss {:.4}, held-out top-1 {:.4}; checkpoint {} bytes, deployable {} bytes",
            last.loss,
            last.top1.unwrap_or(f64::NAN),
            train_bytes.len(),
            infer_bytes.len()
        );
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    io::load(&bytes).with_context(|| format!("loading {}", path.display()))
}

#[derive(Serialize)]
struct EvalRow<'a> {
    preset: &'a str,
    path: &'a str,
    top1: f64,
    top5: Option<f64>,
}

fn resolve_path(kind: PathKind, preset: Preset) -> PathKind {
    match (kind, preset) {
        (PathKind::Auto, Preset::FpFirst) => PathKind::Float,
        (PathKind::Auto, _) => PathKind::Packed,
        (k, _) => k,
    }
}

fn cmd_eval(args: EvalArgs, threads: usize) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let (_, eval_set) = source::load(&args.data, args.full_data)?;
    let path = resolve_path(args.path, checkpoint.preset());
    let acc = match (&checkpoint, path) {
        (Checkpoint::Train(g), PathKind::Float) => evaluate(g, &eval_set, ForwardMode::InferFloat)?,
        (Checkpoint::Train(g), _) => evaluate(g, &eval_set, ForwardMode::InferPacked)?,
        (Checkpoint::Infer(_), PathKind::Float) => bail!("the float path needs a train-mode checkpoint"),
        (Checkpoint::Infer(p), _) => {
            let k = eval_set.num_classes();
            let (mut top1, mut top5) = (0usize, 0usize);
            for start in (0..eval_set.len()).step_by(250) {
                let idx: Vec<usize> = (start..(start + 250).min(eval_set.len())).collect();
                let logits = p.forward(&eval_set.images().select(&idx))?;
                for (rank, &i) in logits.ranking().iter().zip(&idx) {
                    top1 += usize::from(rank[0] == eval_set.labels()[i]);
                    top5 += usize::from(rank.iter().take(5).any(|&c| c == eval_set.labels()[i]));
                }
            }
            let n = eval_set.len() as f64;
            pixemb_core::Accuracy {
                top1: top1 as f64 / n,
                top5: (k >= 5).then_some(top5 as f64 / n),
            }
        }
    };
    let preset = checkpoint.preset();
    match acc.top5 {
        Some(t5) => println!("{preset} {} top1={:.4} top5={t5:.4}", path.name(), acc.top1),
        None => println!("{preset} {} top1={:.4}", path.name(), acc.top1),
    }
    if let Some(out) = &args.out {
        let fresh = !out.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(out)?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(EvalRow {
            preset: preset.name(),
            path: path.name(),
            top1: acc.top1,
            top5: acc.top5,
        })?;
        w.flush()?;
        write_json(
            &manifest_path(out),
            &serde_json::json!({
                "command": "eval",
                "version": env!("CARGO_PKG_VERSION"),
                "checkpoint": args.checkpoint,
                "data": args.data,
                "full_data": args.full_data,
                "path": path,
                "threads": threads,
            }),
        )?;
    }
    Ok(())
}

/// Loads an RGB image and resizes it to `height × width`.
fn load_image(path: &Path, height: usize, width: usize) -> Result<ImageBatch> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let img = if (img.height() as usize, img.width() as usize) == (height, width) {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, image::imageops::FilterType::Triangle)
    };
    Ok(ImageBatch::new(1, height, width, img.into_raw())?)
}

fn cmd_bench(args: BenchArgs, threads: usize) -> Result<()> {
    let schedule = Schedule {
        repeats: args.repeats,
        warmup: args.warmup,
        inner: args.inner,
    };
    let report = if args.first_layer {
        if !args.checkpoints.is_empty() {
            bail!("--first-layer times synthetic layers and takes no checkpoints");
        }
        bench::first_layer_microbench(&FirstLayerBench {
            d: args.d,
            out_channels: args.out_channels,
            schedule,
            ..FirstLayerBench::default()
        })?
    } else {
        if args.checkpoints.is_empty() {
            bail!("give at least one --checkpoint, or --first-layer");
        }
        enum Runner {
            Float(pixemb_core::ModelGraph),
            Packed(pixemb_core::PackedModel),
        }
        let mut runners = Vec::new();
        for (i, path) in args.checkpoints.iter().enumerate() {
            let ck = load_checkpoint(path)?;
            let kind = resolve_path(args.path, ck.preset());
            let (h, w, runner) = match (ck, kind) {
                (Checkpoint::Train(g), PathKind::Float) => (g.input_size().0, g.input_size().1, Runner::Float(g)),
                (Checkpoint::Infer(_), PathKind::Float) => bail!("{}: the float path needs a train-mode checkpoint", path.display()),
                (ck, _) => {
                    let p = ck.packed()?;
                    (p.input_size().0, p.input_size().1, Runner::Packed(p))
                }
            };
            // Preprocessing happens here, before any timing.
            let images = match &args.image {
                Some(img) => load_image(img, h, w)?,
                None => pixemb_core::data::synthetic(1, 10, h, w, 0)?.images().clone(),
            };
            let name = format!("{}:{}#{i}", path.file_stem().unwrap_or_default().to_string_lossy(), kind.name());
            runners.push((name, runner, images));
        }
        let methods = runners
            .iter()
            .map(|(name, runner, images)| {
                Method::new(name.clone(), move || {
                    let logits = match runner {
                        Runner::Float(g) => g.forward(images, ForwardMode::InferFloat)?,
                        Runner::Packed(p) => p.forward(images)?,
                    };
                    std::hint::black_box(logits);
                    Ok(())
                })
            })
            .collect();
        bench::round_robin(methods, schedule)?
    };
    print!("{}", report.summary());
    if let Some(out) = &args.out {
        fs::write(out, report.to_csv())?;
        write_json(
            &manifest_path(out),
            &serde_json::json!({
                "command": "bench",
                "version": env!("CARGO_PKG_VERSION"),
                "checkpoints": args.checkpoints,
                "image": args.image,
                "repeats": args.repeats,
                "warmup": args.warmup,
                "inner": args.inner,
                "path": args.path,
                "first_layer": args.first_layer,
                "d": args.d,
                "out_channels": args.out_channels,
                "threads": threads,
                "machine": report.machine,
            }),
        )?;
    }
    Ok(())
}

fn cmd_inspect_table(args: InspectArgs) -> Result<()> {
    let merged = match load_checkpoint(&args.checkpoint)? {
        Checkpoint::Train(g) => g.embedding_table().map(|t| merge_table(&t)),
        Checkpoint::Infer(p) => p.merged_table().cloned(),
    };
    let Some(merged) = merged else {
        bail!("{} has no pixel-embedding table (only pixemb-first models carry one)", args.checkpoint.display());
    };
    let bits = merged.quant().bits();
    let mut out = String::new();
    for p in 0..=255u8 {
        out.push_str(&format!("{p:>3} {}\n", format_codes(merged.entry(OneHotIndex::from(p)), bits)));
    }
    print!("{out}");
    Ok(())
}
