//! Pipeline driver. Five subcommands cover the whole experimental loop:
//! `tile` cuts oversized frames into training clips, `train` fits a model,
//! `predict` runs sliding-window inference on a full frame, `evaluate`
//! scores predictions against ground truth, and `profile` measures model
//! efficiency.
//!
//! Exit codes: 0 success, 1 runtime/data failure, 2 usage or configuration
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use aerseg::dataio::{self, DatasetIndex, ManifestRow, Split};
use aerseg::infer::{self, ModelPredictor};
use aerseg::metrics::{self, ConfusionMatrix, EffReport};
use aerseg::model::{self, ModelConfig, ModelVariant};
use aerseg::train::{self, TrainConfig, TrainSample};
use aerseg::types::{LabelSet, ScoreKind};
use aerseg::{softmax_pixelwise, Error};

#[derive(Parser)]
#[command(name = "aerseg", version, about = "Aerial semantic-segmentation pipeline")]
struct Cli {
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut dataset frames into fixed-size training clips.
    Tile(TileArgs),
    /// Train a model on tiled clips.
    Train(TrainArgs),
    /// Sliding-window inference on one full frame.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Measure parameter counts and inference latency.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct TileArgs {
    /// Dataset root: `<root>/<split>/seq*/Images/*.png` with sibling Labels.
    #[arg(long)]
    input: PathBuf,
    /// Output root; tiles land in `<output>/<split>/{images,masks}`.
    #[arg(long)]
    output: PathBuf,
    /// Splits to tile.
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("train"), String::from("val")])]
    splits: Vec<String>,
    /// Clip side length in pixels.
    #[arg(long, default_value_t = 512)]
    clip: usize,
    /// Stride between clip origins.
    #[arg(long, default_value_t = 512)]
    stride: usize,
    /// Palette file overriding the built-in taxonomy.
    #[arg(long)]
    palette: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Tiled dataset root produced by `tile`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training history.
    #[arg(long)]
    output: PathBuf,
    /// Model variant: b0, b3, b5 or tiny.
    #[arg(long, default_value = "b0")]
    variant: String,
    /// JSON training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Palette file overriding the built-in taxonomy.
    #[arg(long)]
    palette: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train` (its `.json` sidecar must sit next to it).
    #[arg(long)]
    weights: PathBuf,
    /// Input RGB frame.
    #[arg(long)]
    input: PathBuf,
    /// Output color mask PNG.
    #[arg(long)]
    output: PathBuf,
    /// Sliding-window side length.
    #[arg(long, default_value_t = 1024)]
    window: usize,
    /// Overlap between adjacent windows.
    #[arg(long, default_value_t = 128)]
    overlap: usize,
    /// Average logits with a horizontally mirrored pass.
    #[arg(long)]
    tta: bool,
    /// Write the score map used for the final decision to this path.
    #[arg(long)]
    dump_scores: Option<PathBuf>,
    /// Extra probability score maps to merge in by geometric mean.
    #[arg(long)]
    ensemble: Vec<PathBuf>,
    /// Palette file overriding the built-in taxonomy.
    #[arg(long)]
    palette: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predicted color masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth color masks with matching file names.
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for iou.csv and confusion.csv.
    #[arg(long)]
    output: PathBuf,
    /// Palette file overriding the built-in taxonomy.
    #[arg(long)]
    palette: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Variants to profile.
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("b0")])]
    variants: Vec<String>,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Efficiency CSV output path.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Tile(args) => cmd_tile(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Profile(args) => cmd_profile(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Configuration mistakes exit 2; data and runtime failures exit 1.
fn classify(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) | Some(Error::UnknownVariant(_)) => 2,
        _ => 1,
    }
}

fn load_labels(palette: &Option<PathBuf>) -> anyhow::Result<LabelSet> {
    match palette {
        Some(path) => Ok(dataio::read_palette(path)
            .with_context(|| format!("reading palette {}", path.display()))?),
        None => Ok(LabelSet::uavid()),
    }
}

fn cmd_tile(args: TileArgs) -> anyhow::Result<()> {
    let labels = load_labels(&args.palette)?;
    if args.stride == 0 || args.stride > args.clip {
        return Err(Error::InvalidConfig(format!(
            "stride {} must be in 1..={}",
            args.stride, args.clip
        ))
        .into());
    }
    std::fs::create_dir_all(&args.output)?;
    dataio::write_palette(&args.output.join("palette.txt"), &labels)?;

    for split_name in &args.splits {
        let split: Split = split_name.parse()?;
        let index = DatasetIndex::scan(&args.input, split)?;
        if index.items.is_empty() {
            bail!("split {split_name}: no frames found under {}", args.input.display());
        }
        let img_dir = args.output.join(split.dir_name()).join("images");
        let mask_dir = args.output.join(split.dir_name()).join("masks");
        std::fs::create_dir_all(&img_dir)?;
        std::fs::create_dir_all(&mask_dir)?;

        let mut manifest: Vec<ManifestRow> = Vec::new();
        let mut tile_total = 0usize;
        for item in &index.items {
            let img = dataio::load_image(&item.image_path)?;
            let mask = match &item.label_path {
                Some(p) => Some(dataio::load_mask(p, &labels)?),
                None => None,
            };
            let grid =
                dataio::compute_tile_grid(img.width, img.height, args.clip, args.stride)?;
            let tiles = dataio::extract_tiles(&img, mask.as_ref(), &grid)?;
            let stem = tile_stem(&item.image_path)?;
            for (rect, (tile_img, tile_mask)) in grid.origins.iter().zip(tiles) {
                let name = format!("{stem}_{:05}_{:05}.png", rect.x, rect.y);
                dataio::save_image(&img_dir.join(&name), &tile_img)?;
                if let Some(m) = tile_mask {
                    dataio::save_index_mask(&mask_dir.join(&name), &m)?;
                }
                manifest.push(ManifestRow {
                    image_path: format!("{}/images/{name}", split.dir_name()),
                    x: rect.x,
                    y: rect.y,
                    w: rect.w,
                    h: rect.h,
                });
                tile_total += 1;
            }
        }
        dataio::write_manifest(
            &args.output.join(split.dir_name()).join("manifest.csv"),
            &manifest,
        )?;
        println!(
            "{split_name}: {} frames -> {tile_total} clips of {}x{}",
            index.items.len(),
            args.clip,
            args.clip
        );
    }
    Ok(())
}

/// `<seq>_<frame>` from `.../seqN/Images/frame.png`.
fn tile_stem(path: &Path) -> anyhow::Result<String> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .context("image file name is not valid UTF-8")?;
    let seq = path
        .parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .and_then(|s| s.to_str())
        .context("image path has no sequence directory")?;
    Ok(format!("{seq}_{stem}"))
}

/// Load `<root>/<split>/{images,masks}` pairs sorted by file name.
fn load_tiled_split(root: &Path, split: Split) -> anyhow::Result<Vec<TrainSample>> {
    let img_dir = root.join(split.dir_name()).join("images");
    let mask_dir = root.join(split.dir_name()).join("masks");
    if !img_dir.is_dir() {
        return Err(Error::DatasetLayout {
            path: img_dir,
            message: "tiled split not found; run the tile command first".into(),
        }
        .into());
    }
    let mut names: Vec<String> = std::fs::read_dir(&img_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let image = dataio::load_image(&img_dir.join(&name))?;
        let mask_path = mask_dir.join(&name);
        if !mask_path.is_file() {
            return Err(Error::DatasetLayout {
                path: mask_path,
                message: "clip has no mask".into(),
            }
            .into());
        }
        let mask = dataio::load_index_mask(&mask_path)?;
        samples.push(TrainSample { image, mask });
    }
    Ok(samples)
}

fn sidecar_path(weights: &Path) -> PathBuf {
    let mut os = weights.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

fn save_checkpoint(
    path: &Path,
    store: &aerseg::model::WeightStore<f32>,
    cfg: &ModelConfig,
) -> anyhow::Result<()> {
    model::save_weights(path, store)?;
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let labels = load_labels(&args.palette.clone().or_else(|| {
        let p = args.data.join("palette.txt");
        p.is_file().then_some(p)
    }))?;
    let variant: ModelVariant = args.variant.parse()?;
    let model_cfg = model::make_config(variant, labels.num_classes());
    let mut train_cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    train_cfg.validate()?;

    let train_set = load_tiled_split(&args.data, Split::Train)?;
    let val_set = load_tiled_split(&args.data, Split::Val)?;
    println!("training on {} clips, validating on {}", train_set.len(), val_set.len());

    std::fs::create_dir_all(&args.output)?;
    let history_path = args.output.join("history.csv");
    let mut history = csv::Writer::from_path(&history_path)?;
    history.write_record(["epoch", "train_loss", "val_loss", "val_miou", "lr", "seconds"])?;
    history.flush()?;

    let outcome = train::train_loop(&model_cfg, &train_cfg, &train_set, &val_set, |r| {
        println!(
            "epoch {:>3}: train {:.4}  val {:.4}  mIoU {:.4}  lr {:.2e}  ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr, r.seconds
        );
        let row = [
            r.epoch.to_string(),
            format!("{:.6}", r.train_loss),
            format!("{:.6}", r.val_loss),
            format!("{:.6}", r.val_miou),
            format!("{:.6e}", r.lr),
            format!("{:.3}", r.seconds),
        ];
        history
            .write_record(&row)
            .and_then(|()| history.flush().map_err(csv::Error::from))
            .map_err(|e| {
                Error::io(
                    &history_path,
                    std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
                )
            })?;
        Ok(true)
    })?;

    save_checkpoint(&args.output.join("best.segw"), &outcome.best_weights, &model_cfg)?;
    save_checkpoint(&args.output.join("final.segw"), &outcome.final_weights, &model_cfg)?;
    println!(
        "done: best val mIoU {:.4} at epoch {}{}",
        outcome.best_val_miou,
        outcome.best_epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let labels = load_labels(&args.palette)?;
    let sidecar = sidecar_path(&args.weights);
    let text = std::fs::read_to_string(&sidecar)
        .with_context(|| format!("reading model sidecar {}", sidecar.display()))?;
    let cfg: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", sidecar.display())))?;
    if cfg.num_classes != labels.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has {} classes but the palette defines {}",
            cfg.num_classes,
            labels.num_classes()
        ))
        .into());
    }
    let store = model::load_weights(&args.weights, &cfg)?;
    let img = dataio::load_image(&args.input)?;
    let predictor = ModelPredictor {
        cfg: &cfg,
        store: &store,
        mean: train::augment::IMAGENET_MEAN,
        std: train::augment::IMAGENET_STD,
    };

    let logits = if args.tta {
        infer::tta_flip_predict(&img, args.window, args.overlap, &predictor)?
    } else {
        infer::stitch_predict(&img, args.window, args.overlap, &predictor)?
    };

    let decision = if args.ensemble.is_empty() {
        logits
    } else {
        let own = softmax_pixelwise(&logits)?;
        let mut members = vec![own];
        for path in &args.ensemble {
            let m = infer::load_scores(path)?;
            let m = match m.kind {
                ScoreKind::Probabilities => m,
                ScoreKind::Logits => softmax_pixelwise(&m)?,
            };
            members.push(m);
        }
        let refs: Vec<&_> = members.iter().collect();
        infer::ensemble_geometric_mean(&refs)?
    };

    if let Some(path) = &args.dump_scores {
        infer::save_scores(path, &decision)?;
    }
    let mask = infer::argmax_decode(&decision)?;
    let colored = dataio::encode_mask(&mask, &labels)?;
    dataio::save_image(&args.output, &colored)?;
    println!("wrote {} ({}x{})", args.output.display(), mask.width, mask.height);
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let labels = load_labels(&args.palette)?;
    let mut names: Vec<String> = std::fs::read_dir(&args.pred)
        .with_context(|| format!("reading {}", args.pred.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyInput(format!("no predictions in {}", args.pred.display())).into());
    }
    let mut cm = ConfusionMatrix::new(labels.num_classes());
    for name in &names {
        let truth_path = args.truth.join(name);
        if !truth_path.is_file() {
            return Err(Error::DatasetLayout {
                path: truth_path,
                message: "prediction has no matching ground truth".into(),
            }
            .into());
        }
        let pred = dataio::load_mask(&args.pred.join(name), &labels)?;
        let truth = dataio::load_mask(&truth_path, &labels)?;
        cm.accumulate(&truth, &pred)?;
    }
    std::fs::create_dir_all(&args.output)?;
    metrics::write_iou_report(&args.output.join("iou.csv"), &labels, &cm)?;
    metrics::write_confusion_report(&args.output.join("confusion.csv"), &labels, &cm)?;
    for (entry, iou) in labels.entries().iter().zip(cm.iou_per_class()) {
        match iou {
            Some(v) => println!("{:<16} {:.4}", entry.name, v),
            None => println!("{:<16} undefined", entry.name),
        }
    }
    println!("{:<16} {:.4} ({} frames)", "mIoU", cm.mean_iou()?, names.len());
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> anyhow::Result<()> {
    if args.runs == 0 {
        return Err(Error::InvalidConfig("profiling needs at least one run".into()).into());
    }
    let mut rows: Vec<(String, EffReport)> = Vec::new();
    for name in &args.variants {
        let variant: ModelVariant = name.parse()?;
        let cfg = model::make_config(variant, args.classes);
        let store = model::init_weights(&cfg, args.seed);
        let img = aerseg::PlaneImage::zeros(args.width, args.height, 3);
        let (mean_ms, stddev_ms, fps) = metrics::measure_latency(
            || model::forward(&img, &cfg, &store).map(|_| ()),
            args.warmup,
            args.runs,
        )?;
        let report = EffReport {
            params: model::count_parameters(&cfg),
            latency_ms_mean: mean_ms,
            latency_ms_stddev: stddev_ms,
            fps,
            warmup_runs: args.warmup,
            timed_runs: args.runs,
        };
        println!(
            "{name}: {:.2}M params, {:.2} +/- {:.2} ms, {:.2} fps at {}x{}",
            report.params as f64 / 1e6,
            report.latency_ms_mean,
            report.latency_ms_stddev,
            report.fps,
            args.width,
            args.height
        );
        rows.push((name.clone(), report));
    }
    if let Some(path) = &args.output {
        metrics::write_efficiency_report(path, &rows)?;
    }
    Ok(())
}
