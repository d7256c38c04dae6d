//! Command-line driver: train, evaluate, export, generate boundary masks,
//! and materialize synthetic datasets.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sembound::boundary::{semantic_boundaries, BoundaryGenConfig, InstanceMap, LabelMap};
use sembound::config::RunConfig;
use sembound::pipeline::{png, synth_shapes, DirDataset};
use sembound::trainer::{self, Checkpoint, TrainOptions};

#[derive(Parser)]
#[command(
    name = "sembound",
    about = "Semantic segmentation training with boundary-detection auxiliary supervision",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint or exported artifact on a dataset directory.
    Eval(EvalArgs),
    /// Strip the boundary head from a checkpoint, keeping backbone +
    /// segmentation head.
    Export(ExportArgs),
    /// Generate per-category boundary masks from label-map PNGs.
    GenBoundaries(GenBoundariesArgs),
    /// Write a synthetic shapes dataset to disk (images/, labels/,
    /// instances/).
    SynthData(SynthDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --override loss.alpha=2.0
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint or exported inference artifact.
    #[arg(long)]
    weights: PathBuf,
    /// Dataset directory containing images/ and labels/.
    #[arg(long)]
    data: PathBuf,
    /// Trimap widths for the boundary F-score ladder.
    #[arg(long, value_delimiter = ',', default_value = "3,5,9,12")]
    widths: Vec<u32>,
    /// Report output directory.
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
    /// Multi-scale + flip logit averaging.
    #[arg(long)]
    tta: bool,
    /// Sliding-window inference as HxW, e.g. 512x1024.
    #[arg(long)]
    slide: Option<String>,
    /// Skip the boundary-detection max-F computation.
    #[arg(long)]
    no_ods: bool,
    /// Write per-image prediction/ground-truth disagreement rasters.
    #[arg(long)]
    error_maps: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenBoundariesArgs {
    /// Directory of single-channel label PNGs.
    #[arg(long)]
    labels: PathBuf,
    /// Output directory for per-category boundary masks.
    #[arg(long)]
    out: PathBuf,
    /// Boundary half-width in pixels.
    #[arg(long, default_value_t = 2)]
    radius: u32,
    /// Directory of instance-id PNGs paired by file stem.
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Number of categories; inferred from the data when omitted.
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long, default_value_t = 255)]
    ignore_index: i32,
    /// Treat the raster edge as a boundary of the regions it cuts.
    #[arg(long)]
    border: bool,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    num: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    categories: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Export(args) => run_export(args),
        Command::GenBoundaries(args) => run_gen_boundaries(args),
        Command::SynthData(args) => run_synth_data(args),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = RunConfig::parse_with_overrides(&text, &args.overrides)?;
    println!(
        "training: {} iterations, batch {}, head '{}', output {}",
        cfg.schedule.max_iter,
        cfg.train.batch_size,
        cfg.head.variant,
        cfg.output_dir.display()
    );
    let log_every = cfg.train.log_interval.max(1);
    let progress = Box::new(move |iter: usize, lr: f64, report: &sembound::losses::LossReport| {
        if iter % log_every == 0 {
            println!(
                "iter {iter:>6}  lr {lr:.6}  total {:.4}  seg {:.4}  sbd {:?}",
                report.total,
                report.seg_ce,
                report
                    .sbd_bce
                    .iter()
                    .map(|v| (v * 1e4).round() / 1e4)
                    .collect::<Vec<_>>()
            );
        }
    });
    let outcome = trainer::train_with(
        &cfg,
        TrainOptions {
            resume: None,
            progress: Some(progress),
        },
    )?;
    for (iter, report) in &outcome.eval_reports {
        println!(
            "eval @ {iter}: mIoU {:.4}{}",
            report.miou,
            report
                .boundary_f
                .first()
                .map(|bf| format!(", boundary F@{}px {:.4}", bf.width, bf.mean))
                .unwrap_or_default()
        );
    }
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.weights)?;
    let model = ckpt.instantiate()?;
    let mut cfg = ckpt.config.clone();
    cfg.eval.trimap_widths = args.widths;
    cfg.eval.tta = args.tta;
    cfg.eval.ods = !args.no_ods;
    cfg.eval.error_maps = args.error_maps;
    cfg.eval.slide_window = match &args.slide {
        Some(s) => {
            let (h, w) = s
                .split_once('x')
                .context("--slide expects HxW, e.g. 512x1024")?;
            Some([h.parse()?, w.parse()?])
        }
        None => None,
    };
    let data = sembound::pipeline::DataSource::Directory(DirDataset::open(&args.data)?);
    println!(
        "evaluating {} ({} images, head discarded: {})",
        args.weights.display(),
        data.len(),
        ckpt.manifest.head_discarded
    );
    let report = trainer::evaluate(&model, &data, &cfg, &cfg.eval, Some(&args.out))?;
    print!(
        "{}",
        std::fs::read_to_string(args.out.join("summary.txt")).unwrap_or_default()
    );
    println!("mIoU: {:.4}", report.miou);
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let exported = ckpt.export_inference()?;
    exported.save(&args.out)?;
    println!(
        "exported {} trainable parameters (head discarded) to {}",
        exported.trainable_scalars(),
        args.out.display()
    );
    Ok(())
}

fn run_gen_boundaries(args: GenBoundariesArgs) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.labels)
        .with_context(|| format!("reading {}", args.labels.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no label PNGs in {}", args.labels.display());
    }
    std::fs::create_dir_all(&args.out)?;
    let cfg = BoundaryGenConfig {
        radius: args.radius,
        instance_sensitive: args.instances.is_some(),
        ignore_index: args.ignore_index,
        image_border_is_boundary: args.border,
    };

    // Infer the category count from the data unless given.
    let num_categories = match args.categories {
        Some(n) => n,
        None => {
            let mut max_id = 0;
            for path in &entries {
                let labels = png::read_label_png(path)?;
                max_id = max_id.max(
                    labels
                        .iter()
                        .filter(|&&v| v != args.ignore_index)
                        .max()
                        .copied()
                        .unwrap_or(0),
                );
            }
            (max_id + 1) as usize
        }
    };

    for path in &entries {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("bad file name")?;
        let labels = LabelMap::new(png::read_label_png(path)?)?;
        let instances = match &args.instances {
            Some(dir) => {
                let ipath = dir.join(format!("{stem}.png"));
                if !ipath.is_file() {
                    bail!("missing instance map {}", ipath.display());
                }
                Some(InstanceMap::new(png::read_label_png(&ipath)?.mapv(|v| v as u32)))
            }
            None => None,
        };
        let tensor = semantic_boundaries(&labels, num_categories, &cfg, instances.as_ref())?;
        for c in 0..num_categories {
            let mask = tensor.channel(c).to_owned();
            png::write_mask_png(&args.out.join(format!("{stem}_c{c:02}.png")), &mask)?;
        }
    }
    println!(
        "wrote {} masks ({} images x {} categories) to {}",
        entries.len() * num_categories,
        entries.len(),
        num_categories,
        args.out.display()
    );
    Ok(())
}

fn run_synth_data(args: SynthDataArgs) -> Result<()> {
    let samples = synth_shapes(args.num, args.size, args.categories, args.seed)?;
    for sub in ["images", "labels", "instances"] {
        std::fs::create_dir_all(args.out.join(sub))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:06}");
        png::write_rgb_png(&args.out.join(format!("images/{stem}.png")), &s.image)?;
        png::write_label_png(&args.out.join(format!("labels/{stem}.png")), s.labels.data())?;
        if let Some(inst) = &s.instances {
            png::write_label_png(
                &args.out.join(format!("instances/{stem}.png")),
                &inst.data().mapv(|v| v as i32),
            )?;
        }
    }
    println!(
        "wrote {} samples ({}x{}, {} categories) to {}",
        args.num,
        args.size,
        args.size,
        args.categories,
        args.out.display()
    );
    Ok(())
}
