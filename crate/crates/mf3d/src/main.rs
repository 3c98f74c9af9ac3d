use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mf3d::commands::{self, DetectOptions, EvalOptions, GradcheckOptions, SynthOptions, TrainOptions};
use mf3d::config::Config;
use mf3d::dataset::MANIFEST;
use mf3d::{CliError, Result};

/// Face detection driven by a 3D mean face.
#[derive(Debug, Parser)]
#[command(name = "mf3d", version)]
struct Cli {
    /// `key = value` configuration file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, sampling and initialisation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic scenes with exact annotations.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Side of the square canvas in pixels.
        #[arg(long)]
        canvas: Option<usize>,
        #[arg(long)]
        min_faces: Option<usize>,
        #[arg(long)]
        max_faces: Option<usize>,
    },
    /// Train a model from scratch on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr_start: Option<f64>,
        #[arg(long)]
        lr_end: Option<f64>,
    },
    /// Detect faces in PPM images.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Detection file to write.
        #[arg(long)]
        out: PathBuf,
        /// Run on every image of this dataset's manifest.
        #[arg(long, conflicts_with = "images")]
        dataset: Option<PathBuf>,
        images: Vec<PathBuf>,
        #[command(flatten)]
        thresholds: Thresholds,
    },
    /// Score detections against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Defaults to the manifest next to the annotation file.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// discrete (box IoU) or continuous (ellipse overlap).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        iou: Option<f64>,
        /// ROC curve to write (CSV).
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        /// Random cases per layer and loss suite.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Parameters sampled in the full-model check; 0 checks all.
        #[arg(long, default_value_t = 300)]
        entries: usize,
    },
}

#[derive(Debug, Args)]
struct Thresholds {
    #[arg(long)]
    nms_threshold: Option<f64>,
    #[arg(long)]
    keypoint_threshold: Option<f64>,
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    cfg.seed = cli.seed.or(cfg.seed);
    let seed = cfg.seed.unwrap_or(0);
    match cli.command {
        Command::Synth { out, count, canvas, min_faces, max_faces } => {
            let opts = SynthOptions {
                out,
                count: count.or(cfg.count).unwrap_or(200),
                seed,
                canvas: canvas.or(cfg.canvas).unwrap_or(64),
                faces: (min_faces.or(cfg.min_faces).unwrap_or(1), max_faces.or(cfg.max_faces).unwrap_or(2)),
            };
            let s = commands::synth(&opts)?;
            println!("wrote {} images with {} faces to {}", s.images, s.faces, opts.out.display());
        }
        Command::Train { dataset, out, log, epochs, lr_start, lr_end } => {
            cfg.epochs = epochs.or(cfg.epochs);
            cfg.lr_start = lr_start.or(cfg.lr_start);
            cfg.lr_end = lr_end.or(cfg.lr_end);
            let opts = TrainOptions { dataset, checkpoint: out, log, model: cfg.model(), train: cfg.train(), init_seed: seed };
            let s = commands::train(&opts)?;
            println!(
                "trained on {} images for {} steps: loss {:.4} -> {:.4}; checkpoint {}",
                s.images,
                s.steps,
                s.first_loss,
                s.last_loss,
                opts.checkpoint.display()
            );
        }
        Command::Detect { checkpoint, out, dataset, images, thresholds } => {
            cfg.nms_threshold = thresholds.nms_threshold.or(cfg.nms_threshold);
            cfg.keypoint_threshold = thresholds.keypoint_threshold.or(cfg.keypoint_threshold);
            let (root, images) = match dataset {
                Some(dir) => {
                    let names = commands::manifest_images(&dir)?;
                    (dir, names)
                }
                None if images.is_empty() => return Err(CliError::Invalid("no input images (pass paths or --dataset)".into())),
                None => (PathBuf::new(), images.iter().map(|p| p.display().to_string()).collect()),
            };
            let opts = DetectOptions { checkpoint, images, root, out, config: cfg.detect() };
            let records = commands::detect_command(&opts)?;
            let n: usize = records.iter().map(|r| r.detections.len()).sum();
            println!("{n} detections in {} images written to {}", records.len(), opts.out.display());
        }
        Command::Eval { detections, annotations, manifest, mode, iou, roc } => {
            let manifest = manifest.unwrap_or_else(|| annotations.with_file_name(MANIFEST));
            let mode = commands::parse_mode(mode.or(cfg.mode).as_deref().unwrap_or("discrete"))?;
            let opts = EvalOptions { detections, annotations, manifest, mode, iou: iou.or(cfg.iou).unwrap_or(0.5), roc };
            let s = commands::eval(&opts)?;
            let last = s.roc.last().expect("the ROC has at least one point");
            println!("images {}  faces {}  detections {}", s.images, s.truths, s.detections);
            println!("recall at 0 FP {:.4}", s.recall_at(0));
            println!("recall at <= 1 FP/image ({} FP) {:.4}", s.images, s.recall_at(s.images));
            println!("final recall {:.4} with {} FP", last.recall, last.false_positives);
        }
        Command::Gradcheck { instances, entries } => {
            let opts = GradcheckOptions {
                model: cfg.model(),
                seed,
                instances,
                model_entries: (entries > 0).then_some(entries),
            };
            let reports = commands::gradcheck(&opts)?;
            for r in &reports {
                println!("{}", commands::format_report(r));
            }
            return Ok(reports.iter().all(|r| r.passed()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
