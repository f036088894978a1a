use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "kprnet", version, about = "Range-image LiDAR segmentation with point refinement")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root holding `sequences/NN/...`.
    #[arg(long, global = true, env = "KPRNET_DATA")]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override any config key, e.g. `--set knn.k=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Do not print the resolved config.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Args, Debug, Default)]
struct ProjectionFlags {
    /// spherical or unfold
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Resize the image to HxW after projection.
    #[arg(long, value_name = "HxW")]
    upsample: Option<String>,
}

#[derive(Args, Debug, Default)]
struct KnnFlags {
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    knn_window: Option<usize>,
    #[arg(long)]
    knn_sigma: Option<f64>,
    /// Largest range difference that may vote; 0 disables it.
    #[arg(long)]
    knn_cutoff: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project `.bin` scans to range image (`.kpri`) files.
    Project {
        #[arg(required = true)]
        scans: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        projection: ProjectionFlags,
        /// Print dropped and colliding point counts.
        #[arg(long)]
        stats: bool,
    },
    /// Train on the training sequences.
    Train {
        #[arg(long, short)]
        out: PathBuf,
        /// kpr (point refinement) or pixel (per-pixel classifier).
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Comma list or ranges, e.g. `0-7,9,10`.
        #[arg(long)]
        sequences: Option<String>,
        #[command(flatten)]
        projection: ProjectionFlags,
    },
    /// Write `.label` predictions for every scan of the given sequences.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Defaults to the validation sequences.
        #[arg(long)]
        sequences: Option<String>,
    },
    /// Re-vote predicted labels with the range-image KNN filter.
    Postprocess {
        /// Root holding `sequences/NN/predictions/*.label`.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        sequences: Option<String>,
        #[command(flatten)]
        projection: ProjectionFlags,
        #[command(flatten)]
        knn: KnnFlags,
    },
    /// Per-class IoU of predictions against ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        sequences: Option<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a kernel point disposition.
    KernelPoints {
        #[arg(long, short)]
        k: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write a synthetic labeled dataset in the on-disk sequence layout.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value = "0,8")]
        sequences: String,
        /// Scans per sequence.
        #[arg(long, default_value_t = 4)]
        scans: usize,
        #[arg(long, default_value_t = 32)]
        beams: usize,
        #[arg(long, default_value_t = 512)]
        azimuth: usize,
        /// Add range and remission noise and dropouts.
        #[arg(long)]
        noisy: bool,
    },
}

fn apply_projection(cfg: &mut RunConfig, p: &ProjectionFlags) -> Result<()> {
    cfg.set_opt("projection.mode", p.mode.as_ref())?;
    cfg.set_opt("projection.height", p.height)?;
    cfg.set_opt("projection.width", p.width)?;
    cfg.set_opt("projection.upsample", p.upsample.as_ref())
}

fn apply_knn(cfg: &mut RunConfig, k: &KnnFlags) -> Result<()> {
    cfg.set_opt("knn.k", k.knn_k)?;
    cfg.set_opt("knn.window", k.knn_window)?;
    cfg.set_opt("knn.sigma", k.knn_sigma)?;
    cfg.set_opt("knn.cutoff", k.knn_cutoff)
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.global.config {
        cfg.apply_file(path)?;
    }
    let g = &cli.global;
    cfg.set_opt("data.root", g.data_root.as_ref().map(|p| p.display()))?;
    cfg.set_opt("seed", g.seed)?;
    cfg.set_opt("jobs", g.jobs)?;
    match &cli.command {
        Command::Project { projection, .. } => apply_projection(&mut cfg, projection)?,
        Command::Train {
            model,
            epochs,
            batch,
            lr,
            warmup,
            max_steps,
            sequences,
            projection,
            ..
        } => {
            cfg.set_opt("train.model", model.as_ref())?;
            cfg.set_opt("train.epochs", *epochs)?;
            cfg.set_opt("train.batch", *batch)?;
            cfg.set_opt("train.lr", *lr)?;
            cfg.set_opt("train.warmup", *warmup)?;
            cfg.set_opt("train.max_steps", *max_steps)?;
            cfg.set_opt("data.train_sequences", sequences.as_ref())?;
            apply_projection(&mut cfg, projection)?;
        }
        Command::Infer { sequences, .. } | Command::Eval { sequences, .. } => {
            cfg.set_opt("data.val_sequences", sequences.as_ref())?;
        }
        Command::Postprocess {
            sequences,
            projection,
            knn,
            ..
        } => {
            cfg.set_opt("data.val_sequences", sequences.as_ref())?;
            apply_projection(&mut cfg, projection)?;
            apply_knn(&mut cfg, knn)?;
        }
        Command::KernelPoints { k, radius, .. } => {
            cfg.set_opt("kpconv.kernel_points", *k)?;
            cfg.set_opt("kpconv.radius", *radius)?;
        }
        Command::Synth { .. } => {}
    }
    for kv in &g.sets {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_pool(jobs: usize) -> Result<()> {
    #[cfg(feature = "parallel")]
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("starting the worker pool")?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    if !cli.global.quiet {
        for line in cfg.to_text().lines() {
            eprintln!("# {line}");
        }
    }
    init_pool(cfg.jobs()?)?;
    match cli.command {
        Command::Project { scans, out, stats, .. } => commands::project(&cfg, &scans, &out, stats),
        Command::Train { out, .. } => commands::train(&cfg, &out),
        Command::Infer { checkpoint, out, .. } => commands::infer(&cfg, &checkpoint, &out),
        Command::Postprocess { predictions, out, .. } => commands::postprocess(&cfg, &predictions, &out),
        Command::Eval { predictions, csv, .. } => commands::eval(&cfg, &predictions, csv.as_deref()),
        Command::KernelPoints { out, .. } => commands::kernel_points(&cfg, &out),
        Command::Synth {
            out,
            sequences,
            scans,
            beams,
            azimuth,
            noisy,
        } => commands::synth(&cfg, &out, &sequences, scans, beams, azimuth, noisy),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
