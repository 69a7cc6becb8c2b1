//! `avatar`: batch front end for building and driving portrait avatars.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use avatar_core::imaging::load_png;
use avatar_core::pipeline::{
    evaluate_dirs, evaluate_frames, load_training_video, reenact, render_stream, track_dataset, train_on_datasets,
    write_synthetic_dataset, DatasetLayout, InferenceSession, SynthConfig, TrainMode, CACHE_ROOT_ENV,
};
use avatar_core::training::TrainConfig;

#[derive(Parser)]
#[command(name = "avatar", version, about = "Build, drive and evaluate portrait video avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic talking-head dataset with exact landmarks and masks.
    SynthData(SynthArgs),
    /// Track a dataset and cache its conditioning renderings.
    Track(TrackArgs),
    /// Train from scratch, pre-train on several datasets, or fine-tune.
    Train(TrainArgs),
    /// Render a dataset's tracked parameters with a trained avatar.
    Infer(InferArgs),
    /// Drive a trained avatar with another video's expression and pose.
    Reenact(ReenactArgs),
    /// PSNR and SSIM of rendered frames against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Subject seed: identity, colors, background and motion.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 192)]
    resolution: usize,
    /// Pixels per model unit; scale with the resolution.
    #[arg(long)]
    head_scale: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Training configuration; its frame size sets the render resolution.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-track even when a valid cache exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// One dataset, or several with --pretrain.
    #[arg(long, num_args = 1.., required = true)]
    dataset: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    /// One identity code per dataset.
    #[arg(long, conflicts_with = "finetune")]
    pretrain: bool,
    /// Continue from this checkpoint on a single new dataset.
    #[arg(long)]
    finetune: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose tracked parameters drive the avatar.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Temporal code timestamp in [0, 1]; defaults to the stored one.
    #[arg(long)]
    timestamp: Option<f64>,
}

#[derive(Args)]
struct ReenactArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    driver: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Re-track the driver even when its cache is valid.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of rendered frames.
    #[arg(long)]
    out: PathBuf,
    /// Compare against this dataset's cached frame crops.
    #[arg(long, conflicts_with = "ground_truth", required_unless_present = "ground_truth")]
    dataset: Option<PathBuf>,
    /// Compare against same-named PNGs in this directory.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("invalid config {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        frames: a.frames,
        resolution: a.resolution,
        subject_seed: a.seed,
        head_scale: a
            .head_scale
            .unwrap_or(defaults.head_scale * a.resolution as f64 / defaults.resolution as f64),
        ..defaults
    };
    let layout = write_synthetic_dataset(&a.out, &cfg, a.force)?;
    eprintln!("wrote {} frames to {}", cfg.frames, layout.root.display());
    Ok(())
}

#[derive(Serialize)]
struct TrackReport {
    dataset: String,
    frames: usize,
    reused: bool,
    cache: PathBuf,
    max_residual_px: f64,
}

fn track(a: TrackArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let layout = DatasetLayout::new(&a.dataset);
    let out = track_dataset(&layout, cfg.network.frame_size, a.force)?;
    print_json(&TrackReport {
        dataset: layout.name(),
        frames: out.cache.frames.len(),
        reused: out.reused,
        cache: layout.cache.clone(),
        max_residual_px: out.cache.residual_rms.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Serialize)]
struct TrainReport {
    iterations_run: u64,
    reached_at: Option<u64>,
    identities: usize,
    psnr: f64,
    mask_mae: f64,
    checkpoint: PathBuf,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    let mode = match (a.pretrain, a.finetune) {
        (_, Some(ck)) => TrainMode::Finetune(ck),
        (true, None) => TrainMode::Pretrain,
        (false, None) => TrainMode::Scratch,
    };
    if a.dataset.len() > 1 && mode != TrainMode::Pretrain {
        bail!("several datasets need --pretrain");
    }
    let datasets: Vec<DatasetLayout> = a.dataset.iter().map(|d| DatasetLayout::new(d)).collect();
    let s = train_on_datasets(&cfg, &datasets, &mode, &a.out)?;
    print_json(&TrainReport {
        iterations_run: s.iterations_run,
        reached_at: s.reached_at,
        identities: s.identities,
        psnr: s.final_eval.psnr,
        mask_mae: s.final_eval.mask_mae,
        checkpoint: a.out,
    })
}

fn infer(a: InferArgs) -> Result<()> {
    let mut session = InferenceSession::open(&a.checkpoint)?;
    if let Some(t) = a.timestamp {
        if !(0.0..=1.0).contains(&t) {
            bail!("timestamp must lie in [0, 1], got {t}");
        }
        session.set_timestamp(t);
    }
    let layout = DatasetLayout::new(&a.dataset);
    track_dataset(&layout, session.frame_size(), false)?;
    let (_, _, stream) = load_training_video(&layout, session.frame_size())?;
    let written = render_stream(&mut session, &stream, &a.out)?;
    eprintln!("rendered {} frames to {}", written.len(), a.out.display());
    Ok(())
}

fn reenact_cmd(a: ReenactArgs) -> Result<()> {
    let mut session = InferenceSession::open(&a.checkpoint)?;
    let layout = DatasetLayout::new(&a.driver);
    track_dataset(&layout, session.frame_size(), a.force).context("tracking the driver failed")?;
    let (_, _, stream) = load_training_video(&layout, session.frame_size())?;
    let written = reenact(&mut session, &stream, &a.out)?;
    eprintln!("rendered {} frames to {}", written.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = match (a.dataset, a.ground_truth) {
        (_, Some(gt)) => evaluate_dirs(&a.out, &gt)?,
        (Some(d), None) => {
            let layout = DatasetLayout::new(&d);
            let cache = avatar_core::pipeline::TrackCache::read(&layout.cache)
                .with_context(|| format!("{} has not been tracked", d.display()))?;
            let (video, _, _) = load_training_video(&layout, cache.resolution)?;
            let mut frames = Vec::with_capacity(video.frames.len());
            for (i, fr) in cache.frames.iter().zip(&video.frames) {
                let name = format!("{i:06}");
                let path = a.out.join(format!("{name}.png"));
                let out = load_png(&path).with_context(|| format!("missing output frame {}", path.display()))?;
                frames.push((name, out, fr.image.clone()));
            }
            evaluate_frames(&frames)?
        }
        (None, None) => bail!("pass --dataset or --ground-truth"),
    };
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    print_json(&report)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(root) = std::env::var_os(CACHE_ROOT_ENV) {
        eprintln!("tracking caches under {}", PathBuf::from(root).display());
    }
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Track(a) => track(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Reenact(a) => reenact_cmd(a),
        Command::Eval(a) => eval(a),
    }
}
