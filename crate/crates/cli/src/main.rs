//! Operator surface for the restoration pipeline: dataset synthesis,
//! training, restoration, evaluation, and prompt-pool statistics.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use t3diff_core::config::RunConfig;
use t3diff_core::dataset::export_dataset;
use t3diff_core::general_prompts::DepthSource;
use t3diff_core::tasks::{run_eval, run_pool_stats, run_restore, RestoreOptions};
use t3diff_core::train::{train, FINAL_CHECKPOINT_FILE, TRAIN_LOG_FILE};
use t3diff_core::weather_synth::make_sample;

#[derive(Parser)]
#[command(name = "t3diff", version, about = "Adverse-weather image restoration via residual diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic degraded/clean dataset.
    Synth(SynthArgs),
    /// Train a restoration model from a config file.
    Train(TrainArgs),
    /// Restore degraded images with a trained checkpoint.
    Restore(RestoreArgs),
    /// Report PSNR/SSIM per weather label over an exported dataset.
    Eval(EvalArgs),
    /// Report sub-prompt selection frequencies per weather label.
    PoolStats(PoolStatsArgs),
}

/// How depth features are obtained for each input image.
#[derive(Clone, Copy, ValueEnum)]
enum DepthSourceArg {
    /// Derive features from the image itself with the built-in estimator.
    Stub,
    /// Read features from a `.t3df` file next to each input image.
    File,
}

impl From<DepthSourceArg> for DepthSource {
    fn from(v: DepthSourceArg) -> Self {
        match v {
            DepthSourceArg::Stub => DepthSource::Stub,
            DepthSourceArg::File => DepthSource::PrecomputedFile,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Config file (TOML). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Output directory for the dataset (default: <out_dir>/dataset).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the number of samples to generate.
    #[arg(long, value_name = "N")]
    count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (TOML). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Override the config output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    /// Trained checkpoint to restore with.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Degraded input images (PNG).
    #[arg(required = true, value_name = "IMAGE")]
    inputs: Vec<PathBuf>,

    /// Output directory for restored images.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Depth feature source.
    #[arg(long, value_enum, default_value_t = DepthSourceArg::Stub)]
    depth_source: DepthSourceArg,

    /// Override the number of sampler steps.
    #[arg(long, value_name = "N")]
    steps: Option<usize>,

    /// Also write a residual heat-map image per input.
    #[arg(long)]
    heatmap: bool,

    /// Use the raw training weights instead of the EMA shadow.
    #[arg(long)]
    raw_weights: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Exported dataset directory (from `synth`).
    #[arg(value_name = "DATASET_DIR")]
    dataset: PathBuf,

    /// Directory to write eval.csv into.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PoolStatsArgs {
    /// Trained checkpoint to analyze.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Exported dataset directory (from `synth`).
    #[arg(value_name = "DATASET_DIR")]
    dataset: PathBuf,

    /// Directory to write pool_stats.csv and pool_hist.png into.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

fn load_config(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_path(p)
            .with_context(|| format!("loading config from {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = out {
        cfg.out_dir = dir
            .to_str()
            .with_context(|| format!("non-UTF-8 output directory {}", dir.display()))?
            .to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed, None)?;
    let count = args.count.unwrap_or(cfg.synth.count);
    if count == 0 {
        bail!("nothing to generate: count is 0");
    }
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.out_dir).join("dataset"));
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        samples.push(make_sample(&cfg.synth, cfg.seed, index as u64)?);
    }
    export_dataset(&dir, &samples, cfg.seed)?;
    println!("wrote {count} samples to {}", dir.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed, args.out.as_deref())?;
    let outcome = train(&cfg, args.checkpoint.as_deref())?;
    let out_dir = Path::new(&cfg.out_dir);
    println!(
        "trained {} steps; checkpoint {}; log {}",
        outcome.steps_done,
        out_dir.join(FINAL_CHECKPOINT_FILE).display(),
        out_dir.join(TRAIN_LOG_FILE).display(),
    );
    if let Some(row) = outcome.rows.last() {
        println!("final losses: total {} (l_res {})", row.total, row.l_res);
    }
    Ok(())
}

fn cmd_restore(args: &RestoreArgs) -> Result<()> {
    let opts = RestoreOptions {
        use_ema: !args.raw_weights,
        sample_steps: args.steps,
        depth_source: args.depth_source.into(),
        heatmap: args.heatmap,
    };
    let outputs = run_restore(&args.checkpoint, &args.inputs, &args.out, &opts)?;
    for out in &outputs {
        println!("{}", out.restored.display());
        if let Some(h) = &out.heatmap {
            println!("{}", h.display());
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let csv = args.out.join("eval.csv");
    let rows = run_eval(&args.checkpoint, &args.dataset, &csv)?;
    for row in &rows {
        println!(
            "{}/{}: psnr {:.2} dB, ssim {:.4} ({} images)",
            row.dataset, row.label, row.psnr, row.ssim, row.n
        );
    }
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_pool_stats(args: &PoolStatsArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let csv = args.out.join("pool_stats.csv");
    let png = args.out.join("pool_hist.png");
    let record = run_pool_stats(&args.checkpoint, &args.dataset, &csv, Some(&png))?;
    for label in record.labels() {
        println!("{}: {} queries", label.as_str(), record.total_queries(label));
    }
    println!("wrote {} and {}", csv.display(), png.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Restore(args) => cmd_restore(args),
        Command::Eval(args) => cmd_eval(args),
        Command::PoolStats(args) => cmd_pool_stats(args),
    }
}
