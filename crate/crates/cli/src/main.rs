use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use blindsep::experiment::{cmd_generate, cmd_report, cmd_run, preset, ExperimentConfig, FIGURES};
use clap::{Args, Parser, Subcommand};

/// Seeded experiments for blind separation of intermittent sources.
#[derive(Parser)]
#[command(name = "blindsep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw scenarios and write Y, H, X and S as CSV.
    Generate(ExperimentArgs),
    /// Run the full pipeline and write curves, summaries and a manifest.
    Run {
        #[command(flatten)]
        args: ExperimentArgs,
        /// Concurrent trials (defaults to the number of CPUs).
        #[arg(long, env = "BLINDSEP_WORKERS")]
        workers: Option<usize>,
    },
    /// Verify run directories and print headline metrics.
    Report {
        /// A run directory, or a directory containing run directories.
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON configuration; keys given here override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a figure preset.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(FIGURES))]
    figure: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Parent directory for run output [default: config value, else "results"].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_config(args: &ExperimentArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let base = match &args.figure {
        Some(f) => preset(f)?,
        None => ExperimentConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut value, patch);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).context("invalid configuration")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("results").to_path_buf());
    cfg.validate()?;
    Ok((cfg, out))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(args) => {
            let (cfg, out) = load_config(&args)?;
            let dir = cmd_generate(&cfg, &out)?;
            println!("{}", dir.display());
        }
        Command::Run { args, workers } => {
            let (cfg, out) = load_config(&args)?;
            let workers = workers
                .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
                .unwrap_or(1);
            log::info!("running {} with {} trials on {workers} workers", cfg.name, cfg.trials);
            let (dir, outcome) = cmd_run(&cfg, &out, workers)?;
            for f in &outcome.summary.failures {
                log::warn!("point {} trial {} failed: {}", f.point, f.trial, f.error);
            }
            print!("{}", cmd_report(&dir)?);
            println!("{}", dir.display());
        }
        Command::Report { out } => print!("{}", cmd_report(&out)?),
    }
    Ok(())
}
