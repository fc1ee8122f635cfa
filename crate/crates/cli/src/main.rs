mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conic_core::dataset::SplitRatios;

#[cfg(feature = "parallel")]
const BUILD: &str = concat!(env!("CARGO_PKG_VERSION"), " (parallel)");
#[cfg(not(feature = "parallel"))]
const BUILD: &str = concat!(env!("CARGO_PKG_VERSION"), " (sequential)");

#[derive(Parser, Debug)]
#[command(name = "conic", version = BUILD, about = "Stain normalization, splitting, augmentation, fusion and evaluation for nuclei label maps")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads, or `auto`.
    #[arg(long, global = true, env = "CONIC_THREADS", default_value = "auto", value_parser = parse_threads)]
    pub threads: Threads,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,
    /// Base directory for relative output paths and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// Run manifest location, relative to the output directory.
    #[arg(long, global = true, default_value = "run_manifest.json")]
    pub run_manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threads {
    Auto,
    Count(usize),
}

fn parse_threads(s: &str) -> Result<Threads, String> {
    if s == "auto" {
        return Ok(Threads::Auto);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Threads::Count(n)),
        _ => Err(format!("expected a positive integer or `auto`, got {s:?}")),
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct MacenkoArgs {
    /// Transmitted light intensity.
    #[arg(long, default_value_t = 255.0)]
    pub io: f64,
    /// Background OD threshold.
    #[arg(long, default_value_t = 0.15)]
    pub beta: f64,
    /// Robust angle percentile.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Concentration percentile used as the stain scale.
    #[arg(long, default_value_t = 99.0)]
    pub percentile: f64,
    /// Fewest tissue pixels needed to estimate stains.
    #[arg(long, default_value_t = 100)]
    pub min_tissue: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Macenko-normalize tiles to a reference stain model.
    Normalize {
        /// PNG tile or directory of PNG tiles.
        #[arg(long)]
        input: PathBuf,
        /// Output PNG, or directory when the input is a directory.
        #[arg(long)]
        out: PathBuf,
        /// Reference stain model (JSON).
        #[arg(long, conflicts_with = "reference_image", required_unless_present = "reference_image")]
        reference_model: Option<PathBuf>,
        /// Tile to estimate the reference stain model from.
        #[arg(long)]
        reference_image: Option<PathBuf>,
        /// Also write the reference model used.
        #[arg(long)]
        save_reference: Option<PathBuf>,
        #[command(flatten)]
        macenko: MacenkoArgs,
    },
    /// Class-balanced train/val/test split of a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "4:1:0.1")]
        ratios: SplitRatios,
        /// Writes `<prefix>.{train,val,test}.jsonl` and `<prefix>.balance.json`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Writes flipped, rotated, resized and stain-normalized copies.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Augmented copies per sample.
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long, default_value_t = 0.5)]
        p_flip_h: f64,
        #[arg(long, default_value_t = 0.5)]
        p_flip_v: f64,
        #[arg(long, default_value_t = 0.5)]
        p_rotate: f64,
        #[arg(long, default_value_t = 0.0)]
        p_resize: f64,
        /// Sizes a resize draws from.
        #[arg(long, value_delimiter = ',', default_values_t = conic_core::DEFAULT_SCALES)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        p_stain: f64,
        /// Reference stain model, required when --p-stain is positive.
        #[arg(long)]
        stain_reference: Option<PathBuf>,
        #[command(flatten)]
        macenko: MacenkoArgs,
    },
    /// Fuses per-scale instance predictions into one map per tile.
    Ensemble {
        /// `<scale>=<dir>`, once per scale.
        #[arg(long = "pred", required = true, value_parser = parse_scaled_dir)]
        preds: Vec<(usize, PathBuf)>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 3)]
        min_votes: usize,
        #[arg(long, default_value_t = 256)]
        base: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-instance source list (JSON).
        #[arg(long)]
        provenance: Option<PathBuf>,
    },
    /// Panoptic quality and composition R² of predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Per-class nucleus counts of one tile.
    Count {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        /// Optional JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_scaled_dir(s: &str) -> Result<(usize, PathBuf), String> {
    let (scale, dir) = s.split_once('=').ok_or_else(|| format!("expected <scale>=<dir>, got {s:?}"))?;
    let scale = scale
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("bad scale {scale:?}"))?;
    Ok((scale, PathBuf::from(dir)))
}

/// Bad flag values found after parsing. Reported like clap's usage errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn configure_threads(t: Threads) {
    #[cfg(feature = "parallel")]
    {
        let n = match t {
            Threads::Auto => 0,
            Threads::Count(n) => n,
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if let Threads::Count(n) = t {
        log::debug!("sequential build, ignoring --threads {n}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.global.log_level.filter())
        .format_timestamp(None)
        .init();
    configure_threads(cli.global.threads);

    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {u}\n\nFor more information, try '--help'.");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
