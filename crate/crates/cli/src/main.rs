//! `primid`: align, train, embed, enroll, verify, identify, evaluate and serve.

mod commands;
mod config;
mod exit;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use primid_core::gallery::Species;
use tracing_subscriber::EnvFilter;

use crate::config::CliConfig;

pub const SEED_ENV: &str = "PRIMID_SEED";

#[derive(Debug, Parser)]
#[command(name = "primid", version, about = "Primate face alignment, identification and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with default settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Trained weight file.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Architecture JSON; the default architecture is used when omitted.
    #[arg(long, global = true)]
    pub model_config: Option<PathBuf>,
    /// Gallery manifest path.
    #[arg(long, global = true)]
    pub gallery: Option<PathBuf>,
    /// Landmark template JSON.
    #[arg(long, global = true)]
    pub template: Option<PathBuf>,
    /// Seed for every random choice; falls back to PRIMID_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restrict to one species: lemur, golden_monkey or chimpanzee.
    #[arg(long, global = true)]
    pub species: Option<Species>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    /// Input image; repeatable where a command accepts several.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    /// Landmark CSV (`image,lx,ly,rx,ry,mx,my`) looked up by path or file name.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// Landmarks of a single image as `lx,ly,rx,ry,mx,my`.
    #[arg(long, value_delimiter = ',', num_args = 6, allow_negative_numbers = true)]
    pub points: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align every CSV row into a canonical crop and write the landmark template.
    Align {
        #[arg(long)]
        landmarks: PathBuf,
        /// Directory the CSV image names are relative to.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding network on a dataset manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output weight file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Print or save embeddings of images.
    Embed {
        #[command(flatten)]
        input: ImageArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add images of an individual (or a whole manifest) to the gallery.
    Enroll {
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        input: ImageArgs,
        /// Dataset manifest to enroll instead of single images.
        #[arg(long, conflicts_with_all = ["id", "name"])]
        data: Option<PathBuf>,
    },
    /// Score a probe image against one individual's template.
    Verify {
        #[arg(long)]
        id: String,
        #[command(flatten)]
        input: ImageArgs,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Rank gallery individuals for a probe image.
    Identify {
        #[command(flatten)]
        input: ImageArgs,
        #[arg(short, long)]
        k: Option<usize>,
        /// Open-set threshold; candidates below it are flagged as rejected.
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Cross-validated verification, closed-set and open-set evaluation.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Manifest of distractor images for open-set evaluation.
        #[arg(long)]
        distractors: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        sweep_repeats: usize,
        /// Epochs per fold when training instead of using `--model`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scores_csv: Option<PathBuf>,
        #[arg(long)]
        sweep_csv: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<SocketAddr>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long)]
        verify_threshold: Option<f32>,
    },
    /// Write the generated texture dataset as PNG files plus a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        /// Place each crop in a larger scene and record its landmarks.
        #[arg(long)]
        scenes: bool,
    },
}

fn resolve_config(global: &GlobalArgs, command: &Command) -> anyhow::Result<CliConfig> {
    use crate::exit::Classify;
    let file = match &global.config {
        Some(path) => CliConfig::load(path).config()?,
        None => CliConfig::default(),
    };
    let mut flags = CliConfig {
        model: global.model.clone(),
        model_config: global.model_config.clone(),
        gallery: global.gallery.clone(),
        template: global.template.clone(),
        seed: global.seed,
        species: global.species,
        json: global.json.then_some(true),
        ..Default::default()
    };
    match command {
        Command::Identify { k, threshold, .. } => {
            flags.k = *k;
            flags.threshold = *threshold;
        }
        Command::Verify { threshold, .. } => flags.threshold = *threshold,
        Command::Serve {
            bind,
            static_dir,
            verify_threshold,
        } => {
            flags.bind = *bind;
            flags.static_dir = static_dir.clone();
            flags.verify_threshold = *verify_threshold;
        }
        _ => {}
    }
    let mut cfg = file.overlay(flags);
    if cfg.seed.is_none() {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .map_err(|e| exit::config_error(format!("{SEED_ENV}={raw:?} is not a seed: {e}")))?;
            cfg.seed = Some(seed);
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = resolve_config(&cli.global, &cli.command).and_then(|cfg| commands::run(cli.command, &cfg));
    match result {
        Ok(code) => code,
        Err(e) => exit::report(&e),
    }
}
