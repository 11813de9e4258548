//! `rmmdf`: train, predict, evaluate and ablate the recursive fusion
//! saliency network.

mod commands;
mod manifest;
mod plots;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Failure carrying the process exit code: 1 for usage, configuration and
/// data problems, 2 for numerical blow-up.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<rmmdf::error::Error> for Failure {
    fn from(e: rmmdf::error::Error) -> Self {
        Self {
            code: if e.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rmmdf", version = env!("RMMDF_VERSION"), about = "Recursive two-stream fusion for salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration source and overrides shared by the commands that build a
/// network. `--config` wins over `--preset`; the flags below override both.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration when no file is given.
    #[arg(long, value_parser = ["micro", "desk", "paper"])]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of recursive stages N.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Square input side, a multiple of 32.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Channel width multiplier relative to the full-size streams.
    #[arg(long = "width-mult")]
    pub width_mult: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one variant on an image/mask dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root with images/ and masks/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// vgg-only, resnet-only, drm, drm-dam or full.
        #[arg(long, default_value = "full")]
        variant: String,
        /// Safetensors file whose matching tensors initialize the model.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Write saliency maps for every image under a dataset root.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the map after every recursive stage.
        #[arg(long)]
        dump_stages: bool,
    },
    /// Score predicted maps against ground-truth masks.
    Eval {
        /// Directory of predicted PNGs.
        #[arg(long)]
        pred: PathBuf,
        /// Mask directory, or a dataset root containing masks/.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = rmmdf::metrics::BETA_SQ)]
        beta_sq: f64,
    },
    /// Train and score the five-variant ladder under one seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic shapes dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("RMMDF_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("RMMDF_NUM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Train {
            cfg,
            data,
            out,
            variant,
            init_from,
        } => commands::train(&cfg, &data, &out, &variant, init_from.as_deref()),
        Command::Predict {
            cfg,
            checkpoint,
            data,
            out,
            dump_stages,
        } => commands::predict(&cfg, &checkpoint, &data, &out, dump_stages),
        Command::Eval { pred, gt, out, beta_sq } => commands::eval(&pred, &gt, &out, beta_sq),
        Command::Ablate { cfg, data, out } => commands::ablate(&cfg, &data, &out),
        Command::Generate {
            out,
            count,
            resolution,
            seed,
        } => commands::generate(&out, count, resolution, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
