mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coda_core::dau::RescaleKind;
use coda_core::net::{EncodingKind, Optimizer};
use coda_core::tensor::Real;
use serde::Serialize;

#[global_allocator]
static ALLOC: coda_core::bench::TrackingAllocator = coda_core::bench::TrackingAllocator;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "CODA_NUM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "coda", version, about = "Train, explain and evaluate convolutional dynamic alignment networks")]
pub struct Cli {
    /// TOML file with global keys (seed, precision, out) and one table per command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, data order and sampling (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Must match the precision the binary was built with (f64 unless built with the `f32` feature).
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and save it with its per-epoch history.
    Train(TrainFlags),
    /// Decompose one prediction into input contributions.
    Explain(ExplainFlags),
    /// Localisation scores on grids of confidently classified images.
    Pointing(PointingFlags),
    /// Target confidence as input positions are removed by importance.
    Removal(RemovalFlags),
    /// Train at several temperatures and compare localisation.
    Temperature(TemperatureFlags),
    /// Fit one unit to noisy templates and inspect its singular vectors.
    Evdemo(EvDemoFlags),
    /// Forward-pass time and peak allocation per rescaler and batch size.
    Bench(BenchFlags),
}

#[derive(Args, Debug, Default, Serialize)]
pub struct DataFlags {
    /// IDX image file (optionally gzipped).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// IDX label file (optionally gzipped).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// CIFAR-10 binary batch files, used instead of IDX.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cifar: Option<Vec<PathBuf>>,
    /// Classes to keep, e.g. 0,1,2.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    /// Share of each class held out for testing (default 0.2).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    /// Salt of the hash that assigns images to the splits.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_salt: Option<u64>,
    /// Cap on training images per class.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    /// Cap on test images per class.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct ModelFlags {
    /// Rescaler of the dynamic weights: l2, sq or wb.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rescale: Option<RescaleKind>,
    /// Input encoding: six (pixel and inverse) or embed (learnt 3x3 embedding).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoding: Option<EncodingKind>,
    /// Piecewise-linear stem blocks in front of the CoDA layers (0 = pure network).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stem_depth: Option<usize>,
    /// CoDA layers after a stem.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coda_depth: Option<usize>,
    /// Logit temperature T.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<Real>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct OptimFlags {
    /// adam or sgd (heavy-ball momentum).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Images per recorded graph; bounds memory, not the update.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<Real>,
    /// SGD momentum, or Adam's beta1.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<Real>,
    /// Cosine learning-rate decay to zero.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct ExplainFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Index of the image in the test split.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    /// Class to explain (defaults to the image's label).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    /// Explanation depth: 0 decomposes onto the model input, t onto the input of CoDA layer t.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// Hybrids only: explain at the input of this stem block (frozen-weight Input x Gradient).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stem_block: Option<usize>,
    /// Pixel upscaling of the written PPM images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct PointingFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grids: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    /// Attribution methods: inherent, grad, ixg, occK[:S], random.
    #[arg(long = "method", value_delimiter = ',')]
    #[serde(rename = "methods", skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct RemovalFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[arg(long = "method", value_delimiter = ',')]
    #[serde(rename = "methods", skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    /// Removal orders: least, most, random.
    #[arg(long = "order", value_delimiter = ',')]
    #[serde(rename = "orders", skip_serializing_if = "Option::is_none")]
    pub orders: Option<Vec<String>>,
    /// Ascending fractions of positions to remove, e.g. 0,0.1,0.2.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fractions: Option<Vec<Real>>,
}

#[derive(Args, Debug, Serialize)]
pub struct TemperatureFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimFlags,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperatures: Option<Vec<Real>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grids: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvDemoFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Template classes; the first image of each is used.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Real>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<Real>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rescale: Option<RescaleKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchFlags {
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_sizes: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
