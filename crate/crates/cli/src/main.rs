//! `dsg`: train a reference CNN, synthesize calibration data from its BN
//! statistics, calibrate and evaluate fake-quantized models, and run the
//! diagnostics and sweep experiments.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dsg", version, about = "Data-free quantization lab")]
struct Cli {
    /// Worker threads; 1 is the default. Results do not depend on it.
    #[arg(long, global = true, env = "DSG_THREADS", default_value_t = 1)]
    threads: usize,

    /// `key=value` file (or a previous manifest.json) supplying flag
    /// defaults; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural glyph dataset (raw or IDX).
    MakeData(MakeDataArgs),
    /// Train a reference CNN.
    Train(TrainArgs),
    /// Synthesize a calibration batch from a model's BN statistics.
    Generate(GenerateArgs),
    /// Quantize a model, calibrate activations and report accuracy.
    CalibrateEval(CalibrateArgs),
    /// Dispersion and offset diagnostics of a batch, plus a histogram dump.
    Diagnose(DiagnoseArgs),
    /// Quantized accuracy over epsilon in {0, 0.1, ..., 1} for several seeds.
    SweepEpsilon(SweepArgs),
    /// Quantized accuracy of every generation mode for several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Raw,
    Idx,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PixelScale {
    /// `[0, 1]`, as IDX stores them.
    Unit,
    /// Standardized with the glyph pixel mean and std.
    Standard,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct MakeDataArgs {
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 28)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DataFormat::Raw)]
    pub format: DataFormat,
    /// Pixel scale; defaults to standard for raw and unit for IDX.
    #[arg(long, value_enum)]
    pub pixels: Option<PixelScale>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long, default_value = "cnn5bn")]
    pub arch: String,
    /// Training set: a raw dataset directory or an IDX images file.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional held-out set for the reported test accuracy.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Vanilla,
    Sda,
    Lse,
    Dsg,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenOptions {
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Synthetic batch size; defaults to the model's BN layer count.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Gaussian probe samples used to set the margins.
    #[arg(long, alias = "probe", default_value_t = 1024)]
    pub probe_count: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Dsg)]
    pub mode: ModeArg,
    /// Margin percentile; ignored (with a warning) by vanilla and lse.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub gen: GenOptions,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum QuantArg {
    Vanilla,
    Percentile,
    Ema,
    Mse,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct QuantOptions {
    /// Weight bits (2..=8), or 32 for full precision.
    #[arg(long, default_value_t = 8)]
    pub wbits: u8,
    /// Activation bits (2..=8), or 32 for full precision.
    #[arg(long, default_value_t = 8)]
    pub abits: u8,
    #[arg(long, value_enum, default_value_t = QuantArg::Vanilla)]
    pub quant: QuantArg,
    /// Percentile calibrator `p`.
    #[arg(long, default_value_t = 0.9999)]
    pub p: f64,
    #[arg(long, default_value_t = 0.9)]
    pub ema_momentum: f64,
    #[arg(long, default_value_t = 100)]
    pub mse_grid: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration batch: synthetic output of `generate`, or real data.
    #[arg(long)]
    pub calib_data: PathBuf,
    #[arg(long)]
    pub eval_data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub quant: QuantOptions,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Optional second batch; per-layer median ratios data/reference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// BN layer index for the histogram dump.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub eval_data: PathBuf,
    /// Generation mode for every sweep point (sda or dsg).
    #[arg(long, value_enum, default_value_t = ModeArg::Sda)]
    pub mode: ModeArg,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub gen: GenOptions,
    #[command(flatten)]
    #[serde(flatten)]
    pub quant: QuantOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub epsilon: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub gen: GenOptions,
    #[command(flatten)]
    #[serde(flatten)]
    pub quant: QuantOptions,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(commands::EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    dsg_core::exec::set_threads(cli.threads);
    let result = match &cli.command {
        Command::MakeData(a) => commands::make_data(a, cli.threads),
        Command::Train(a) => commands::train(a, cli.threads),
        Command::Generate(a) => commands::generate(a, cli.threads),
        Command::CalibrateEval(a) => commands::calibrate_eval(a, cli.threads),
        Command::Diagnose(a) => commands::diagnose(a, cli.threads),
        Command::SweepEpsilon(a) => commands::sweep_epsilon(a, cli.threads),
        Command::Ablate(a) => commands::ablate(a, cli.threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
